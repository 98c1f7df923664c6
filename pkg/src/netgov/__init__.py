"""Utility-driven self-governance of a simulated packet network."""

__version__ = "0.1.0"
