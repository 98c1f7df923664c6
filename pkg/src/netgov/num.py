"""Network utility maximization by dual (link-price) projected gradient.

Sources respond to the sum of prices along their route with the rate that
equates marginal utility to that price; links raise their price while
oversubscribed and lower it (never below zero) while underused.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UTILITY_FAMILIES = ("log", "alpha-fair")
INITIAL_PRICE = 0.01
STEP_GROWTH = 1.05  # per accepted step; backtracking halves it back when too long


class DomainError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual, iterations):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class UtilitySpec:
    family: str = "log"
    weight: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.family not in UTILITY_FAMILIES:
            raise ValueError(f"unknown utility family {self.family!r}")
        if not self.weight > 0:
            raise ValueError("utility weight must be > 0")
        if self.family == "alpha-fair" and not self.alpha > 0:
            raise ValueError("alpha must be > 0 (alpha = 0 is linear, not strictly concave)")

    def normalized(self):
        """alpha-fair with alpha == 1 is the log family."""
        if self.family == "alpha-fair" and self.alpha == 1:
            return UtilitySpec("log", self.weight)
        return self


def utility_value(spec, x):
    if not x > 0:
        raise DomainError(f"utility undefined at rate {x}")
    spec = spec.normalized()
    if spec.family == "log":
        return spec.weight * math.log(x)
    a = spec.alpha
    return spec.weight * x ** (1 - a) / (1 - a)


def marginal_utility(spec, x):
    if not x > 0:
        raise DomainError(f"marginal utility undefined at rate {x}")
    spec = spec.normalized()
    if spec.family == "log":
        return spec.weight / x
    return spec.weight * x ** (-spec.alpha)


def inverse_marginal(spec, price):
    """Rate at which marginal utility equals ``price``."""
    if not price > 0:
        raise DomainError(f"inverse marginal undefined at price {price}")
    spec = spec.normalized()
    if spec.family == "log":
        return spec.weight / price
    return (spec.weight / price) ** (1.0 / spec.alpha)


@dataclass
class RateProblem:
    routes: list  # per source, list of link ids
    capacities: list
    utilities: list  # per source UtilitySpec

    def __post_init__(self):
        self.capacities = [float(c) for c in self.capacities]
        L = len(self.capacities)
        if not self.routes:
            raise ValueError("problem needs at least one source")
        if len(self.utilities) != len(self.routes):
            raise ValueError("one utility spec per source required")
        for c in self.capacities:
            if not c > 0:
                raise ValueError(f"link capacities must be > 0, got {c}")
        for s, r in enumerate(self.routes):
            if not r:
                raise ValueError(f"source {s} crosses no link")
            if len(set(r)) != len(r):
                raise ValueError(f"source {s} lists a link twice")
            for l in r:
                if not 0 <= l < L:
                    raise ValueError(f"source {s} uses unknown link {l}")

    @property
    def incidence(self):
        R = np.zeros((len(self.routes), len(self.capacities)))
        for s, r in enumerate(self.routes):
            R[s, r] = 1.0
        return R

    def objective(self, rates):
        return math.fsum(utility_value(u, x) for u, x in zip(self.utilities, rates))


@dataclass
class RateSolution:
    rates: np.ndarray
    prices: np.ndarray
    iterations: int
    residual: float

    def to_dict(self):
        return {
            "rates": [float(x) for x in self.rates],
            "prices": [float(p) for p in self.prices],
            "iterations": int(self.iterations),
            "residual": float(self.residual),
        }


def _rates(utilities, q, cap):
    x = np.empty(len(utilities))
    for s, u in enumerate(utilities):
        x[s] = min(inverse_marginal(u, q[s]), cap) if q[s] > 0 else cap
    return x


def default_step(problem):
    return 0.01 * min(problem.capacities) / max(u.weight for u in problem.utilities)


def _dual(utilities, x, q, p, c):
    """Lagrangian at the price-optimal rates, i.e. the dual function D(p)."""
    return math.fsum(utility_value(u, xi) for u, xi in zip(utilities, x)) - float(q @ x) + float(p @ c)


def solve_num(problem, step=None, tol=1e-6, max_iter=200_000, initial_prices=None):
    """Maximize the sum of source utilities subject to link capacities.

    Projected gradient descent on the link prices. ``step`` is the initial
    step size; it is halved whenever a step fails the sufficient-decrease test
    on the dual, which keeps steep demand curves from oscillating.

    Stops once the largest rate change, the worst capacity overshoot and the
    worst relative complementary-slackness gap are all below ``tol`` and no
    rate sits at the transient cap.
    """
    R = problem.incidence
    c = np.asarray(problem.capacities)
    utilities = [u.normalized() for u in problem.utilities]
    gamma = default_step(problem) if step is None else step
    if not gamma > 0:
        raise ValueError("step size must be > 0")
    # Strictly above every single-link capacity, so a capped source always
    # oversubscribes its links and the cap cannot hold at a fixed point.
    cap = 2.0 * c.sum()
    p = np.full(len(c), INITIAL_PRICE) if initial_prices is None else np.array(initial_prices, float)
    q = R @ p
    x = _rates(utilities, q, cap)
    dual = _dual(utilities, x, q, p, c)
    residual = math.inf
    for it in range(1, max_iter + 1):
        grad = c - R.T @ x
        while True:
            p_new = np.maximum(0.0, p - gamma * grad)
            d = p_new - p
            q_new = R @ p_new
            x_new = _rates(utilities, q_new, cap)
            dual_new = _dual(utilities, x_new, q_new, p_new, c)
            bound = dual + float(grad @ d) + float(d @ d) / (2 * gamma)
            if dual_new <= bound + 1e-12 * (1.0 + abs(dual)) or gamma < 1e-300:
                break
            gamma *= 0.5
        change = float(np.max(np.abs(x_new - x)))
        p, x, dual = p_new, x_new, dual_new
        gamma *= STEP_GROWTH
        load = R.T @ x
        overshoot = float(np.max(np.maximum(0.0, load - c) / c))
        slack = float(np.max(np.abs(p * (c - load)) / c))
        residual = max(overshoot, slack)
        if change < tol and residual < tol and not np.any(x >= cap):
            return RateSolution(rates=x, prices=p, iterations=it, residual=residual)
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations (residual {residual:.3g})", residual, max_iter
    )


@dataclass
class KKTReport:
    passed: bool
    violations: list = field(default_factory=list)

    def to_dict(self):
        return {"passed": self.passed, "violations": list(self.violations)}


def verify_kkt(problem, solution, tol=1e-6):
    """Check primal and dual feasibility, stationarity and complementary slackness."""
    rates = np.asarray(solution.rates, float)
    prices = np.asarray(solution.prices, float)
    if rates.shape != (len(problem.routes),) or prices.shape != (len(problem.capacities),):
        raise ValueError("solution dimensions do not match the problem")
    R = problem.incidence
    c = np.asarray(problem.capacities)
    load = R.T @ rates
    out = []
    for s, x in enumerate(rates):
        if not x > 0:
            out.append(f"source {s}: rate {x} is not positive")
    for l in range(len(c)):
        if load[l] > c[l] * (1 + tol):
            out.append(f"link {l}: load {load[l]:.6g} exceeds capacity {c[l]:.6g}")
        if prices[l] < 0:
            out.append(f"link {l}: negative price {prices[l]:.6g}")
        if abs(prices[l] * (c[l] - load[l])) > tol * c[l]:
            out.append(f"link {l}: complementary slackness gap {prices[l] * (c[l] - load[l]):.6g}")
    q = R @ prices
    for s, (u, x) in enumerate(zip(problem.utilities, rates)):
        if x > 0 and abs(marginal_utility(u, x) - q[s]) > tol * q[s]:
            out.append(
                f"source {s}: marginal utility {marginal_utility(u, x):.6g} != path price {q[s]:.6g}"
            )
    return KKTReport(passed=not out, violations=out)


def problem_from_dict(doc):
    """``{"routes": [[link, ...], ...], "capacities": [...], "utilities": [{...}, ...]}``"""
    utilities = [UtilitySpec(**u) for u in doc["utilities"]]
    return RateProblem(routes=[list(r) for r in doc["routes"]], capacities=list(doc["capacities"]),
                       utilities=utilities)


def problem_to_dict(problem):
    return {
        "routes": [list(r) for r in problem.routes],
        "capacities": list(problem.capacities),
        "utilities": [{"family": u.family, "weight": u.weight, "alpha": u.alpha} for u in problem.utilities],
    }
