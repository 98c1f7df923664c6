import json
import os
import time

import numpy as np
import pytest

from netgov.netmodel import build_topology
from netgov.stability import SweepScenario, phase_sweep

RING16_LAMBDAS = [round(0.05 + 0.025 * k, 3) for k in range(19)]  # 0.05 .. 0.5
RING16_SEEDS = [0, 1, 2, 3, 4]

_VERDICTS = []


def ring16_bound_oracle():
    """mu / <d> for a 16-ring with mu = 1, from the closed-form distance sum."""
    n = 16
    total = sum(min(k, n - k) for k in range(1, n))  # distances from one node
    return 1.0 / (total / (n - 1))


def grid_oracle(problem, points=50):
    """Best objective over a feasible grid of ``points`` rates per source.

    Utilities are evaluated from their textbook closed forms here, not through
    the library, so the oracle stays independent of the solver's code.
    """
    caps = np.asarray(problem.capacities, float)
    axes = [np.linspace(caps[r].min() / points, caps[r].min(), points) for r in problem.routes]
    x = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
    feasible = np.all(x @ problem.incidence <= caps + 1e-12, axis=1)
    x = x[feasible]
    total = np.zeros(len(x))
    for s, u in enumerate(problem.utilities):
        a = 1.0 if u.family == "log" else u.alpha
        if a == 1.0:
            total += u.weight * np.log(x[:, s])
        else:
            total += u.weight * x[:, s] ** (1 - a) / (1 - a)
    return float(total.max())


@pytest.fixture(scope="session")
def ring16():
    return build_topology("ring", nodes=16)


@pytest.fixture(scope="session")
def ring16_sweep_timed():
    """The full acceptance sweep and its wall time, shared by every test that needs it."""
    scenario = SweepScenario(topology={"kind": "ring", "nodes": 16}, ticks=5000)
    t0 = time.perf_counter()
    sweep = phase_sweep(scenario, RING16_LAMBDAS, RING16_SEEDS, jobs=os.cpu_count() or 1)
    return sweep, time.perf_counter() - t0


@pytest.fixture(scope="session")
def ring16_sweep(ring16_sweep_timed):
    return ring16_sweep_timed[0]


@pytest.fixture
def write_json(tmp_path):
    def _write(name, doc):
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return path

    return _write


class Verdict:
    def __init__(self, number, title):
        self.number, self.title, self.line = number, title, None

    def __call__(self, ok, detail):
        self.line = f"[{'PASS' if ok else 'FAIL'}] criterion {self.number}: {self.title} -- {detail}"
        print(self.line)
        _VERDICTS.append(self.line)
        assert ok, self.line


@pytest.fixture
def criterion(request):
    """``criterion(ok, detail)`` records one verdict line for an acceptance criterion."""
    marker = request.node.get_closest_marker("criterion")
    verdict = Verdict(*marker.args)
    yield verdict
    if verdict.line is None:
        line = f"[FAIL] criterion {verdict.number}: {verdict.title} -- raised before a verdict"
        print(line)
        _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
