"""Experiments that exhibit congestion phase transitions and coupled-controller
oscillation, and measure how much global governance damps them."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .controllers import ControllerSpec, cost_model, grid, predict, throughput_model
from .governance import (
    GlobalUtilitySpec,
    GovernanceTrace,
    JointSpace,
    TraceEntry,
    model_evaluator,
    search,
)
from .netmodel import NetworkState, RoutingPolicy, TrafficSpec, build_topology, order_parameter, run


class NoTransitionDetected(ValueError):
    pass


@dataclass
class SweepPoint:
    value: float
    mean: float
    std: float
    seeds: int
    per_seed: dict = field(default_factory=dict)  # seed -> rho


@dataclass
class SweepResult:
    parameter: str
    points: list

    def __post_init__(self):
        values = [p.value for p in self.points]
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError("sweep parameter values must be strictly increasing")

    @property
    def values(self):
        return [p.value for p in self.points]

    @property
    def means(self):
        return [p.mean for p in self.points]


@dataclass(frozen=True)
class SweepScenario:
    """Everything a phase sweep needs except lambda and the seed."""

    topology: dict  # keyword arguments for build_topology
    service_rate: int = 1
    routing: str = "static-shortest-path"
    queue_weight: float = 1.0
    ticks: int = 5000
    warmup: int | None = None  # default: first half of the run

    def measure_start(self):
        return self.ticks // 2 if self.warmup is None else self.warmup


def sweep_point(scenario, lam, seed):
    """Order parameter of one (lambda, seed) run. 0 when nothing is created."""
    topo = build_topology(**scenario.topology)
    state = NetworkState(topo, scenario.service_rate, seed=seed)
    trace = run(state, TrafficSpec(lam), RoutingPolicy(scenario.routing, scenario.queue_weight), scenario.ticks)
    try:
        return order_parameter(trace, scenario.measure_start(), scenario.ticks)
    except ValueError:
        if lam == 0:
            return 0.0
        raise


def _job(args):
    scenario, lam, seed = args
    return lam, seed, sweep_point(scenario, lam, seed)


def phase_sweep(scenario, lambdas, seeds, jobs=1):
    """Mean order parameter per lambda, averaged over ``seeds``. Runs are
    independent; results are keyed by (lambda, seed) so ``jobs`` never changes them."""
    lambdas = sorted(float(x) for x in lambdas)
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("a sweep needs at least 2 seeds")
    if any(not 0.0 <= x <= 1.0 for x in lambdas):
        raise ValueError("lambda values must lie in [0, 1]")
    work = [(scenario, lam, s) for lam in lambdas for s in seeds]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, work, chunksize=1))
    else:
        results = [_job(w) for w in work]
    by_key = {(lam, s): rho for lam, s, rho in results}
    points = []
    for lam in lambdas:
        rhos = np.array([by_key[(lam, s)] for s in seeds])
        points.append(SweepPoint(lam, float(rhos.mean()), float(rhos.std()), len(seeds),
                                 {s: by_key[(lam, s)] for s in seeds}))
    return SweepResult("lambda", points)


def hysteresis_sweep(scenario, lambdas, seed):
    """Up-sweep then down-sweep of lambda on one network whose state carries over
    between points. Exploratory: returns ``(up, down)`` lists of (lambda, rho)."""
    topo = build_topology(**scenario.topology)
    state = NetworkState(topo, scenario.service_rate, seed=seed)
    routing = RoutingPolicy(scenario.routing, scenario.queue_weight)
    lambdas = sorted(lambdas)
    out = {}
    for name, order in (("up", lambdas), ("down", lambdas[::-1])):
        series = []
        for lam in order:
            trace = run(state, TrafficSpec(lam), routing, scenario.ticks)
            try:
                rho = order_parameter(trace, scenario.measure_start(), scenario.ticks)
            except ValueError:
                rho = 0.0
            series.append((lam, rho))
        out[name] = series
    return out["up"], out["down"]


def detect_transition(sweep, rho_star=0.05):
    """Linear interpolation of the first upward crossing of ``rho_star``."""
    vals, rhos = sweep.values, sweep.means
    for k in range(1, len(vals)):
        if rhos[k - 1] < rho_star <= rhos[k]:
            frac = (rho_star - rhos[k - 1]) / (rhos[k] - rhos[k - 1])
            return vals[k - 1] + frac * (vals[k] - vals[k - 1])
    raise NoTransitionDetected(f"order parameter never crosses {rho_star} from below")


@dataclass
class OscillationReport:
    name: str
    window: tuple
    amplitude: float
    std: float
    period: int | None = None

    def to_dict(self):
        return {"series": self.name, "window": list(self.window), "amplitude": self.amplitude,
                "std": self.std, "period": self.period}


def dominant_period(x):
    """Lag of the highest local maximum of the autocorrelation, or None."""
    x = np.asarray(x, float) - np.mean(x)
    denom = float(np.dot(x, x))
    if denom == 0:
        return None
    n = len(x)
    ac = np.array([np.dot(x[: n - k], x[k:]) / denom for k in range(n // 2 + 1)])
    best = None
    for k in range(1, len(ac) - 1):
        if ac[k] >= ac[k - 1] and ac[k] >= ac[k + 1] and ac[k] > 0:
            if best is None or ac[k] > ac[best] + 1e-12:
                best = k
    return best


def oscillation_metrics(series, start=0, stop=None, name="series"):
    stop = len(series) if stop is None else stop
    if stop - start < 10:
        raise ValueError("oscillation window must span at least 10 samples")
    w = np.asarray(series[start:stop], float)
    amplitude = float(w.max() - w.min())
    period = dominant_period(w) if amplitude > 0 else None
    return OscillationReport(name, (start, stop), amplitude, float(w.std()), period)


@dataclass(frozen=True)
class CoupledScenario:
    """Two reactive scalers sharing one integer resource pool ``n``.

    Scaler A sizes the pool for a target utilization of the observed load;
    scaler B sheds units whenever the observed cost exceeds its cap. Both see
    ``n`` from ``delay`` ticks ago and apply their full correction every tick.
    """

    n_min: int = 0
    n_max: int = 50
    n_initial: int = 5
    load: float = 10.0
    unit_capacity: float = 1.0
    target_utilization: float = 0.5
    gain_a: float = 1.0
    gain_b: float = 1.0
    delay_a: int = 1
    delay_b: int = 1
    t_max: float = 100.0
    beta: float = 0.15
    c_fixed: float = 0.0
    c_unit: float = 2.0
    cost_cap: float | None = None  # default: 1.1 * C(n*)
    period: int = 100
    threshold: float | None = None
    scalers_enabled: bool = True

    def controllers(self):
        space = grid(n=list(range(self.n_min, self.n_max + 1)))
        return [
            ControllerSpec("cost", "cost", space, cost_model(self.c_fixed, self.c_unit), follows="throughput"),
            ControllerSpec("throughput", "throughput", space, throughput_model(self.t_max, self.beta)),
        ]

    def utility(self, n):
        cfg = {"n": n}
        return (predict(throughput_model(self.t_max, self.beta), cfg)
                - predict(cost_model(self.c_fixed, self.c_unit), cfg))

    def optimum(self):
        return max(range(self.n_min, self.n_max + 1), key=lambda n: (self.utility(n), -n))

    def cap(self):
        if self.cost_cap is not None:
            return self.cost_cap
        return 1.1 * (self.c_fixed + self.c_unit * self.optimum())


@dataclass
class CoupledResult:
    n: list
    utility: list
    report: OscillationReport
    trace: GovernanceTrace | None = None


def _clip(x, lo, hi):
    return max(lo, min(hi, x))


def run_coupled(scenario, horizon, governed=False, window=500):
    """Iterate the two-scaler pool for ``horizon`` ticks.

    Ungoverned, each scaler applies its full correction from delayed
    observations. Governed, the network controller picks the set point n* by
    exhaustive search over T(n) - C(n) at each trigger and reconfigures both
    scalers to track it; the combined move is limited to one unit per tick and
    is computed from the commanded pool size, which the controller knows exactly.
    """
    s = scenario
    cap = s.cap()
    required = math.ceil(s.load / (s.target_utilization * s.unit_capacity))
    hist = [s.n_initial] * (max(s.delay_a, s.delay_b) + 1)
    n_series, utility = [], []
    trace = GovernanceTrace() if governed else None
    controllers = s.controllers()
    space = JointSpace(controllers)
    gspec = GlobalUtilitySpec("weighted-sum", threshold=-math.inf if s.threshold is None else s.threshold)
    half = max(1, s.period // 2)
    set_point = None
    last_trigger = None
    for t in range(horizon):
        n = hist[-1]
        n_series.append(n)
        utility.append(s.utility(n))
        if governed:
            recent = utility[-half:]
            breach = (s.threshold is not None and last_trigger is not None
                      and t - last_trigger >= half and sum(recent) / len(recent) < s.threshold)
            if t % s.period == 0 or breach:
                incumbent = None if set_point is None else space.vector((set_point - s.n_min,))
                res = search(controllers, model_evaluator(controllers, gspec, tick=t), gspec, "exhaustive",
                             incumbent=incumbent)
                set_point = res.best.vector.configs(controllers)["throughput"]["n"]
                trace.entries.append(TraceEntry(
                    tick=t, reason="periodic" if t % s.period == 0 else "threshold-breach",
                    examined=res.examined, config={"n": set_point}, global_utility=res.best.global_utility,
                    incumbent_utility=res.incumbent.global_utility,
                    threshold_unmet=res.best.global_utility < gspec.threshold,
                ))
                last_trigger = t
            if s.scalers_enabled:
                step_a = _clip(set_point - n, -1, 1)
                step_b = _clip(set_point - n, -1, 1)
                n = _clip(n + _clip(step_a + step_b, -1, 1), s.n_min, s.n_max)
        elif s.scalers_enabled:
            obs_a = hist[-1 - s.delay_a]
            obs_b = hist[-1 - s.delay_b]
            d_a = round(s.gain_a * (required - obs_a))
            cost = s.c_fixed + s.c_unit * obs_b
            d_b = -math.ceil(s.gain_b * (cost - cap) / s.c_unit) if cost > cap else 0
            n = _clip(n + d_a + d_b, s.n_min, s.n_max)
        hist = hist[1:] + [n]
    start = max(0, horizon - window)
    return CoupledResult(n_series, utility, oscillation_metrics(n_series, start, horizon, "n"), trace)
