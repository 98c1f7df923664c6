"""The network controller: aggregate controller utilities into a global
utility, search the joint configuration space, and reconfigure the controllers
periodically or when the global utility breaches its floor.
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .controllers import (
    Metrics,
    apply_configuration,
    canonical,
    evaluate_utility,
    monitor,
)
from .netmodel import SimulationTrace, run

log = logging.getLogger(__name__)

AGGREGATORS = ("weighted-sum", "min", "product-of-shifted")
STRATEGIES = ("auto", "exhaustive", "coordinate-descent", "hill-climb")
EXHAUSTIVE_BUDGET = 10**6
AUTO_EXHAUSTIVE_LIMIT = 10_000


class BudgetError(RuntimeError):
    pass


class AggregationDomainError(ValueError):
    pass


@dataclass(frozen=True)
class GlobalUtilitySpec:
    aggregator: str = "weighted-sum"
    weights: dict = field(default_factory=dict)  # missing ids weigh 1
    shifts: dict = field(default_factory=dict)  # missing ids shift 0
    threshold: float = -math.inf

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be >= 0")

    def weight(self, cid):
        return self.weights.get(cid, 1.0)


def aggregate(values, spec):
    """Global utility from ``{controller_id: u_i}``; independent of key order."""
    if not values:
        raise ValueError("no utility values to aggregate")
    ids = sorted(values)
    if spec.aggregator == "weighted-sum":
        if not any(spec.weight(i) > 0 for i in ids):
            raise ValueError("weighted-sum needs at least one strictly positive weight")
        return math.fsum(spec.weight(i) * values[i] for i in ids)
    if spec.aggregator == "min":
        return min(values[i] for i in ids)
    terms = []
    for i in ids:
        t = values[i] + spec.shifts.get(i, 0.0)
        if not t > 0:
            raise AggregationDomainError(f"shifted utility of {i!r} is {t}, must be > 0")
        terms.append(t)
    return math.prod(sorted(terms))


@dataclass(frozen=True)
class ConfigurationVector:
    ids: tuple  # controller ids, sorted
    indices: tuple  # config-space index per controller

    def configs(self, controllers):
        by_id = {c.id: c for c in controllers}
        return {i: by_id[i].configs[k] for i, k in zip(self.ids, self.indices)}

    def to_json(self, controllers):
        return canonical(self.configs(controllers))


@dataclass
class GovernanceEvaluation:
    vector: ConfigurationVector
    utilities: list  # UtilityValue per controller, in id order
    global_utility: float
    tick: int | None = None

    @property
    def key(self):
        return self.vector.indices

    def value_of(self, cid):
        for u in self.utilities:
            if u.controller_id == cid:
                return u.value
        raise KeyError(cid)


class JointSpace:
    """Canonical joint configuration space; followers mirror their leader's index."""

    def __init__(self, controllers):
        self.controllers = sorted(controllers, key=lambda c: c.id)
        ids = [c.id for c in self.controllers]
        if len(set(ids)) != len(ids):
            raise ValueError("controller ids must be unique")
        self.ids = tuple(ids)
        self.leaders = [c for c in self.controllers if c.follows is None]
        by_id = {c.id: c for c in self.controllers}
        for c in self.controllers:
            if c.follows is not None:
                leader = by_id.get(c.follows)
                if leader is None or leader.follows is not None:
                    raise ValueError(f"{c.id!r} follows {c.follows!r}, which is not a leading controller")
                if [canonical(x) for x in leader.configs] != [canonical(x) for x in c.configs]:
                    raise ValueError(f"{c.id!r} must share its leader's configuration space")
        if not self.leaders:
            raise ValueError("joint space has no free dimension")
        self.sizes = tuple(len(c.configs) for c in self.leaders)
        self._pos = {c.id: k for k, c in enumerate(self.leaders)}

    @property
    def size(self):
        return math.prod(self.sizes)

    def vector(self, leader_indices):
        full = []
        for c in self.controllers:
            full.append(leader_indices[self._pos[c.follows or c.id]])
        return ConfigurationVector(self.ids, tuple(full))

    def leader_indices(self, vector):
        return tuple(vector.indices[self.ids.index(c.id)] for c in self.leaders)

    def __iter__(self):
        for idx in itertools.product(*(range(s) for s in self.sizes)):
            yield self.vector(idx)


def model_evaluator(controllers, spec, metrics=None, tick=None):
    """Evaluator that scores vectors against fixed ``metrics`` (no simulation)."""
    metrics = metrics or Metrics(window=(0, 0))
    ordered = sorted(controllers, key=lambda c: c.id)

    def evaluate(vector):
        configs = vector.configs(ordered)
        us = [evaluate_utility(c, metrics, configs[c.id]) for c in ordered]
        return GovernanceEvaluation(vector, us, aggregate({u.controller_id: u.value for u in us}, spec), tick)

    return evaluate


def _better(a, b):
    """True if evaluation ``a`` beats ``b``: higher utility, ties to canonical order."""
    if b is None:
        return True
    if a.global_utility != b.global_utility:
        return a.global_utility > b.global_utility
    return a.key < b.key


@dataclass
class SearchResult:
    best: GovernanceEvaluation
    incumbent: GovernanceEvaluation
    examined: int


def search(controllers, evaluator, spec=None, strategy="auto", incumbent=None, restarts=4, seed=0,
           budget=EXHAUSTIVE_BUDGET):
    """Search the joint configuration space for the highest global utility.

    ``incumbent`` is the current ConfigurationVector (canonical first if None);
    every strategy returns something at least as good as it. ``spec`` is
    accepted for symmetry with the evaluator's construction and unused here.
    """
    space = JointSpace(controllers)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "auto":
        strategy = "exhaustive" if space.size <= AUTO_EXHAUSTIVE_LIMIT else "coordinate-descent"
    cache = {}

    def ev(vector):
        if vector.indices not in cache:
            cache[vector.indices] = evaluator(vector)
        return cache[vector.indices]

    start = incumbent or space.vector(tuple(0 for _ in space.sizes))
    inc_eval = ev(start)

    if strategy == "exhaustive":
        if space.size > budget:
            raise BudgetError(
                f"joint space has {space.size} points, over the exhaustive budget of {budget}; "
                "use coordinate-descent or hill-climb"
            )
        best = None
        for vector in space:
            e = ev(vector)
            if _better(e, best):
                best = e
    elif strategy == "coordinate-descent":
        best = inc_eval
        current = list(space.leader_indices(start))
        while True:
            improved = False
            for dim in range(len(space.sizes)):
                for k in range(space.sizes[dim]):
                    trial = current.copy()
                    trial[dim] = k
                    e = ev(space.vector(tuple(trial)))
                    if e.global_utility > best.global_utility:
                        best, current, improved = e, trial, True
            if not improved:
                break
    else:
        rng = np.random.default_rng(seed)
        best = inc_eval
        starts = [space.leader_indices(start)]
        for _ in range(restarts):
            starts.append(tuple(int(rng.integers(s)) for s in space.sizes))
        for s0 in starts:
            here = ev(space.vector(s0))
            pos = list(s0)
            while True:
                step_best = None
                for dim in range(len(space.sizes)):
                    for delta in (-1, 1):
                        k = pos[dim] + delta
                        if 0 <= k < space.sizes[dim]:
                            trial = pos.copy()
                            trial[dim] = k
                            e = ev(space.vector(tuple(trial)))
                            if e.global_utility > here.global_utility and _better(e, step_best):
                                step_best, step_pos = e, trial
                if step_best is None:
                    break
                here, pos = step_best, step_pos
            if here.global_utility > best.global_utility:
                best = here
    return SearchResult(best=best, incumbent=inc_eval, examined=len(cache))


def dominates(a, b):
    return all(x >= y for x, y in zip(a, b)) and any(x > y for x, y in zip(a, b))


def pareto_front(evaluations, objectives):
    """Evaluations not dominated in the selected controllers' utilities.

    Points equal in objective space collapse to the canonically-first
    configuration. Result is in canonical order.
    """
    if not objectives:
        raise ValueError("select at least one objective")
    unique = {}
    for e in sorted(evaluations, key=lambda e: e.key):
        point = tuple(e.value_of(cid) for cid in objectives)
        unique.setdefault(point, e)
    # a point can only be dominated by one lexicographically greater than itself
    front = []
    for point in sorted(unique, reverse=True):
        if not any(dominates(f, point) for f in front):
            front.append(point)
    return sorted((unique[p] for p in front), key=lambda e: e.key)


@dataclass(frozen=True)
class TriggerPolicy:
    period: int
    lookahead: int = 200
    strategy: str = "auto"
    restarts: int = 4
    reset_on_reconfigure: bool = False

    def __post_init__(self):
        if self.period < 1 or self.lookahead < 1:
            raise ValueError("period and lookahead must be >= 1")

    @property
    def window(self):
        return max(1, self.period // 2)


@dataclass
class TraceEntry:
    tick: int
    reason: str  # periodic | threshold-breach | manual
    examined: int
    config: dict
    global_utility: float
    incumbent_utility: float
    threshold_unmet: bool = False


@dataclass
class GovernanceTrace:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)


class Simulator:
    """Handle on a running network: base traffic and routing, scheduled load
    changes, and the configuration currently actuated by controllers."""

    def __init__(self, state, traffic, routing, load_schedule=()):
        self.state = state
        self.base_traffic = traffic
        self.base_routing = routing
        self.load_schedule = sorted(load_schedule)
        self.trace = SimulationTrace.starting_from(state)
        self.traffic = traffic
        self.routing = routing

    def _base_at(self, tick):
        traffic = self.base_traffic
        for t, lam in self.load_schedule:
            if t <= tick:
                traffic = replace(traffic, lam=lam)
        return traffic

    def configure(self, controllers, configs):
        self.traffic, self.routing = apply_configuration(
            controllers, configs, self._base_at(self.state.tick), self.base_routing
        )

    def advance(self, controllers, configs):
        if any(t == self.state.tick for t, _ in self.load_schedule):
            self.configure(controllers, configs)
        run(self.state, self.traffic, self.routing, 1, self.trace)

    def lookahead(self, controllers, configs, ticks, seed):
        clone = self.state.clone(seed=seed)
        traffic, routing = apply_configuration(controllers, configs, self._base_at(clone.tick),
                                               self.base_routing)
        trace = run(clone, traffic, routing, ticks)
        return monitor(trace, 0, len(trace))


@dataclass
class GovernanceResult:
    trace: GovernanceTrace
    utility_series: list  # (tick, windowed U_g)
    final_config: dict
    simulator: Simulator


def _lookahead_seed(seed, tick):
    return int(np.random.SeedSequence([int(seed), int(tick)]).generate_state(1)[0])


def govern_loop(sim, controllers, spec, trigger, horizon, seed=0):
    """Run the simulation for ``horizon`` ticks under the network controller.

    Triggers fire every ``trigger.period`` ticks, and whenever the global
    utility measured over the last ``trigger.window`` ticks drops below
    ``spec.threshold`` (at most once per window). Each trigger scores
    candidates by a ``trigger.lookahead``-tick simulated look-ahead from a clone
    of the current state, seeded from the trigger tick.
    """
    ordered = sorted(controllers, key=lambda c: c.id)
    if not any(c.actuates for c in ordered):
        warnings.warn("no controller actuates the network; governance only re-scores models", stacklevel=2)
    space = JointSpace(ordered)
    window = trigger.window
    warm = {}

    def score(configs, metrics):
        us = [evaluate_utility(c, metrics, configs[c.id], warm.get(c.id)) for c in ordered]
        return us, aggregate({u.controller_id: u.value for u in us}, spec)

    current = space.vector(tuple(0 for _ in space.sizes))
    configs = current.configs(ordered)
    sim.configure(ordered, configs)
    gtrace = GovernanceTrace()
    series = []
    last_trigger = None

    for _ in range(horizon):
        t = sim.state.tick
        reason = None
        if t % trigger.period == 0:
            reason = "periodic"
        elif (spec.threshold > -math.inf and len(sim.trace) >= window
              and (last_trigger is None or t - last_trigger >= window) and series and series[-1][1] < spec.threshold):
            reason = "threshold-breach"
        if reason:
            look_seed = _lookahead_seed(seed, t)

            def evaluator(vector, _tick=t, _seed=look_seed):
                cfg = vector.configs(ordered)
                if any(c.actuates for c in ordered):
                    metrics = sim.lookahead(ordered, cfg, trigger.lookahead, _seed)
                elif len(sim.trace):
                    metrics = monitor(sim.trace, max(0, len(sim.trace) - window), len(sim.trace))
                else:
                    metrics = Metrics(window=(0, 0))
                us, ug = score(cfg, metrics)
                return GovernanceEvaluation(vector, us, ug, _tick)

            result = search(ordered, evaluator, spec, trigger.strategy, incumbent=current,
                            restarts=trigger.restarts, seed=look_seed)
            best = result.best
            gtrace.entries.append(TraceEntry(
                tick=t, reason=reason, examined=result.examined, config=best.vector.configs(ordered),
                global_utility=best.global_utility, incumbent_utility=result.incumbent.global_utility,
                threshold_unmet=best.global_utility < spec.threshold,
            ))
            if best.vector != current:
                log.info("tick %d: reconfigure %s -> %s (U_g %.6g -> %.6g)", t, current.indices,
                         best.vector.indices, result.incumbent.global_utility, best.global_utility)
                current = best.vector
                configs = current.configs(ordered)
                sim.configure(ordered, configs)
                if trigger.reset_on_reconfigure:
                    warm.clear()
            for u in best.utilities:
                if "prices" in u.detail and not trigger.reset_on_reconfigure:
                    warm[u.controller_id] = u.detail["prices"]
            last_trigger = t
        sim.advance(ordered, configs)
        n = len(sim.trace)
        metrics = monitor(sim.trace, max(0, n - window), n)
        series.append((t, score(configs, metrics)[1]))
    return GovernanceResult(trace=gtrace, utility_series=series, final_config=configs, simulator=sim)


def entry_row(entry):
    return (entry.tick, entry.reason + ("/threshold-unmet" if entry.threshold_unmet else ""),
            entry.examined, entry.global_utility, canonical(entry.config))


def trace_to_json(trace):
    return [
        {"tick": e.tick, "reason": e.reason, "examined": e.examined, "U_g": e.global_utility,
         "incumbent_U_g": e.incumbent_utility, "threshold_unmet": e.threshold_unmet, "config": e.config}
        for e in trace.entries
    ]


def spec_from_dict(doc):
    doc = dict(doc or {})
    threshold = doc.pop("threshold", None)
    return GlobalUtilitySpec(threshold=-math.inf if threshold is None else float(threshold), **doc)

