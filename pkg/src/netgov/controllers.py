"""Functional controllers: a monitor, a performance model and a utility evaluator
over a finite configuration space.

Admission and routing controllers actuate the simulated network; throughput and
cost controllers are evaluative and only read their performance model;
congestion controllers score an embedded rate-allocation problem.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

from . import num
from .netmodel import ROUTING_KINDS, RoutingPolicy

CONTROLLER_KINDS = ("throughput", "cost", "congestion", "admission", "routing")
ACTUATING_KINDS = ("admission", "routing")

DEFAULT_T_MAX = 100.0
DEFAULT_BETA = 0.15
DEFAULT_C_FIXED = 0.0
DEFAULT_C_UNIT = 2.0
DEFAULT_ADMISSION_PENALTY = 0.01


class UnknownConfiguration(KeyError):
    pass


def canonical(config):
    """Stable string key for a configuration record."""
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Metrics:
    window: tuple  # (start, stop) record indices
    delivered_rate: float = 0.0
    mean_delay: float = 0.0
    mean_queue_total: float = 0.0
    offered_load: float = 0.0
    utilization: float = 0.0


def monitor(trace, start, stop):
    """Average a trace's records over ``[start, stop)``.

    With no deliveries in the window, mean delay is the window length if
    packets are waiting and 0 otherwise.
    """
    if not 0 <= start < stop <= len(trace):
        raise ValueError(f"monitoring window [{start}, {stop}) empty or outside trace of length {len(trace)}")
    span = stop - start
    delivered = trace.delivered[stop - 1] - trace.before("delivered", start)
    created = trace.created[stop - 1] - trace.before("created", start)
    delay = trace.delay_sum[stop - 1] - trace.before("delay_sum", start)
    queue = (trace.queue_cum[stop - 1] - trace.before("queue_cum", start)) / span
    if delivered:
        mean_delay = delay / delivered
    else:
        mean_delay = float(span) if queue > 0 else 0.0
    rate = delivered / span
    capacity = trace.nodes * trace.service_rate
    return Metrics(
        window=(start, stop),
        delivered_rate=rate,
        mean_delay=mean_delay,
        mean_queue_total=queue,
        offered_load=created / span,
        utilization=rate / capacity if capacity else 0.0,
    )


@dataclass(frozen=True)
class PerformanceModel:
    kind: str = "analytic"  # analytic | empirical
    form: str = "throughput"  # analytic: throughput | cost
    params: dict = field(default_factory=dict)
    table: dict = field(default_factory=dict)  # empirical: canonical config -> metric
    metric: str = "throughput"

    def __hash__(self):
        return hash((self.kind, self.form, canonical(self.params), canonical(self.table), self.metric))

    def to_dict(self):
        return {"kind": self.kind, "form": self.form, "params": dict(self.params),
                "table": dict(self.table), "metric": self.metric}

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


def throughput_model(t_max=DEFAULT_T_MAX, beta=DEFAULT_BETA):
    return PerformanceModel("analytic", "throughput", {"t_max": t_max, "beta": beta}, metric="throughput")


def cost_model(c_fixed=DEFAULT_C_FIXED, c_unit=DEFAULT_C_UNIT):
    return PerformanceModel("analytic", "cost", {"c_fixed": c_fixed, "c_unit": c_unit}, metric="cost")


def predict(model, config, load=None):
    """Evaluate the model at ``config``; analytic forms read ``config["n"]``."""
    if model.kind == "empirical":
        key = canonical(config)
        if key not in model.table:
            raise UnknownConfiguration(f"configuration {key} not in calibration table")
        return model.table[key]
    n = config["n"]
    if model.form == "throughput":
        return model.params["t_max"] * (1.0 - math.exp(-model.params["beta"] * n))
    if model.form == "cost":
        return model.params["c_fixed"] + model.params["c_unit"] * n
    raise ValueError(f"unknown analytic form {model.form!r}")


@dataclass(frozen=True)
class UtilityValue:
    controller_id: str
    value: float
    config: dict = field(hash=False, compare=False)
    detail: dict = field(default_factory=dict, hash=False, compare=False)


@dataclass
class ControllerSpec:
    id: str
    kind: str
    configs: list  # ordered configuration records (dicts)
    model: PerformanceModel | None = None
    params: dict = field(default_factory=dict)
    follows: str | None = None  # share the configuration chosen for another controller

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if not self.configs:
            raise ValueError(f"controller {self.id!r} has an empty configuration space")
        keys = [canonical(c) for c in self.configs]
        if len(set(keys)) != len(keys):
            raise ValueError(f"controller {self.id!r} has duplicate configurations")
        self._index = {k: i for i, k in enumerate(keys)}
        if self.kind in ("throughput", "cost") and self.model is None:
            self.model = throughput_model() if self.kind == "throughput" else cost_model()
        if self.kind == "routing":
            for c in self.configs:
                if c.get("policy") not in ROUTING_KINDS:
                    raise ValueError(f"routing config {c} names no known policy")
        if self.kind == "congestion" and "problem" not in self.params:
            raise ValueError(f"congestion controller {self.id!r} needs a rate problem")

    @property
    def actuates(self):
        return self.kind in ACTUATING_KINDS

    def index_of(self, config):
        try:
            return self._index[canonical(config)]
        except KeyError:
            raise UnknownConfiguration(f"{canonical(config)} is not in the space of {self.id!r}") from None


def grid(**axes):
    """Cartesian product of named parameter values, in sorted-name order."""
    names = sorted(axes)
    return [dict(zip(names, values)) for values in itertools.product(*(axes[k] for k in names))]


def config_space(spec):
    return list(spec.configs)


def joint_space_size(controllers):
    return math.prod(len(c.configs) for c in controllers if c.follows is None)


def with_alpha(problem, alpha):
    """``problem`` with every source switched to ``alpha``-fair utility."""
    family = "log" if alpha == 1 else "alpha-fair"
    return replace(problem, utilities=[num.UtilitySpec(family, u.weight, alpha) for u in problem.utilities])


@lru_cache(maxsize=4096)
def _congestion_solve(problem_key, alpha, step, initial):
    problem = with_alpha(num.problem_from_dict(json.loads(problem_key)), alpha)
    sol = num.solve_num(problem, step=step, initial_prices=list(initial) if initial else None)
    return problem.objective(sol.rates), tuple(sol.prices.tolist()), tuple(sol.rates.tolist())


def evaluate_utility(spec, metrics, config, warm_start=None):
    """Utility of ``config`` for one controller given the measured ``metrics``."""
    spec.index_of(config)
    kind = spec.kind
    detail = {}
    if kind == "throughput":
        value = predict(spec.model, config, metrics.offered_load if metrics else None)
    elif kind == "cost":
        value = -predict(spec.model, config, metrics.offered_load if metrics else None)
    elif kind == "congestion":
        key = canonical(num.problem_to_dict(spec.params["problem"]))
        value, prices, rates = _congestion_solve(
            key, float(config["alpha"]), config.get("step"), tuple(warm_start) if warm_start else None
        )
        detail = {"prices": list(prices), "rates": list(rates)}
    elif kind == "admission":
        penalty = spec.params.get("penalty", DEFAULT_ADMISSION_PENALTY)
        value = metrics.delivered_rate - penalty * metrics.mean_queue_total
    else:  # routing
        value = -metrics.mean_delay
    return UtilityValue(spec.id, float(value), dict(config), detail)


def apply_configuration(controllers, configs, traffic, routing):
    """Actuate admission and routing configs onto copies of ``traffic``/``routing``."""
    for spec in controllers:
        config = configs[spec.id]
        if spec.kind == "admission":
            limit = config.get("threshold")
            traffic = replace(traffic, admission_limit=None if limit is None else int(limit))
        elif spec.kind == "routing":
            routing = RoutingPolicy(config["policy"], config.get("queue_weight", routing.queue_weight))
    return traffic, routing


def calibrate(configs, measure):
    """Empirical model from ``measure(config) -> metric`` over ``configs``."""
    table = {canonical(c): float(measure(c)) for c in configs}
    return PerformanceModel(kind="empirical", form="table", table=table, metric="delivered_rate")


def controller_from_dict(doc):
    """Build a ControllerSpec from its scenario-file form."""
    doc = dict(doc)
    if "grid" in doc:
        axes = {}
        for name, values in doc.pop("grid").items():
            if isinstance(values, dict):
                values = list(range(values["start"], values["stop"] + 1, values.get("step", 1)))
            axes[name] = list(values)
        doc["configs"] = grid(**axes)
    model = doc.pop("model", None)
    if model is not None:
        if model.get("kind", "analytic") == "analytic":
            form = model.get("form", doc["kind"])
            params = {k: v for k, v in model.items() if k not in ("kind", "form")}
            model = throughput_model(**params) if form == "throughput" else cost_model(**params)
        else:
            model = PerformanceModel.from_dict(model)
    params = dict(doc.pop("params", {}) or {})
    if "problem" in params and isinstance(params["problem"], dict):
        params["problem"] = num.problem_from_dict(params["problem"])
    return ControllerSpec(id=doc["id"], kind=doc["kind"], configs=doc["configs"], model=model,
                          params=params, follows=doc.get("follows"))
