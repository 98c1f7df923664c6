"""Versioned scenario documents: one JSON file drives every CLI command."""
from __future__ import annotations

import hashlib
import json
import math
from typing import Annotated, Literal, Optional, Union

from pydantic import AliasChoices, BaseModel, ConfigDict, Field, field_validator, model_validator

from . import controllers as ctl
from .governance import GlobalUtilitySpec, TriggerPolicy
from .netmodel import RoutingPolicy, TrafficSpec, build_topology
from .stability import CoupledScenario, SweepScenario

SCHEMA_VERSION = 1


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class TopologyModel(Strict):
    kind: Literal["ring", "lattice", "random"] = "ring"
    nodes: Optional[int] = Field(None, ge=2)
    side: Optional[int] = Field(None, ge=2)
    p: Optional[float] = Field(None, gt=0, le=1)
    seed: Optional[int] = None
    capacity: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _shape(self):
        if self.kind in ("ring", "random") and self.nodes is None:
            raise ValueError(f"{self.kind} topology needs 'nodes'")
        if self.kind == "lattice" and self.side is None:
            raise ValueError("lattice topology needs 'side'")
        if self.kind == "random" and (self.p is None or self.seed is None):
            raise ValueError("random topology needs 'p' and 'seed'")
        return self

    def kwargs(self):
        return {k: v for k, v in self.model_dump().items() if v is not None}

    def build(self):
        return build_topology(**self.kwargs())


class TrafficModel(Strict):
    lam: float = Field(0.0, ge=0, le=1, alias="lambda")
    destinations: Literal["uniform", "fixed"] = "uniform"
    pairs: list[tuple[int, int]] = []
    ttl: Optional[int] = Field(None, ge=1)
    admission_limit: Optional[int] = Field(None, ge=0)

    def build(self):
        return TrafficSpec(self.lam, self.destinations, tuple(self.pairs), self.ttl, self.admission_limit)


class RoutingModel(Strict):
    kind: Literal["static-shortest-path", "queue-aware-shortest-path", "local-greedy"] = "static-shortest-path"
    queue_weight: float = Field(1.0, ge=0)

    def build(self):
        return RoutingPolicy(self.kind, self.queue_weight)


class ControllerModel(Strict):
    id: str
    kind: Literal["throughput", "cost", "congestion", "admission", "routing"]
    configs: Optional[list[dict]] = None
    grid: Optional[dict] = None
    model: Optional[dict] = None
    params: dict = {}
    follows: Optional[str] = None

    @model_validator(mode="after")
    def _space(self):
        if (self.configs is None) == (self.grid is None):
            raise ValueError("give exactly one of 'configs' or 'grid'")
        return self

    def build(self):
        return ctl.controller_from_dict(self.model_dump(exclude_none=True))


class GlobalUtilityModel(Strict):
    aggregator: Literal["weighted-sum", "min", "product-of-shifted"] = "weighted-sum"
    weights: dict[str, float] = {}
    shifts: dict[str, float] = {}
    threshold: Optional[float] = None

    def build(self):
        return GlobalUtilitySpec(self.aggregator, dict(self.weights), dict(self.shifts),
                                 -math.inf if self.threshold is None else self.threshold)


class TriggerModel(Strict):
    period: int = Field(..., ge=1)
    lookahead: int = Field(200, ge=1)
    strategy: Literal["auto", "exhaustive", "coordinate-descent", "hill-climb"] = "auto"
    restarts: int = Field(4, ge=0)
    reset_on_reconfigure: bool = False

    def build(self):
        return TriggerPolicy(self.period, self.lookahead, self.strategy, self.restarts, self.reset_on_reconfigure)


class LoadStep(Strict):
    tick: int = Field(..., ge=0)
    lam: float = Field(..., ge=0, le=1, alias="lambda")


class PhaseSweepExperiment(Strict):
    kind: Literal["phase_sweep"]
    lambdas: Optional[list[float]] = None
    start: Optional[float] = None
    stop: Optional[float] = None
    step: Optional[float] = None
    ticks: int = Field(5000, ge=200)
    warmup: Optional[int] = None
    rho_star: float = 0.05
    hysteresis: bool = False

    @model_validator(mode="after")
    def _grid(self):
        if self.lambdas is None and None in (self.start, self.stop, self.step):
            raise ValueError("give 'lambdas' or all of 'start', 'stop', 'step'")
        if self.step is not None and not self.step > 0:
            raise ValueError("'step' must be > 0")
        return self

    def lambda_values(self):
        if self.lambdas is not None:
            return sorted(self.lambdas)
        count = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return [round(self.start + k * self.step, 12) for k in range(count)]


class CoupledExperiment(Strict):
    kind: Literal["coupled"]
    window: int = Field(500, ge=10)
    n_min: int = 0
    n_max: int = 50
    n_initial: int = 5
    load: float = 10.0
    unit_capacity: float = 1.0
    target_utilization: float = 0.5
    gain_a: float = 1.0
    gain_b: float = 1.0
    delay_a: int = Field(1, ge=0)
    delay_b: int = Field(1, ge=0)
    t_max: float = 100.0
    beta: float = 0.15
    c_fixed: float = 0.0
    c_unit: float = 2.0
    cost_cap: Optional[float] = None
    period: int = Field(100, ge=1)
    threshold: Optional[float] = None
    scalers_enabled: bool = True

    def build(self):
        return CoupledScenario(**self.model_dump(exclude={"kind", "window"}))


class GovernExperiment(Strict):
    kind: Literal["govern"]


class ParetoExperiment(Strict):
    kind: Literal["pareto"]
    objectives: Optional[list[str]] = None
    budget: int = Field(10**6, ge=1)


class CalibrateExperiment(Strict):
    kind: Literal["calibrate"]
    controller: str


Experiment = Annotated[
    Union[PhaseSweepExperiment, CoupledExperiment, GovernExperiment, ParetoExperiment, CalibrateExperiment],
    Field(discriminator="kind"),
]


class Scenario(Strict):
    schema_version: int
    seed: int = 0
    seeds: Optional[list[int]] = None
    horizon: int = Field(1000, ge=1, validation_alias=AliasChoices("horizon", "ticks"))
    topology: TopologyModel = TopologyModel(kind="ring", nodes=16)
    service_rate: int = Field(1, ge=1)
    traffic: TrafficModel = TrafficModel()
    routing: RoutingModel = RoutingModel()
    controllers: list[ControllerModel] = []
    global_utility: GlobalUtilityModel = GlobalUtilityModel()
    trigger: Optional[TriggerModel] = None
    load_schedule: list[LoadStep] = []
    experiment: Optional[Experiment] = None

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; this tool reads version {SCHEMA_VERSION}")
        return v

    def seed_list(self):
        return list(self.seeds) if self.seeds else [self.seed]

    def build_controllers(self):
        return [c.build() for c in self.controllers]

    def sweep_scenario(self):
        exp = self.experiment
        return SweepScenario(
            topology=self.topology.kwargs(), service_rate=self.service_rate, routing=self.routing.kind,
            queue_weight=self.routing.queue_weight, ticks=exp.ticks, warmup=exp.warmup,
        )

    def canonical_json(self):
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))

    def digest(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_scenario(text):
    """Parse and validate; raises json.JSONDecodeError or pydantic.ValidationError."""
    return Scenario.model_validate(json.loads(text))


def json_schema():
    return Scenario.model_json_schema(by_alias=True)
