"""Command-line entry point: ``netgov <command> SCENARIO [--out DIR]``.

Exit codes: 0 success, 2 invalid input, 3 internal invariant failure,
4 solver non-convergence, 5 search budget exceeded.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from . import __version__, num
from .controllers import apply_configuration, calibrate, canonical, evaluate_utility, joint_space_size, monitor
from .governance import (
    BudgetError,
    GovernanceEvaluation,
    JointSpace,
    aggregate,
    Simulator,
    entry_row,
    govern_loop,
    model_evaluator,
    pareto_front,
    trace_to_json,
)
from .netmodel import TRACE_HEADER, ConservationError, NetworkState, TopologyError, capacity_bound, run
from .outputs import meta, write_csv, write_json
from .scenario import (
    CalibrateExperiment,
    CoupledExperiment,
    ParetoExperiment,
    PhaseSweepExperiment,
    json_schema,
    load_scenario,
)
from .stability import NoTransitionDetected, detect_transition, hysteresis_sweep, phase_sweep, run_coupled

log = logging.getLogger("netgov")

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT, EXIT_NONCONVERGENCE, EXIT_BUDGET = 0, 2, 3, 4, 5


class InvalidInput(Exception):
    pass


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _read_scenario(path, seeds_override=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidInput(f"cannot read {path}: {exc}") from None
    try:
        scenario = load_scenario(text)
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except ValidationError as exc:
        lines = [f"{path}: invalid scenario"]
        for e in exc.errors():
            loc = ".".join(str(x) for x in e["loc"]) or "<root>"
            lines.append(f"  {loc}: {e['msg']}")
        raise InvalidInput("\n".join(lines)) from None
    if seeds_override:
        try:
            seeds = [int(s) for s in seeds_override.split(",") if s.strip()]
        except ValueError:
            raise InvalidInput(f"--seeds-override must be comma-separated integers, got {seeds_override!r}") from None
        scenario = scenario.model_copy(update={"seeds": seeds, "seed": seeds[0]})
    return scenario


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build(fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (TopologyError, ValueError) as exc:
        raise InvalidInput(str(exc)) from None


def cmd_simulate(args):
    scenario = _read_scenario(args.scenario, args.seeds_override)
    topo = _build(scenario.topology.build)
    traffic = _build(scenario.traffic.build)
    routing = _build(scenario.routing.build)
    info = meta(scenario.digest(), [scenario.seed])
    state = NetworkState(topo, scenario.service_rate, seed=scenario.seed)
    trace = run(state, traffic, routing, scenario.horizon)
    out = _out_dir(args)
    write_csv(out / "trace.csv", TRACE_HEADER, trace.rows(), info)
    m = monitor(trace, 0, len(trace))
    write_json(out / "summary.json", {
        "ticks": scenario.horizon,
        "created_total": state.created_total,
        "delivered_total": state.delivered_total,
        "dropped_total": state.dropped_total,
        "blocked_total": state.blocked_total,
        "in_flight": state.queue_total,
        "conservation_ok": state.conservation_ok(),
        "mean_delay": m.mean_delay,
        "delivered_rate": m.delivered_rate,
        "utilization": m.utilization,
    }, info)
    return EXIT_OK


def cmd_sweep(args):
    scenario = _read_scenario(args.scenario, args.seeds_override)
    exp = scenario.experiment
    if not isinstance(exp, PhaseSweepExperiment):
        raise InvalidInput("scenario has no phase_sweep experiment block")
    seeds = scenario.seed_list()
    if len(seeds) < 2:
        raise InvalidInput(f"a sweep needs at least 2 seeds, got {len(seeds)}")
    topo = _build(scenario.topology.build)
    _build(scenario.routing.build)
    lambdas = exp.lambda_values()
    if any(not 0 <= x <= 1 for x in lambdas):
        raise InvalidInput("sweep lambda values must lie in [0, 1]")
    info = meta(scenario.digest(), seeds)
    sweep = phase_sweep(scenario.sweep_scenario(), lambdas, seeds, jobs=args.jobs)
    out = _out_dir(args)
    write_csv(out / "sweep.csv", ("lambda", "rho_mean", "rho_std", "seeds"),
              ((p.value, p.mean, p.std, p.seeds) for p in sweep.points), info)
    bound = capacity_bound(topo, scenario.service_rate)
    try:
        lam_c = detect_transition(sweep, exp.rho_star)
        result = {"lambda_c": lam_c, "no_transition": False}
    except NoTransitionDetected:
        result = {"lambda_c": None, "no_transition": True}
    result.update({"rho_star": exp.rho_star, "capacity_bound": bound})
    write_json(out / "transition.json", result, info)
    if exp.hysteresis:
        rows = []
        for s in seeds:
            up, down = hysteresis_sweep(scenario.sweep_scenario(), lambdas, s)
            rows += [("up", s, lam, rho) for lam, rho in up] + [("down", s, lam, rho) for lam, rho in down]
        write_csv(out / "hysteresis.csv", ("direction", "seed", "lambda", "rho"), rows, info)
    return EXIT_OK


def cmd_num(args):
    try:
        doc = json.loads(Path(args.problem).read_text())
        problem = num.problem_from_dict(doc)
    except OSError as exc:
        raise InvalidInput(f"cannot read {args.problem}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInput(f"invalid rate problem: {exc}") from None
    try:
        sol = num.solve_num(problem, step=doc.get("step"), tol=doc.get("tolerance", 1e-6),
                            max_iter=doc.get("max_iterations", 200_000))
    except num.ConvergenceError as exc:
        _err(f"{exc} (last residual {exc.residual:.6g})")
        return EXIT_NONCONVERGENCE
    report = num.verify_kkt(problem, sol, doc.get("tolerance", 1e-6))
    body = {**sol.to_dict(), "objective": problem.objective(sol.rates), "kkt": report.to_dict()}
    text = json.dumps(body, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = _out_dir(args)
        digest = hashlib.sha256(canonical(doc).encode()).hexdigest()
        write_json(out / "solution.json", body, meta(digest, []))
    if not report.passed:
        _err("KKT check failed: " + "; ".join(report.violations))
        return EXIT_INVARIANT
    return EXIT_OK


def _series_rows(series):
    return ((t, u) for t, u in series)


def cmd_govern(args):
    scenario = _read_scenario(args.scenario, args.seeds_override)
    exp = scenario.experiment
    info = meta(scenario.digest(), scenario.seed_list())
    if isinstance(exp, CoupledExperiment):
        coupled = _build(exp.build)
        free = run_coupled(coupled, scenario.horizon, governed=False, window=exp.window)
        gov = run_coupled(coupled, scenario.horizon, governed=True, window=exp.window)
        out = _out_dir(args)
        write_csv(out / "governance_trace.csv", ("tick", "reason", "examined", "U_g", "config_json"),
                  (entry_row(e) for e in gov.trace.entries), info)
        write_json(out / "governance_trace.json", {"entries": trace_to_json(gov.trace)}, info)
        write_csv(out / "utility_series.csv", ("tick", "U_g"), enumerate(gov.utility), info)
        write_csv(out / "coupled_series.csv", ("tick", "n_ungoverned", "n_governed", "U_ungoverned", "U_governed"),
                  zip(range(scenario.horizon), free.n, gov.n, free.utility, gov.utility), info)
        ratio = None if gov.report.amplitude == 0 else free.report.amplitude / gov.report.amplitude
        write_json(out / "comparison.json", {
            "ungoverned": free.report.to_dict(),
            "governed": gov.report.to_dict(),
            "amplitude_ratio": ratio,
            "mitigated": free.report.amplitude >= 5 * gov.report.amplitude,
            "governed_final_n": gov.n[-1],
            "optimum_n": coupled.optimum(),
            "window_mean_U": {
                "ungoverned": sum(free.utility[-exp.window:]) / min(exp.window, len(free.utility)),
                "governed": sum(gov.utility[-exp.window:]) / min(exp.window, len(gov.utility)),
            },
        }, info)
        return EXIT_OK

    if not scenario.controllers:
        raise InvalidInput("govern needs at least one controller (or a coupled experiment)")
    if scenario.trigger is None:
        raise InvalidInput("govern needs a trigger block")
    controllers = _build(scenario.build_controllers)
    _build(JointSpace, controllers)
    spec = _build(scenario.global_utility.build)
    trigger = _build(scenario.trigger.build)
    topo = _build(scenario.topology.build)
    state = NetworkState(topo, scenario.service_rate, seed=scenario.seed)
    sim = Simulator(state, _build(scenario.traffic.build), _build(scenario.routing.build),
                    [(s.tick, s.lam) for s in scenario.load_schedule])
    try:
        result = govern_loop(sim, controllers, spec, trigger, scenario.horizon, seed=scenario.seed)
    except BudgetError as exc:
        _err(str(exc))
        return EXIT_BUDGET
    out = _out_dir(args)
    write_csv(out / "governance_trace.csv", ("tick", "reason", "examined", "U_g", "config_json"),
              (entry_row(e) for e in result.trace.entries), info)
    write_json(out / "governance_trace.json", {"entries": trace_to_json(result.trace)}, info)
    write_csv(out / "utility_series.csv", ("tick", "U_g"), _series_rows(result.utility_series), info)
    series = [u for _, u in result.utility_series]
    above = sum(1 for u in series if u >= spec.threshold) / len(series)
    unmet = [e.tick for e in result.trace.entries if e.threshold_unmet]
    write_json(out / "summary.json", {
        "horizon": scenario.horizon,
        "threshold": None if math.isinf(spec.threshold) else spec.threshold,
        "fraction_at_or_above_threshold": above,
        "triggers": len(result.trace.entries),
        "threshold_unmet_ticks": unmet,
        "final_config": result.final_config,
        "conservation_ok": sim.state.conservation_ok(),
    }, info)
    return EXIT_OK


def _simulated_evaluator(scenario, controllers, spec):
    """Score each vector by a full-horizon run from a fresh state under that configuration."""
    topo = scenario.topology.build()
    base_traffic = scenario.traffic.build()
    base_routing = scenario.routing.build()
    ordered = sorted(controllers, key=lambda c: c.id)

    def evaluate(vector):
        cfg = vector.configs(ordered)
        traffic, routing = apply_configuration(ordered, cfg, base_traffic, base_routing)
        trace = run(NetworkState(topo, scenario.service_rate, seed=scenario.seed), traffic, routing,
                    scenario.horizon)
        metrics = monitor(trace, 0, len(trace))
        us = [evaluate_utility(c, metrics, cfg[c.id]) for c in ordered]
        return GovernanceEvaluation(vector, us, aggregate({u.controller_id: u.value for u in us}, spec))

    return evaluate


def cmd_pareto(args):
    scenario = _read_scenario(args.scenario, args.seeds_override)
    exp = scenario.experiment
    budget = exp.budget if isinstance(exp, ParetoExperiment) else 10**6
    if not scenario.controllers:
        raise InvalidInput("pareto needs at least one controller")
    controllers = _build(scenario.build_controllers)
    space = _build(JointSpace, controllers)
    spec = _build(scenario.global_utility.build)
    objectives = (exp.objectives if isinstance(exp, ParetoExperiment) and exp.objectives
                  else [c.id for c in space.controllers])
    unknown = set(objectives) - set(space.ids)
    if unknown:
        raise InvalidInput(f"unknown objective controller ids: {sorted(unknown)}")
    if joint_space_size(controllers) > budget:
        _err(f"joint space has {space.size} points, over the budget of {budget}; reduce the grid")
        return EXIT_BUDGET
    if any(c.actuates for c in controllers):
        evaluator = _simulated_evaluator(scenario, controllers, spec)
    else:
        evaluator = model_evaluator(controllers, spec)
    evaluations = [evaluator(v) for v in space]
    front = pareto_front(evaluations, objectives)
    info = meta(scenario.digest(), scenario.seed_list())
    out = _out_dir(args)
    ids = list(space.ids)
    write_csv(out / "evaluations.csv", (*ids, "U_g", "config_json"),
              ((*(e.value_of(i) for i in ids), e.global_utility, e.vector.to_json(space.controllers))
               for e in evaluations), info)
    write_csv(out / "front.csv", (*objectives, "config_json"),
              ((*(e.value_of(i) for i in objectives), e.vector.to_json(space.controllers)) for e in front), info)
    write_json(out / "pareto.json", {"objectives": objectives, "evaluated": len(evaluations),
                                     "front_size": len(front)}, info)
    return EXIT_OK


def cmd_calibrate(args):
    scenario = _read_scenario(args.scenario, args.seeds_override)
    exp = scenario.experiment
    if not isinstance(exp, CalibrateExperiment):
        raise InvalidInput("scenario has no calibrate experiment block")
    controllers = {c.id: c for c in _build(scenario.build_controllers)}
    if exp.controller not in controllers:
        raise InvalidInput(f"no controller {exp.controller!r} to calibrate")
    target = controllers[exp.controller]
    if not target.actuates:
        raise InvalidInput(f"controller {target.id!r} does not actuate; nothing to measure")
    topo = _build(scenario.topology.build)
    traffic, routing = _build(scenario.traffic.build), _build(scenario.routing.build)

    def measure(config):
        t, r = apply_configuration([target], {target.id: config}, traffic, routing)
        trace = run(NetworkState(topo, scenario.service_rate, seed=scenario.seed), t, r, scenario.horizon)
        return monitor(trace, 0, len(trace)).delivered_rate

    model = calibrate(target.configs, measure)
    out = _out_dir(args)
    write_json(out / f"calibration_{target.id}.json", {"model": model.to_dict()},
               meta(scenario.digest(), [scenario.seed]))
    return EXIT_OK


def cmd_schema(args):
    print(json.dumps(json_schema(), indent=2))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="netgov", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_cmd(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("scenario")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seeds-override", default=None, help="comma-separated seeds replacing the scenario's")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel workers")
        p.set_defaults(func=fn)

    scenario_cmd("simulate", cmd_simulate, "run the network and write a per-tick trace")
    scenario_cmd("sweep", cmd_sweep, "phase sweep over lambda and transition estimate")
    scenario_cmd("govern", cmd_govern, "governance loop, or coupled-controller comparison")
    scenario_cmd("pareto", cmd_pareto, "enumerate the joint space and its Pareto front")
    scenario_cmd("calibrate", cmd_calibrate, "measure an empirical performance model")
    p = sub.add_parser("num", help="solve a rate allocation problem and check KKT")
    p.add_argument("problem")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_num)
    p = sub.add_parser("schema", help="print the scenario JSON schema")
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidInput as exc:
        _err(str(exc))
        return EXIT_INVALID
    except ConservationError as exc:
        _err(f"internal invariant violated: {exc}")
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
