#
# cli_report.py
# Command line: list scenarios, run one check, show the run history.
#
#   python cli_report.py list
#   python cli_report.py run --scenario circle-full --check eq4 --paths 100000 --seed 42
#   python cli_report.py history --db ./db/ibp_runs.sqlite3
#
# Exit status: 0 every threshold passed, 1 a threshold failed, 2 usage error,
# 3 the run itself failed, for example on an unstable step.

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from config import (
    CHECKS,
    DEFAULT_CHUNK,
    DEFAULT_DB_PATH,
    DEFAULT_HORIZON,
    DEFAULT_PATHS,
    DEFAULT_SEED,
    DEFAULT_STEPS,
    DEFAULT_TAU,
    TOLERANCES,
    VERSION,
    RunConfig,
)
from errors import (
    GridError,
    IBPError,
    PreconditionError,
    ScenarioNotFoundError,
    UnsupportedScenarioError,
    UsageError,
)
from flow_sim import compose_check, sample_noise_batch
from geometry_core import VectorField, curve_derivative, sample_points
from ibp_harness import (
    conditional_flow_check,
    estimate_eq4,
    estimate_eq5_multipoint,
    estimate_eq9,
    girsanov_reweight_check,
    mean_stderr,
    tau_derivative_check,
)
from ljw_connection import ConnectionOracle, induced_inner, ljw_derivative, ricci_eigenvalues
from report_store import get_connection, json_safe, read_reports, save_report, summarize_reports, summary_frame
from scenarios import get_scenario, list_scenarios, make_functional, make_path, validate_functional

logger = logging.getLogger(__name__)

REPORT_KEYS = ("scenario", "check", "params", "lhs", "rhs", "paired", "threshold", "pass", "wall_ms", "version")

# bad input or a scenario the check cannot run on; anything else raised
# during a run is a runtime failure
USAGE_ERRORS = (UsageError, ScenarioNotFoundError, PreconditionError, GridError, UnsupportedScenarioError)

# per-check values used when a flag is omitted; everything else falls back
# to the DEFAULT_* constants in config.py
CHECK_DEFAULTS = {
    "girsanov": {"tau": 1.0},
    "tau-derivative": {"tau": DEFAULT_TAU},
    "compose": {"tau": 0.1, "steps": 64, "paths": 16},
    "geometry-ricci": {"paths": 20},
    "geometry-connection": {"paths": 100},
}

COMPOSE_REFINEMENT = 4


@dataclass
class RunReport:
    scenario: str
    check: str
    params: dict
    lhs: dict
    rhs: dict
    paired: dict
    threshold: float
    passed: bool
    wall_ms: int
    version: str = VERSION

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "check": self.check,
            "params": self.params,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "paired": self.paired,
            "threshold": self.threshold,
            "pass": self.passed,
            "wall_ms": self.wall_ms,
            "version": self.version,
        }

    def to_json(self):
        return json.dumps(json_safe(self.to_dict()), indent=2, allow_nan=False)

    @classmethod
    def from_dict(cls, data):
        if set(data) != set(REPORT_KEYS):
            raise UsageError(f"report keys differ from {REPORT_KEYS}")
        values = {key: data[key] for key in REPORT_KEYS if key != "pass"}
        return cls(passed=data["pass"], **values)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class CheckOutcome:
    lhs: dict
    rhs: dict
    paired: dict
    threshold: float
    passed: bool
    extra: dict = field(default_factory=dict)
    samples: Optional[pd.DataFrame] = None


def _side(mean, stderr):
    return {"mean": float(mean), "stderr": float(stderr)}


def _statistical(result, reference=None):
    threshold = TOLERANCES.z_threshold
    passed = result.z < threshold
    extra = {}
    if reference is not None:
        extra["reference"] = reference
        for mean, stderr in ((result.lhs_mean, result.lhs_stderr), (result.rhs_mean, result.rhs_stderr)):
            passed = passed and abs(mean - reference) <= 3.0 * stderr + TOLERANCES.closed_form_allowance
    return CheckOutcome(
        lhs=_side(result.lhs_mean, result.lhs_stderr),
        rhs=_side(result.rhs_mean, result.rhs_stderr),
        paired={"mean": result.paired_mean, "stderr": result.paired_stderr, "z": result.z},
        threshold=threshold,
        passed=bool(passed),
        extra=extra,
        samples=result.frame(),
    )


def _default_functional(scenario, check):
    return scenario.pair_functional if check == "eq5" else scenario.functional


def _inputs(scenario, config):
    functional = validate_functional(make_functional(config.functional, config.horizon, scenario.manifold), scenario.manifold)
    k = make_path(config.path, config.horizon, config.steps, scenario.k_direction)
    return functional, k


def _reference(scenario, config):
    defaults = config.functional == scenario.functional and config.path == "linear"
    return scenario.reference(config.check, config.horizon, config.tau) if defaults else None


def _run_eq4(scenario, config):
    functional, k = _inputs(scenario, config)
    result = estimate_eq4(scenario.system, scenario.x0, functional, k, config.paths, config.seed, config.workers, config.chunk_size)
    return _statistical(result, _reference(scenario, config))


def _run_eq5(scenario, config):
    functional, k = _inputs(scenario, config)
    result = estimate_eq5_multipoint(
        scenario.system, scenario.pair_points, functional, k, config.paths, config.seed, config.workers, config.chunk_size
    )
    return _statistical(result)


def _run_eq9(scenario, config):
    functional, k = _inputs(scenario, config)
    result = estimate_eq9(
        scenario.oracle, scenario.x0, functional, k, config.paths, config.seed, config.variant, config.workers, config.chunk_size
    )
    return _statistical(result, _reference(scenario, config))


def _run_girsanov(scenario, config):
    functional, k = _inputs(scenario, config)
    result = girsanov_reweight_check(
        scenario.system, scenario.x0, functional, k, config.tau, config.paths, config.seed, config.workers, config.chunk_size
    )
    return _statistical(result, _reference(scenario, config))


def _run_tau_derivative(scenario, config):
    functional, k = _inputs(scenario, config)
    result = tau_derivative_check(
        scenario.system, scenario.x0, functional, k, config.tau, config.paths, config.seed, config.workers, config.chunk_size
    )
    outcome = _statistical(result, _reference(scenario, config))
    allowance = TOLERANCES.bias_allowance
    within = abs(result.paired_mean) <= 3.0 * result.paired_stderr + allowance
    reference = outcome.extra.get("reference")
    if reference is not None:
        within = within and abs(result.lhs_mean - reference) <= 3.0 * result.lhs_stderr + allowance
    outcome.passed = bool(within)
    outcome.extra.update(
        bias_allowance=allowance,
        bias_bound=result.extras["bias_bound"],
        richardson_ratio=result.extras["richardson_ratio"],
    )
    return outcome


def _run_conditional(scenario, config):
    ones = lambda x: np.ones(x.shape[:-1])
    t = scenario.conditional_time * config.horizon
    result = conditional_flow_check(
        scenario.oracle,
        scenario.x0,
        scenario.v0,
        ones,
        scenario.test_field(),
        t,
        config.paths,
        config.seed,
        config.variant,
        config.horizon,
        config.steps,
        config.workers,
        config.chunk_size,
    )
    outcome = _statistical(result, scenario.reference("conditional", config.horizon, config.tau))
    outcome.extra["t"] = t
    return outcome


def _oracle_for(scenario, method):
    oracle = scenario.oracle
    if oracle.curvature_method == method:
        return oracle
    if method not in ("christoffel", "projection"):
        raise UsageError(f"unknown curvature method '{method}'")
    return ConnectionOracle(system=oracle.system, rank=oracle.rank, curvature_method=method)


def _run_geometry_ricci(scenario, config):
    oracle = _oracle_for(scenario, config.curvature)
    points = sample_points(scenario.manifold, config.paths, seed=config.seed)
    eigenvalues = np.concatenate([ricci_eigenvalues(oracle, p) for p in points])
    expected = scenario.ricci_eigenvalue
    deviation = float(np.max(np.abs(eigenvalues - expected)))
    threshold = scenario.ricci_tolerance
    return CheckOutcome(
        lhs=_side(*mean_stderr(eigenvalues)),
        rhs=_side(expected, 0.0),
        paired={"mean": deviation, "stderr": 0.0, "z": None},
        threshold=threshold,
        passed=deviation <= threshold,
        samples=pd.DataFrame({"eigenvalue": eigenvalues}).rename_axis("sample"),
    )


def _section(system, c):
    return VectorField(evaluate=lambda y: np.einsum("...ij,j->...i", system.X(y), c), name="X(.)c")


def _run_geometry_connection(scenario, config):
    """Reproducing property of Y and metric compatibility of the connection."""
    oracle = scenario.oracle
    system = oracle.system
    manifold = system.manifold
    rng = np.random.default_rng(config.seed)
    points = sample_points(manifold, config.paths, seed=config.seed)

    v = np.einsum("pij,pj->pi", system.X(points), rng.standard_normal((len(points), system.noise_dim)))
    reproduced = np.einsum("pij,pj->pi", system.X(points), np.einsum("pij,pj->pi", oracle.Y(points), v))
    reproducing = np.linalg.norm(reproduced - v, axis=-1)

    z1 = _section(system, rng.standard_normal(system.noise_dim))
    z2 = _section(system, rng.standard_normal(system.noise_dim))
    w = manifold.project(points, rng.standard_normal(points.shape))
    numeric = curve_derivative(lambda y: induced_inner(system, y, z1(y), z2(y)), manifold, points, w)
    analytic = induced_inner(system, points, ljw_derivative(oracle, z1, points, w), z2(points)) + induced_inner(
        system, points, z1(points), ljw_derivative(oracle, z2, points, w)
    )
    compatibility = np.abs(numeric - analytic) / np.maximum(1.0, np.abs(numeric))

    worst_reproducing = float(np.max(reproducing))
    worst_compatibility = float(np.max(compatibility))
    threshold = TOLERANCES.connection
    return CheckOutcome(
        lhs=_side(worst_reproducing, 0.0),
        rhs=_side(worst_compatibility, 0.0),
        paired={"mean": max(worst_reproducing, worst_compatibility), "stderr": 0.0, "z": None},
        threshold=threshold,
        passed=worst_reproducing <= TOLERANCES.tangency and worst_compatibility <= threshold,
        samples=pd.DataFrame({"reproducing": reproducing, "compatibility": compatibility}).rename_axis("sample"),
    )


def _run_compose(scenario, config):
    """Composition deviation at dt and at dt / 4 on the same Brownian paths."""
    system = scenario.system
    fine_steps = config.steps * COMPOSE_REFINEMENT
    fine = sample_noise_batch(config.horizon, fine_steps, config.seed, range(config.paths), system.noise_dim)
    coarse = fine.coarsen(COMPOSE_REFINEMENT)
    deviations = []
    for noise, steps in ((coarse, config.steps), (fine, fine_steps)):
        k = make_path(config.path, config.horizon, steps, scenario.k_direction)
        deviations.append(compose_check(system, scenario.x0, noise, k, config.tau))
    (coarse_mean, coarse_err), (fine_mean, fine_err) = (mean_stderr(d) for d in deviations)

    threshold = TOLERANCES.compose_ratio
    extra = {"refinement": COMPOSE_REFINEMENT, "mode": "reference"}
    if fine_mean <= 1e-12:
        # composition reproduces the shifted flow to rounding on this scenario
        ratio, passed = 0.0, coarse_mean <= 1e-12
        extra["exact"] = True
    else:
        ratio = math.sqrt(coarse_mean / fine_mean)
        passed = ratio >= threshold
    return CheckOutcome(
        lhs=_side(coarse_mean, coarse_err),
        rhs=_side(fine_mean, fine_err),
        paired={"mean": ratio, "stderr": 0.0, "z": None},
        threshold=threshold,
        passed=bool(passed),
        extra=extra,
        samples=pd.DataFrame({"coarse": deviations[0], "fine": deviations[1]}).rename_axis("sample"),
    )


_RUNNERS = {
    "eq4": _run_eq4,
    "eq5": _run_eq5,
    "eq9": _run_eq9,
    "girsanov": _run_girsanov,
    "tau-derivative": _run_tau_derivative,
    "conditional": _run_conditional,
    "geometry-ricci": _run_geometry_ricci,
    "geometry-connection": _run_geometry_connection,
    "compose": _run_compose,
}


def resolve_config(config):
    """Fill omitted values (None) from check and run defaults, recording which."""
    if not config.scenario:
        raise UsageError("--scenario is required")
    if config.check not in CHECKS:
        raise UsageError(f"unknown check '{config.check}' (choose from {', '.join(CHECKS)})")
    scenario = get_scenario(config.scenario)
    fallback = {
        "horizon": DEFAULT_HORIZON,
        "steps": DEFAULT_STEPS,
        "paths": DEFAULT_PATHS,
        "seed": DEFAULT_SEED,
        "tau": 0.0,
        "functional": _default_functional(scenario, config.check),
        "path": "linear",
    }
    fallback.update(CHECK_DEFAULTS.get(config.check, {}))
    applied = list(config.defaults_applied)
    for key, value in fallback.items():
        if getattr(config, key) is None:
            setattr(config, key, value)
            applied.append(key)
    config.defaults_applied = applied

    if config.horizon <= 0 or config.steps < 1 or config.paths < 1:
        raise UsageError("horizon, steps and paths must be positive")
    if config.workers < 1 or config.chunk_size < 1:
        raise UsageError("workers and chunk size must be positive")
    if config.variant not in ("eq7", "eq8"):
        raise UsageError(f"unknown variant '{config.variant}'")
    return scenario, config


def execute(config):
    """Run one check; returns the report and the per-sample DataFrame."""
    scenario, config = resolve_config(config)
    logger.info("running %s on %s", config.check, config.scenario)
    start = time.perf_counter()
    outcome = _RUNNERS[config.check](scenario, config)
    elapsed = 0 if config.freeze_clock else int(round((time.perf_counter() - start) * 1000))
    params = config.params()
    params.update(outcome.extra)
    report = RunReport(
        scenario=config.scenario,
        check=config.check,
        params=params,
        lhs=outcome.lhs,
        rhs=outcome.rhs,
        paired=outcome.paired,
        threshold=outcome.threshold,
        passed=outcome.passed,
        wall_ms=elapsed,
    )
    logger.info("%s on %s: %s", config.check, config.scenario, "pass" if report.passed else "FAIL")
    return report, outcome.samples


def run_check(config):
    return execute(config)[0]


def format_catalog():
    return "\n".join(f"{scenario_id:<26}{description}" for scenario_id, description in list_scenarios())


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="cli_report", description="Integration-by-parts checks for diffusions on manifolds")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("list", help="list the registered scenarios")

    run = commands.add_parser("run", help="run one check and print its report")
    run.add_argument("--scenario")
    run.add_argument("--check", required=True, choices=CHECKS)
    run.add_argument("--paths", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--horizon", type=float)
    run.add_argument("--seed", type=int)
    run.add_argument("--tau", type=float)
    run.add_argument("--functional", help="e.g. sin-coord:0, linear:1,0,0, pair-inner")
    run.add_argument("--path", help="Cameron-Martin path: linear[:u], zero, sine[:u]")
    run.add_argument("--variant", choices=("eq7", "eq8"), default="eq8")
    run.add_argument("--curvature", choices=("christoffel", "projection"), default="christoffel")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--chunk-size", type=int, default=DEFAULT_CHUNK)
    run.add_argument("--out")
    run.add_argument("--dump-samples")
    run.add_argument("--db")
    run.add_argument("--freeze-clock", action="store_true", help="write wall_ms as 0")

    history = commands.add_parser("history", help="pass rates recorded with run --db")
    history.add_argument("--db", default=DEFAULT_DB_PATH)
    history.add_argument("--scenario")
    history.add_argument("--check")
    return parser


def config_from_args(args):
    return RunConfig(
        scenario=args.scenario,
        check=args.check,
        horizon=args.horizon,
        steps=args.steps,
        paths=args.paths,
        seed=args.seed,
        tau=args.tau,
        functional=args.functional,
        path=args.path,
        variant=args.variant,
        curvature=args.curvature,
        workers=args.workers,
        chunk_size=args.chunk_size,
        out=args.out,
        dump_samples=args.dump_samples,
        db=args.db,
        freeze_clock=args.freeze_clock,
    )


def _history(args):
    conn = get_connection(args.db)
    try:
        df = read_reports(conn, args.scenario, args.check)
    finally:
        conn.close()
    table = summary_frame(summarize_reports(df))
    if table.empty:
        print("no runs recorded")
    else:
        print(table.to_string(index=False))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "list":
            print(format_catalog())
            return 0
        if args.command == "history":
            _history(args)
            return 0
        config = config_from_args(args)
        report, samples = execute(config)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IBPError, np.linalg.LinAlgError, FloatingPointError) as exc:
        logger.debug("run failed", exc_info=True)
        print(f"run failed: {exc}", file=sys.stderr)
        return 3

    text = report.to_json()
    if config.out:
        with open(config.out, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")
    else:
        print(text)
    if config.dump_samples and samples is not None:
        samples.to_csv(config.dump_samples)
    if config.db:
        conn = get_connection(config.db)
        try:
            save_report(conn, report.to_dict())
        finally:
            conn.close()
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
