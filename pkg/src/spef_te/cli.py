"""Command-line interface for spef-te."""

import argparse
import json
import sys
from collections.abc import Mapping
from pathlib import Path

from .baseline_metrics import NEG_INF_SENTINEL
from .errors import (
    InfeasibleDemandError,
    RoutingError,
    SpefError,
    StageError,
)
from .harness import (
    BUILTIN_INSTANCES,
    ExperimentConfig,
    RunArtifacts,
    SweepPoint,
    find_operating_scale,
    load_config_file,
    load_instance,
    load_weights_document,
    resolve_utility,
    run_eval,
    run_pipeline,
    run_solve,
    run_split,
    run_sweep,
)
from .log_config import configure_logging
from .objectives import NAMED_EXAMPLES, Q_PRESETS
from .weight_solver import STEP_SCHEDULES, WEIGHT_SPACES

EXIT_SUCCESS = 0
EXIT_NONCONVERGED = 2
EXIT_INFEASIBLE = 3
EXIT_CONFIG_ERROR = 4


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with EXIT_CONFIG_ERROR."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG_ERROR)


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from e
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def parse_scales(text: str) -> list[float]:
    """Parse a comma-separated list of positive load multipliers."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("at least one multiplier is required")
    return [_positive_float(p) for p in parts]


def _add_instance_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("instance")
    group.add_argument(
        "--config",
        type=Path,
        metavar="FILE",
        help="TOML or JSON experiment config; its values take precedence over flags.",
    )
    group.add_argument("--topology", type=Path, metavar="FILE", help="Topology JSON file.")
    sources = group.add_mutually_exclusive_group()
    sources.add_argument("--demands", type=Path, metavar="FILE", help="Demand CSV file.")
    sources.add_argument(
        "--gravity-total",
        type=float,
        metavar="TOTAL",
        help="Synthesize gravity-model demands summing to TOTAL (masses from --seed).",
    )
    sources.add_argument(
        "--builtin",
        choices=sorted(BUILTIN_INSTANCES),
        help="Use a shipped topology and demand matrix.",
    )
    group.add_argument("--seed", type=int, help="Seed for synthesized masses (default 0).")


def _add_utility_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("utility")
    group.add_argument("--beta", type=float, help="Fairness parameter beta >= 0 (default 1).")
    group.add_argument(
        "--q",
        choices=sorted(Q_PRESETS),
        help="Per-link priority preset (default unit).",
    )
    group.add_argument(
        "--example",
        choices=sorted(NAMED_EXAMPLES),
        help="Named utility; overrides --beta and --q.",
    )


def _add_solver_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("first-weight solver")
    group.add_argument("--step", choices=sorted(STEP_SCHEDULES), help="Step-size schedule.")
    group.add_argument(
        "--gamma", type=_positive_float, help="Initial step size (default 1 / max capacity)."
    )
    group.add_argument("--max-iters", type=int, help="Iteration limit.")
    group.add_argument("--gap-tol", type=_positive_float, help="Duality-gap tolerance.")
    group.add_argument(
        "--weight-space", choices=sorted(WEIGHT_SPACES), help="Space the update runs in."
    )
    group.add_argument(
        "--no-refine",
        action="store_true",
        help="Skip the Newton refinement of the averaged flow.",
    )


def _add_second_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("second-weight solver")
    group.add_argument(
        "--second-gamma", type=_positive_float, help="Step size (default 1 / max target load)."
    )
    group.add_argument(
        "--epsilon", type=float, help="Load tolerance (default 1e-3 * max target load)."
    )
    group.add_argument("--second-max-iters", type=int, help="Iteration limit.")
    group.add_argument(
        "--dijkstra-tol",
        type=float,
        help="Tolerance for equal-cost paths (default relative 1e-9).",
    )
    group.add_argument(
        "--integer-weights",
        action="store_true",
        help="Round first weights to integers and use the integer tolerance preset.",
    )


def _add_output_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--output", type=Path, metavar="DIR", help="Write artifacts to DIR."
    )
    parser.add_argument("--json", action="store_true", help="Print results as JSON.")
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="Log solver progress to stderr.",
    )


def _add_weights_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--weights",
        type=Path,
        required=True,
        metavar="FILE",
        help="weights.json written by a previous solve.",
    )


def create_parser() -> argparse.ArgumentParser:
    """Create and configure the argument parser."""
    parser = _Parser(
        prog="spef-te",
        description="Compute SPEF link weights and compare against OSPF with InvCap.",
    )
    sub = parser.add_subparsers(
        dest="command", required=True, metavar="COMMAND", parser_class=_Parser
    )

    solve = sub.add_parser("solve", help="Compute first link weights and target loads.")
    _add_instance_args(solve)
    _add_utility_args(solve)
    _add_solver_args(solve)
    solve.add_argument("--scale", type=_positive_float, help="Demand multiplier (default 1).")
    _add_output_args(solve)

    split = sub.add_parser(
        "split", help="Compute second link weights and forwarding tables from first weights."
    )
    _add_instance_args(split)
    _add_weights_arg(split)
    _add_second_args(split)
    split.add_argument("--scale", type=_positive_float, help="Demand multiplier (default 1).")
    _add_output_args(split)

    evaluate = sub.add_parser("eval", help="Compare SPEF and OSPF metrics for given weights.")
    _add_instance_args(evaluate)
    _add_weights_arg(evaluate)
    evaluate.add_argument(
        "--dijkstra-tol", type=float, help="Tolerance for equal-cost paths."
    )
    evaluate.add_argument(
        "--integer-weights", action="store_true", help="Evaluate with rounded first weights."
    )
    evaluate.add_argument(
        "--scale", type=_positive_float, help="Demand multiplier (default 1)."
    )
    _add_output_args(evaluate)

    sweep = sub.add_parser("sweep", help="Run the pipeline over demand multipliers.")
    _add_instance_args(sweep)
    _add_utility_args(sweep)
    _add_solver_args(sweep)
    _add_second_args(sweep)
    sweep.add_argument(
        "--scales",
        type=parse_scales,
        metavar="K1,K2,...",
        help="Comma-separated demand multipliers.",
    )
    sweep.add_argument("--workers", type=int, help="Sweep points run in parallel (default 1).")
    sweep.add_argument(
        "--find-operating-point",
        action="store_true",
        help="Bisect for the multiplier where SPEF MLU lies in [0.95, 1.0].",
    )
    _add_output_args(sweep)

    demo = sub.add_parser("demo", help="Run the full pipeline on a builtin instance.")
    demo.add_argument("instance", choices=sorted(BUILTIN_INSTANCES), help="Builtin instance.")
    _add_utility_args(demo)
    _add_solver_args(demo)
    _add_second_args(demo)
    demo.add_argument("--scale", type=_positive_float, help="Demand multiplier (default 1).")
    _add_output_args(demo)

    run = sub.add_parser("run", help="Run the full pipeline on any instance.")
    _add_instance_args(run)
    _add_utility_args(run)
    _add_solver_args(run)
    _add_second_args(run)
    run.add_argument("--scale", type=_positive_float, help="Demand multiplier (default 1).")
    _add_output_args(run)

    return parser


def _set(table: dict[str, object], key: str, value: object) -> None:
    if value is not None and value is not False:
        table[key] = value


def config_from_args(args: argparse.Namespace) -> dict[str, object]:
    """Translate flags into an experiment-config table (only flags actually given)."""
    data: dict[str, object] = {}
    get = vars(args).get
    _set(data, "topology", get("topology"))
    _set(data, "demands", get("demands"))
    _set(data, "builtin", get("builtin") or get("instance"))
    if get("gravity_total") is not None:
        data["gravity"] = {"total": args.gravity_total}
    _set(data, "seed", get("seed"))
    _set(data, "output_dir", get("output"))
    _set(data, "dijkstra_tol", get("dijkstra_tol"))
    _set(data, "integer_weights", get("integer_weights"))
    _set(data, "workers", get("workers"))
    if get("scales") is not None:
        data["scales"] = list(args.scales)
    elif get("scale") is not None:
        data["scales"] = [args.scale]

    utility: dict[str, object] = {}
    if get("example") is not None:
        utility["example"] = args.example
    else:
        _set(utility, "beta", get("beta"))
        _set(utility, "q", get("q"))
    if utility:
        data["utility"] = utility

    solver: dict[str, object] = {}
    _set(solver, "step_schedule", get("step"))
    _set(solver, "gamma", get("gamma"))
    _set(solver, "max_iters", get("max_iters"))
    _set(solver, "gap_tol", get("gap_tol"))
    _set(solver, "weight_space", get("weight_space"))
    if get("no_refine"):
        solver["refine"] = False
    if solver:
        data["solver"] = solver

    second: dict[str, object] = {}
    _set(second, "gamma", get("second_gamma"))
    _set(second, "epsilon", get("epsilon"))
    _set(second, "max_iters", get("second_max_iters"))
    if second:
        data["second"] = second
    return data


def merge_config(
    flags: Mapping[str, object], file_data: Mapping[str, object]
) -> dict[str, object]:
    """Overlay config-file values on flag values.

    Solver tables merge per key; a utility table in the file replaces the
    flag utility as a whole.
    """
    merged: dict[str, object] = dict(flags)
    for key, value in file_data.items():
        current = merged.get(key)
        if key != "utility" and isinstance(value, Mapping) and isinstance(current, Mapping):
            merged[key] = {**current, **value}
        else:
            merged[key] = value
    return merged


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """ExperimentConfig from flags and an optional config file."""
    data = config_from_args(args)
    if args.command != "demo" and getattr(args, "config", None) is not None:
        data = merge_config(data, load_config_file(args.config))
    if "utility" in data and isinstance(data["utility"], Mapping):
        utility = dict(data["utility"])
        if "example" not in utility:
            utility.setdefault("beta", 1.0)
        data["utility"] = utility
    return ExperimentConfig.from_dict(data)


def _print_json(data: object) -> None:
    print(json.dumps(data, indent=2))


def _format_float(value: float | None) -> str:
    return "-" if value is None else f"{value:.6g}"


def _json_number(value: float | None) -> float | str | None:
    if value is not None and value == float("-inf"):
        return NEG_INF_SENTINEL
    return value


def _exit_code_for(error: Exception) -> int:
    """Map an error to its exit code."""
    cause = error.cause if isinstance(error, StageError) else error
    if isinstance(cause, (InfeasibleDemandError, RoutingError)):
        return EXIT_INFEASIBLE
    return EXIT_CONFIG_ERROR


def _cmd_solve(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    result = run_solve(cfg)
    utilization = result.utilization()
    if args.json:
        _print_json({**result.to_dict(), "utilization": utilization})
    else:
        for link_id in sorted(result.first_weights):
            print(
                f"{link_id}: weight {result.first_weights[link_id]:.6g} "
                f"load {result.optimal_flow[link_id]:.6g} "
                f"utilization {utilization[link_id]:.4f}"
            )
        state = "converged" if result.converged else "did not converge"
        print(f"Solver {state} after {result.iterations} iteration(s)")
    return EXIT_SUCCESS if result.converged else EXIT_NONCONVERGED


def _cmd_split(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    outcome = run_split(cfg, load_weights_document(args.weights))
    if args.json:
        _print_json(
            {
                "second_weights": dict(outcome.second.v),
                "converged": outcome.second.converged,
                "tables": outcome.tables.to_list(),
            }
        )
    else:
        for row in outcome.tables.rows:
            hops = ", ".join(f"{hop.via} {hop.ratio:.4f}" for hop in row.nexthops)
            print(f"{row.node} -> {row.dest}: {hops}")
        state = "converged" if outcome.second.converged else "did not converge"
        print(f"Second weights {state} after {outcome.second.iterations} iteration(s)")
    return EXIT_SUCCESS if outcome.second.converged else EXIT_NONCONVERGED


def _cmd_eval(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    spef, ospf = run_eval(cfg, load_weights_document(args.weights))
    if args.json:
        _print_json({"spef": spef.to_dict(), "ospf": ospf.to_dict()})
    else:
        for name, report in (("SPEF", spef), ("OSPF", ospf)):
            print(
                f"{name}: MLU {report.mlu:.4f} "
                f"utility {_format_float(report.normalized_utility)}"
            )
    return EXIT_SUCCESS


def _print_run(run: RunArtifacts, args: argparse.Namespace) -> None:
    if args.json:
        _print_json(run.summary())
        return
    spef_util = run.spef_metrics.utilization
    ospf_util = run.ospf_metrics.utilization
    for link_id in run.topology.link_ids:
        print(
            f"{link_id}: weight {run.first.first_weights[link_id]:.6g} "
            f"SPEF {spef_util[link_id]:.4f} OSPF {ospf_util[link_id]:.4f}"
        )
    for name, report in (("SPEF", run.spef_metrics), ("OSPF", run.ospf_metrics)):
        print(f"{name}: MLU {report.mlu:.4f} utility {_format_float(report.normalized_utility)}")
    if not run.converged:
        print("Warning: the weight solvers did not fully converge")


def _cmd_run(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    run = run_pipeline(cfg, cfg.scales[0])
    _print_run(run, args)
    return EXIT_SUCCESS if run.converged else EXIT_NONCONVERGED


def _print_sweep(points: list[SweepPoint], args: argparse.Namespace) -> None:
    if args.json:
        _print_json(
            [
                {
                    "scale": p.scale,
                    "feasible": p.feasible,
                    "converged": p.converged,
                    "spef_mlu": p.spef_mlu,
                    "spef_utility": _json_number(p.spef_utility),
                    "ospf_mlu": p.ospf_mlu,
                    "ospf_utility": _json_number(p.ospf_utility),
                }
                for p in points
            ]
        )
        return
    for p in points:
        print(
            f"k={p.scale:g}: SPEF MLU {_format_float(p.spef_mlu)} "
            f"utility {_format_float(p.spef_utility)} | "
            f"OSPF MLU {p.ospf_mlu:.6g} utility {_format_float(p.ospf_utility)}"
        )


def _cmd_sweep(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    if args.find_operating_point:
        topo, dm = load_instance(cfg)
        spec = resolve_utility(cfg.utility, topo)
        k, mlu = find_operating_scale(topo, dm, spec, cfg.solver)
        if args.json:
            _print_json({"scale": k, "mlu": mlu})
        else:
            print(f"Operating point: multiplier {k:.6g}, SPEF MLU {mlu:.4f}")
        return EXIT_SUCCESS
    points = run_sweep(cfg)
    _print_sweep(points, args)
    if any(p.feasible and not p.converged for p in points):
        return EXIT_NONCONVERGED
    return EXIT_SUCCESS


_HANDLERS = {
    "solve": _cmd_solve,
    "split": _cmd_split,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "demo": _cmd_run,
    "run": _cmd_run,
}


def main() -> None:
    """Run the spef-te CLI."""
    parser = create_parser()
    args = parser.parse_args()
    configure_logging(args.verbose)

    try:
        cfg = build_config(args)
        code = _HANDLERS[args.command](cfg, args)
    except SpefError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(_exit_code_for(e))
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(EXIT_CONFIG_ERROR)

    sys.exit(code)
