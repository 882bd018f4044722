"""Experiment orchestration: instances, demand synthesis, pipeline runs and sweeps."""

import csv
import json
import math
from collections.abc import Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baseline_metrics import (
    SORTED_UTIL_CSV_HEADER,
    MetricsReport,
    compute_metrics,
    even_forwarding_tables,
    ospf_dag,
)
from .errors import ConfigError, DomainError, InfeasibleDemandError, SpefError, StageError
from .log_config import get_logger
from .net_model import (
    DemandMatrix,
    FlowAssignment,
    Link,
    Topology,
    ValidationReport,
    load_demands,
    load_topology,
    validate_flow,
    write_demands,
)
from .objectives import UtilitySpec
from .spef_split import (
    DIJKSTRA_TOLERANCE_PRESETS,
    SECOND_TRACE_CSV_HEADER,
    EcmpDag,
    ForwardingTable,
    SecondSolverConfig,
    SecondWeights,
    build_ecmp_dag,
    build_forwarding_tables,
    even_split_distribution,
    solve_second_weights,
    traffic_distribution,
)
from .weight_solver import (
    TRACE_CSV_HEADER,
    KktReport,
    SolverConfig,
    SolveResult,
    round_weights,
    solve_first_weights,
    verify_kkt,
)

try:
    import tomllib
    HAS_TOMLLIB = True
except ImportError:  # pragma: no cover (Python < 3.11)
    HAS_TOMLLIB = False

logger = get_logger(__name__)

BUILTIN_INSTANCES: frozenset[str] = frozenset({"fig1", "toy"})
DEFAULT_UTILITY: dict[str, object] = {"beta": 1.0, "q": "unit"}
OPERATING_MLU_RANGE = (0.95, 1.0)
SWEEP_CSV_HEADER = (
    "scale",
    "feasible",
    "converged",
    "spef_mlu",
    "spef_utility",
    "ospf_mlu",
    "ospf_utility",
)
OSPF_SPLITTING = "even split per node over ECMP next hops"

_PATH_KEYS = ("topology", "demands", "output_dir")


@dataclass(frozen=True)
class GravitySpec:
    """Gravity-model demand source; masses drawn from the seed when omitted."""

    total: float
    out_mass: Mapping[str, float] | None = None
    in_mass: Mapping[str, float] | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "GravitySpec":
        """Build from a config table."""
        unknown = sorted(set(data) - {"total", "out_mass", "in_mass"})
        if unknown:
            raise ConfigError(f"Unknown gravity setting(s): {', '.join(unknown)}")
        try:
            return cls(
                total=float(data["total"]),  # type: ignore[arg-type]
                out_mass=_float_map(data.get("out_mass")),
                in_mass=_float_map(data.get("in_mass")),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Invalid gravity settings: {e}") from e


def _float_map(data: object) -> dict[str, float] | None:
    if data is None:
        return None
    if not isinstance(data, Mapping):
        raise ConfigError(f"Expected a node -> number table, got {data!r}")
    return {str(k): float(v) for k, v in data.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run or sweep needs.

    Exactly one demand source applies: a builtin instance (which also
    supplies the topology), a demand CSV, or a gravity model.
    """

    topology: Path | None = None
    demands: Path | None = None
    builtin: str | None = None
    gravity: GravitySpec | None = None
    utility: Mapping[str, object] = field(default_factory=lambda: dict(DEFAULT_UTILITY))
    solver: SolverConfig = field(default_factory=SolverConfig)
    second: SecondSolverConfig = field(default_factory=SecondSolverConfig)
    scales: tuple[float, ...] = (1.0,)
    output_dir: Path | None = None
    seed: int = 0
    dijkstra_tol: float | None = None
    integer_weights: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        sources = [self.builtin is not None, self.demands is not None, self.gravity is not None]
        if sum(sources) != 1:
            raise ConfigError(
                "Exactly one demand source is required: builtin, demands or gravity"
            )
        if self.builtin is not None:
            if self.builtin not in BUILTIN_INSTANCES:
                raise ConfigError(
                    f"Invalid builtin instance: {self.builtin}. "
                    f"Valid options: {', '.join(sorted(BUILTIN_INSTANCES))}"
                )
            if self.topology is not None:
                raise ConfigError("A builtin instance cannot be combined with a topology file")
        elif self.topology is None:
            raise ConfigError("A topology file is required unless a builtin instance is used")
        object.__setattr__(self, "scales", tuple(float(k) for k in self.scales))
        if not self.scales or not all(k > 0 for k in self.scales):
            raise ConfigError(f"Load multipliers must be positive, got {list(self.scales)}")
        if self.dijkstra_tol is not None and not self.dijkstra_tol >= 0:
            raise ConfigError(f"Dijkstra tolerance must be >= 0, got {self.dijkstra_tol}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "ExperimentConfig":
        """Build from a merged config table (file and flag values)."""
        known = {
            "topology", "demands", "builtin", "gravity", "utility", "solver", "second",
            "scales", "output_dir", "seed", "dijkstra_tol", "integer_weights", "workers",
        }
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")
        kwargs: dict[str, object] = {}
        try:
            for key in _PATH_KEYS:
                if data.get(key) is not None:
                    kwargs[key] = Path(str(data[key]))
            if data.get("builtin") is not None:
                kwargs["builtin"] = str(data["builtin"])
            if data.get("gravity") is not None:
                kwargs["gravity"] = GravitySpec.from_dict(data["gravity"])  # type: ignore[arg-type]
            if data.get("utility") is not None:
                kwargs["utility"] = dict(data["utility"])  # type: ignore[call-overload]
            if data.get("solver") is not None:
                kwargs["solver"] = SolverConfig.from_dict(data["solver"])  # type: ignore[arg-type]
            if data.get("second") is not None:
                kwargs["second"] = SecondSolverConfig.from_dict(data["second"])  # type: ignore[arg-type]
            if data.get("scales") is not None:
                kwargs["scales"] = tuple(float(k) for k in data["scales"])  # type: ignore[union-attr]
            if data.get("seed") is not None:
                kwargs["seed"] = int(data["seed"])  # type: ignore[call-overload]
            if data.get("dijkstra_tol") is not None:
                kwargs["dijkstra_tol"] = float(data["dijkstra_tol"])  # type: ignore[arg-type]
            if data.get("integer_weights") is not None:
                kwargs["integer_weights"] = bool(data["integer_weights"])
            if data.get("workers") is not None:
                kwargs["workers"] = int(data["workers"])  # type: ignore[call-overload]
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Invalid config value: {e}") from e
        return cls(**kwargs)  # type: ignore[arg-type]


def load_config_file(path: Path) -> dict[str, object]:
    """Read a TOML or JSON experiment config; relative paths resolve against its folder.

    Raises:
        ConfigError: If the file cannot be read or parsed.
    """
    path = Path(path)
    try:
        if path.suffix == ".toml":
            if not HAS_TOMLLIB:  # pragma: no cover
                raise ConfigError("TOML config files need Python 3.11+; use JSON instead")
            with path.open("rb") as f:
                data = tomllib.load(f)
        else:
            data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Cannot parse config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a table/object")
    for key in _PATH_KEYS:
        value = data.get(key)
        if isinstance(value, str) and not Path(value).is_absolute():
            data[key] = str(path.parent / value)
    return data


def builtin_instance(name: str) -> tuple[Topology, DemandMatrix]:
    """Return a shipped (topology, demands) instance.

    fig1: four nodes, unit capacities, demands 1 for (1,3) and 0.9 for (3,4).
    toy: a seven-node reconstruction with capacity 5 and demands of 4; not a
    reference instance.
    """
    if name == "fig1":
        links = (
            Link("1-3", "1", "3", 1.0),
            Link("3-4", "3", "4", 1.0),
            Link("1-2", "1", "2", 1.0),
            Link("2-3", "2", "3", 1.0),
        )
        topo = Topology(nodes=("1", "2", "3", "4"), links=links)
        return topo, DemandMatrix({("1", "3"): 1.0, ("3", "4"): 0.9})
    if name == "toy":
        logger.warning("The toy instance is a reconstruction, not a reference topology")
        edges = [
            ("1", "2"), ("1", "3"), ("1", "4"), ("3", "2"), ("4", "2"), ("4", "7"),
            ("3", "7"), ("2", "7"), ("1", "5"), ("5", "6"), ("6", "7"), ("6", "3"),
        ]
        links = tuple(
            Link(str(i), src, dst, 5.0) for i, (src, dst) in enumerate(edges, start=1)
        )
        topo = Topology(nodes=tuple(str(n) for n in range(1, 8)), links=links)
        demands = {("1", "2"): 4.0, ("1", "3"): 4.0, ("3", "2"): 4.0, ("1", "7"): 4.0}
        return topo, DemandMatrix(demands)
    raise ConfigError(
        f"Invalid builtin instance: {name}. Valid options: {', '.join(sorted(BUILTIN_INSTANCES))}"
    )


def gravity_demands(
    out_mass: Mapping[str, float],
    in_mass: Mapping[str, float],
    total: float,
) -> DemandMatrix:
    """d_s^t proportional to out_mass_s * in_mass_t for s != t, summing to total.

    Raises:
        ConfigError: If a mass is negative, the masses sum to zero, or only
            self-pairs carry mass.
    """
    for masses in (out_mass, in_mass):
        if any(not (math.isfinite(m) and m >= 0) for m in masses.values()):
            raise ConfigError("Gravity masses must be finite and >= 0")
    out_total = sum(out_mass.values())
    in_total = sum(in_mass.values())
    if out_total <= 0 or in_total <= 0:
        raise ConfigError("Gravity masses must not all be zero")
    if not math.isfinite(total) or total < 0:
        raise ConfigError(f"Total demand must be finite and >= 0, got {total}")
    raw = {
        (src, dst): (o / out_total) * (i / in_total)
        for src, o in sorted(out_mass.items())
        for dst, i in sorted(in_mass.items())
        if src != dst and o > 0 and i > 0
    }
    kept = sum(raw.values())
    if kept <= 0:
        raise ConfigError("Gravity masses only produce self-pair demand")
    return DemandMatrix({pair: total * share / kept for pair, share in raw.items()})


def scale_demands(dm: DemandMatrix, k: float) -> DemandMatrix:
    """Multiply every demand by k > 0."""
    if not k > 0:
        raise DomainError(f"Load multiplier must be positive, got {k}")
    return dm.scaled(k)


def resolve_utility(data: Mapping[str, object], topo: Topology) -> UtilitySpec:
    """UtilitySpec from a config table; {"example": name} selects a named example."""
    if "example" in data:
        return UtilitySpec.named(str(data["example"]), topo)
    return UtilitySpec.from_config(data, topo)


def load_instance(cfg: ExperimentConfig) -> tuple[Topology, DemandMatrix]:
    """Topology and unscaled demands of a config."""
    if cfg.builtin is not None:
        return builtin_instance(cfg.builtin)
    assert cfg.topology is not None
    topo = load_topology(cfg.topology)
    if cfg.demands is not None:
        dm = load_demands(cfg.demands)
    else:
        assert cfg.gravity is not None
        rng = np.random.default_rng(cfg.seed)
        out_mass = cfg.gravity.out_mass or dict(zip(topo.nodes, rng.random(len(topo.nodes))))
        in_mass = cfg.gravity.in_mass or dict(zip(topo.nodes, rng.random(len(topo.nodes))))
        topo.check_nodes([*out_mass, *in_mass])
        dm = gravity_demands(out_mass, in_mass, cfg.gravity.total)
    dm.check_nodes(topo)
    return topo, dm


def default_dijkstra_tol(weights: Mapping[str, float]) -> float:
    """1e-9 relative to the total weight (absolute for weights summing below 1)."""
    return DIJKSTRA_TOLERANCE_PRESETS["real"] * max(1.0, sum(weights.values()))


def weights_for_dag(
    cfg: ExperimentConfig,
    first_weights: Mapping[str, float],
    spare: Mapping[str, float],
) -> tuple[dict[str, float], float]:
    """Weights and Dijkstra tolerance the DAG is built with.

    With integer_weights the rounded weights and the integer tolerance preset
    are used unless a tolerance is configured explicitly.
    """
    weights = dict(first_weights)
    tol = cfg.dijkstra_tol
    if cfg.integer_weights:
        weights = {k: float(v) for k, v in round_weights(weights, spare).items()}
        tol = DIJKSTRA_TOLERANCE_PRESETS["integer"] if tol is None else tol
    return weights, tol if tol is not None else default_dijkstra_tol(weights)


def find_operating_scale(
    topo: Topology,
    dm: DemandMatrix,
    spec: UtilitySpec,
    cfg: SolverConfig | None = None,
    max_steps: int = 40,
) -> tuple[float, float]:
    """Bisect the demand multiplier until the SPEF MLU lies in [0.95, 1.0].

    Returns:
        (multiplier, SPEF MLU at that multiplier).

    Raises:
        DomainError: If dm is all zero or no multiplier is found in max_steps.
    """
    if dm.total <= 0:
        raise DomainError("Cannot scale an all-zero demand matrix")
    low_mlu, high_mlu = OPERATING_MLU_RANGE

    def mlu_at(k: float) -> float:
        try:
            result = solve_first_weights(topo, scale_demands(dm, k), spec, cfg)
        except InfeasibleDemandError:
            return math.inf
        return max(result.utilization().values(), default=0.0)

    low, high = 0.0, 1.0
    for _ in range(max_steps):
        mlu = mlu_at(high)
        if low_mlu <= mlu <= high_mlu:
            return high, mlu
        if mlu > high_mlu:
            break
        low, high = high, 2.0 * high
    for _ in range(max_steps):
        k = 0.5 * (low + high)
        mlu = mlu_at(k)
        if low_mlu <= mlu <= high_mlu:
            logger.debug("Operating point: multiplier %.6g, MLU %.4f", k, mlu)
            return k, mlu
        if mlu > high_mlu:
            high = k
        else:
            low = k
    raise DomainError(f"No multiplier with MLU in {list(OPERATING_MLU_RANGE)} found")


@dataclass(frozen=True)
class RunArtifacts:
    """Everything one pipeline run produced."""

    scale: float
    topology: Topology
    demands: DemandMatrix
    utility: UtilitySpec
    first: SolveResult
    weights_used: dict[str, float]
    dijkstra_tol: float
    dag: EcmpDag
    second: SecondWeights
    tables: ForwardingTable
    spef_flow: FlowAssignment
    spef_metrics: MetricsReport
    ospf_flow: FlowAssignment
    ospf_tables: ForwardingTable
    ospf_metrics: MetricsReport
    validation: ValidationReport
    kkt: KktReport
    solver: SolverConfig = field(default_factory=SolverConfig)
    second_solver: SecondSolverConfig = field(default_factory=SecondSolverConfig)

    @property
    def converged(self) -> bool:
        """True if both weight solvers converged."""
        return self.first.converged and self.second.converged

    def summary(self) -> dict[str, object]:
        """Summary for summary.json."""
        return {
            "scale": self.scale,
            "settings": {
                "solver": self.solver.to_dict(),
                "second": self.second_solver.to_dict(),
            },
            "utility": self.utility.to_dict(),
            "converged": self.converged,
            "first": {**self.first.to_dict(), "utilization": self.first.utilization()},
            "weights_used": dict(self.weights_used),
            "dijkstra_tol": self.dijkstra_tol,
            "second": self.second.to_dict(),
            "spef": self.spef_metrics.to_dict(),
            "spef_flows": self.spef_flow.to_dict(),
            "ospf": {**self.ospf_metrics.to_dict(), "splitting": OSPF_SPLITTING},
            "validation": self.validation.to_dict(),
            "kkt": self.kkt.to_dict(),
        }


def write_json(data: object, path: Path) -> None:
    """Write JSON with stable formatting."""
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def write_csv(header: Sequence[str], rows: Sequence[Sequence[object]], path: Path) -> None:
    """Write a CSV file with a header row."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def weights_document(
    first: SolveResult,
    weights_used: Mapping[str, float] | None = None,
    second: SecondWeights | None = None,
    dijkstra_tol: float | None = None,
) -> dict[str, object]:
    """Content of weights.json; split and eval read it back."""
    data: dict[str, object] = {
        "first_weights": dict(first.first_weights),
        "spare": dict(first.spare),
        "target_loads": dict(first.optimal_flow),
        "converged": first.converged,
        "unique": first.unique,
    }
    if weights_used is not None:
        data["weights_used"] = dict(weights_used)
    if dijkstra_tol is not None:
        data["dijkstra_tol"] = dijkstra_tol
    if second is not None:
        data["second_weights"] = dict(second.v)
        data["second_converged"] = second.converged
    return data


class _ArtifactWriter:
    """Writes run artifacts as soon as each stage has produced them."""

    def __init__(self, directory: Path | None) -> None:
        self.directory = directory
        if directory is not None:
            try:
                directory.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise ConfigError(f"Cannot create output directory {directory}: {e}") from e

    def json(self, name: str, data: object) -> None:
        if self.directory is not None:
            write_json(data, self.directory / name)

    def csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
        if self.directory is not None:
            write_csv(header, rows, self.directory / name)

    def demands(self, dm: DemandMatrix) -> None:
        if self.directory is not None:
            write_demands(dm, self.directory / "demands.csv")

    def first(self, first: SolveResult) -> None:
        self.json("weights.json", weights_document(first))
        self.csv("trace_alg1.csv", TRACE_CSV_HEADER, [row.as_row() for row in first.trace])

    def metrics(self, name: str, report: MetricsReport) -> None:
        self.json(f"metrics_{name}.json", report.to_dict())
        self.csv(
            f"sorted_util_{name}.csv", SORTED_UTIL_CSV_HEADER, report.sorted_utilization_rows()
        )


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except SpefError as e:
        raise StageError(name, e) from e


def run_pipeline(
    cfg: ExperimentConfig, scale: float = 1.0, output_dir: Path | None = None
) -> RunArtifacts:
    """Run the full SPEF pipeline and the OSPF baseline for one demand multiplier.

    Stages: solve (first weights), dag, split (second weights), tables,
    distribution, baseline, metrics. Artifacts are written as soon as their
    stage completes, so a failing run keeps what it produced.

    Args:
        cfg: Experiment configuration.
        scale: Demand multiplier.
        output_dir: Artifact directory; cfg.output_dir when None. Nothing is
            written if both are None.

    Raises:
        StageError: Wrapping the failing stage's error.
    """
    writer = _ArtifactWriter(output_dir if output_dir is not None else cfg.output_dir)
    with _stage("load"):
        topo, base = load_instance(cfg)
        dm = scale_demands(base, scale)
        spec = resolve_utility(cfg.utility, topo)
    writer.demands(dm)

    with _stage("solve"):
        first = solve_first_weights(topo, dm, spec, cfg.solver)
    writer.first(first)

    weights_used, tol = weights_for_dag(cfg, first.first_weights, first.spare)

    with _stage("dag"):
        dag = build_ecmp_dag(topo, weights_used, dm.destinations, tol)
    with _stage("split"):
        second = solve_second_weights(
            topo,
            dm,
            dag,
            first.optimal_flow,
            gamma=cfg.second.gamma,
            epsilon=cfg.second.epsilon,
            max_iters=cfg.second.max_iters,
            halve_on_increase=cfg.second.halve_on_increase,
        )
    writer.json("weights.json", weights_document(first, weights_used, second, tol))
    writer.csv("trace_alg2.csv", SECOND_TRACE_CSV_HEADER, [r.as_row() for r in second.trace])

    with _stage("tables"):
        tables = build_forwarding_tables(topo, dag, second)
    writer.json("spef_tables.json", tables.to_list())

    with _stage("distribution"):
        spef_flow = traffic_distribution(topo, dm, dag, second)
    with _stage("baseline"):
        baseline_dag = ospf_dag(topo, dm)
        ospf_flow = even_split_distribution(topo, dm, baseline_dag)
        ospf_tables = even_forwarding_tables(topo, baseline_dag)
    with _stage("metrics"):
        spef_metrics = compute_metrics(topo, dm, spef_flow, dag)
        ospf_metrics = compute_metrics(topo, dm, ospf_flow, baseline_dag)
        validation = validate_flow(topo, dm, spef_flow, tol=1e-6 * max(1.0, topo.max_capacity))
        kkt = verify_kkt(topo, dm, spec, first.first_weights, first.spare, first.flow)
    writer.metrics("spef", spef_metrics)
    writer.metrics("ospf", ospf_metrics)

    artifacts = RunArtifacts(
        scale=scale,
        topology=topo,
        demands=dm,
        utility=spec,
        first=first,
        weights_used=weights_used,
        dijkstra_tol=tol,
        dag=dag,
        second=second,
        tables=tables,
        spef_flow=spef_flow,
        spef_metrics=spef_metrics,
        ospf_flow=ospf_flow,
        ospf_tables=ospf_tables,
        ospf_metrics=ospf_metrics,
        validation=validation,
        kkt=kkt,
        solver=cfg.solver,
        second_solver=cfg.second,
    )
    writer.json("summary.json", artifacts.summary())
    if not artifacts.converged:
        logger.warning("Run at multiplier %g did not fully converge", scale)
    return artifacts


@dataclass(frozen=True)
class SweepPoint:
    """One load multiplier of a sweep; SPEF fields are None when infeasible."""

    scale: float
    feasible: bool
    converged: bool
    spef_mlu: float | None
    spef_utility: float | None
    ospf_mlu: float
    ospf_utility: float
    error: str | None = None

    def as_row(self) -> tuple[object, ...]:
        """CSV row in SWEEP_CSV_HEADER order."""
        return (
            self.scale,
            self.feasible,
            self.converged,
            "" if self.spef_mlu is None else self.spef_mlu,
            "" if self.spef_utility is None else self.spef_utility,
            self.ospf_mlu,
            self.ospf_utility,
        )


def _sweep_point(cfg: ExperimentConfig, scale: float) -> SweepPoint:
    directory = cfg.output_dir / f"scale_{scale:g}" if cfg.output_dir is not None else None
    try:
        run = run_pipeline(cfg, scale, directory)
    except StageError as e:
        if not isinstance(e.cause, InfeasibleDemandError):
            raise
        topo, base = load_instance(cfg)
        dm = scale_demands(base, scale)
        baseline = compute_metrics(topo, dm, even_split_distribution(topo, dm, ospf_dag(topo, dm)))
        logger.warning("Multiplier %g is infeasible for SPEF: %s", scale, e.cause)
        return SweepPoint(
            scale, False, False, None, None, baseline.mlu, baseline.normalized_utility, str(e)
        )
    return SweepPoint(
        scale=scale,
        feasible=True,
        converged=run.converged,
        spef_mlu=run.spef_metrics.mlu,
        spef_utility=run.spef_metrics.normalized_utility,
        ospf_mlu=run.ospf_metrics.mlu,
        ospf_utility=run.ospf_metrics.normalized_utility,
    )


def run_sweep(cfg: ExperimentConfig) -> list[SweepPoint]:
    """Run the pipeline for every multiplier in cfg.scales, cfg.workers at a time.

    Points come back in multiplier order. SPEF-infeasible points are
    recorded with OSPF metrics only.
    """
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        points = list(pool.map(lambda k: _sweep_point(cfg, k), cfg.scales))
    if cfg.output_dir is not None:
        write_csv(SWEEP_CSV_HEADER, [p.as_row() for p in points], cfg.output_dir / "sweep.csv")
    return points


@dataclass(frozen=True)
class WeightsDocument:
    """weights.json as read back by the split and eval subcommands."""

    first_weights: dict[str, float]
    spare: dict[str, float]
    target_loads: dict[str, float]
    second_weights: dict[str, float] | None = None

    def to_dict(self) -> dict[str, object]:
        """Convert to the weights.json layout."""
        data: dict[str, object] = {
            "first_weights": dict(self.first_weights),
            "spare": dict(self.spare),
            "target_loads": dict(self.target_loads),
        }
        if self.second_weights is not None:
            data["second_weights"] = dict(self.second_weights)
        return data


def load_weights_document(path: Path) -> WeightsDocument:
    """Read a weights.json written by a solve or run."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read weights file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Weights file {path} is not valid JSON: {e}") from e
    try:
        second = data.get("second_weights")
        return WeightsDocument(
            first_weights=_float_map(data["first_weights"]) or {},
            spare=_float_map(data["spare"]) or {},
            target_loads=_float_map(data["target_loads"]) or {},
            second_weights=_float_map(second),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Weights file {path} is missing or has bad entries: {e}") from e


def _load_run_inputs(
    cfg: ExperimentConfig, scale: float
) -> tuple[Topology, DemandMatrix, UtilitySpec]:
    topo, base = load_instance(cfg)
    return topo, scale_demands(base, scale), resolve_utility(cfg.utility, topo)


def run_solve(cfg: ExperimentConfig, output_dir: Path | None = None) -> SolveResult:
    """First weights only, at the first configured multiplier."""
    writer = _ArtifactWriter(output_dir if output_dir is not None else cfg.output_dir)
    with _stage("load"):
        topo, dm, spec = _load_run_inputs(cfg, cfg.scales[0])
    with _stage("solve"):
        first = solve_first_weights(topo, dm, spec, cfg.solver)
    writer.first(first)
    return first


@dataclass(frozen=True)
class SplitOutcome:
    """Second weights and forwarding tables for given first weights."""

    weights_used: dict[str, float]
    dijkstra_tol: float
    dag: EcmpDag
    second: SecondWeights
    tables: ForwardingTable


def run_split(
    cfg: ExperimentConfig, doc: WeightsDocument, output_dir: Path | None = None
) -> SplitOutcome:
    """DAGs, second weights and forwarding tables from a weights document."""
    writer = _ArtifactWriter(output_dir if output_dir is not None else cfg.output_dir)
    with _stage("load"):
        topo, dm, _ = _load_run_inputs(cfg, cfg.scales[0])
    weights_used, tol = weights_for_dag(cfg, doc.first_weights, doc.spare)
    with _stage("dag"):
        dag = build_ecmp_dag(topo, weights_used, dm.destinations, tol)
    with _stage("split"):
        second = solve_second_weights(
            topo,
            dm,
            dag,
            doc.target_loads,
            gamma=cfg.second.gamma,
            epsilon=cfg.second.epsilon,
            max_iters=cfg.second.max_iters,
            halve_on_increase=cfg.second.halve_on_increase,
        )
    with _stage("tables"):
        tables = build_forwarding_tables(topo, dag, second)
    writer.json(
        "weights.json",
        {
            **doc.to_dict(),
            "weights_used": weights_used,
            "dijkstra_tol": tol,
            "second_weights": dict(second.v),
            "second_converged": second.converged,
        },
    )
    writer.csv("trace_alg2.csv", SECOND_TRACE_CSV_HEADER, [r.as_row() for r in second.trace])
    writer.json("spef_tables.json", tables.to_list())
    return SplitOutcome(weights_used, tol, dag, second, tables)


def run_eval(
    cfg: ExperimentConfig, doc: WeightsDocument, output_dir: Path | None = None
) -> tuple[MetricsReport, MetricsReport]:
    """SPEF metrics under the document's weights and the OSPF baseline metrics."""
    if doc.second_weights is None:
        raise ConfigError("Weights file has no second_weights; run split first")
    writer = _ArtifactWriter(output_dir if output_dir is not None else cfg.output_dir)
    with _stage("load"):
        topo, dm, _ = _load_run_inputs(cfg, cfg.scales[0])
    weights_used, tol = weights_for_dag(cfg, doc.first_weights, doc.spare)
    with _stage("distribution"):
        dag = build_ecmp_dag(topo, weights_used, dm.destinations, tol)
        spef_flow = traffic_distribution(topo, dm, dag, doc.second_weights)
    with _stage("baseline"):
        baseline_dag = ospf_dag(topo, dm)
        ospf_flow = even_split_distribution(topo, dm, baseline_dag)
    with _stage("metrics"):
        spef = compute_metrics(topo, dm, spef_flow, dag)
        ospf = compute_metrics(topo, dm, ospf_flow, baseline_dag)
    writer.metrics("spef", spef)
    writer.metrics("ospf", ospf)
    return spef, ospf
