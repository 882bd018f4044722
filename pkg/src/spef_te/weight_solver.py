"""First link weights: dual decomposition of the TE utility problem.

The solver alternates closed-form link subproblems with shortest-path
routing per destination and a projected subgradient step on the link
weights. The optimal spare capacities, and with them the target loads
f* = c - s*, are recovered from the link side of the decomposition.
"""

import itertools
import math
from collections.abc import Mapping
from dataclasses import dataclass, field, fields

import networkx as nx
import numpy as np
from scipy.optimize import linprog

from .errors import ConfigError, DomainError, InfeasibleDemandError, RoutingError, SamplingError
from .log_config import get_logger
from .net_model import DemandMatrix, FlowAssignment, Topology
from .objectives import (
    UtilitySpec,
    link_subproblem_spares,
    link_utilities,
    marginal_utilities,
    spare_floor,
    utility_curvatures,
)

logger = get_logger(__name__)

STEP_SCHEDULES: frozenset[str] = frozenset({"constant", "diminishing"})
WEIGHT_SPACES: frozenset[str] = frozenset({"root", "linear"})
TRACE_CSV_HEADER = ("iteration", "gap", "dual_objective")

DEFAULT_MAX_ITERS = 2000
DEFAULT_GAP_TOL = 1e-6
DEFAULT_REFINE_TOL = 1e-10
DEFAULT_REFINE_MAX_ITERS = 500
DEFAULT_INFEASIBILITY_MARGIN = 0.02
DEFAULT_KKT_TOL = 1e-9
DEFAULT_BALANCE_SAMPLES = 200
DEFAULT_BALANCE_TOL = 1e-7
PATH_ENUMERATION_CAP = 10_000

_TIE_RTOL = 1e-12
_DROP_FRACTION = 1e-15

LinkPath = tuple[int, ...]
Pair = tuple[str, str]


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the first-weight solver.

    gamma=None means 1 / max capacity. weight_space "root" applies the
    projected step to w^(1/beta) instead of w; at beta = 1 both coincide.
    """

    step_schedule: str = "constant"
    gamma: float | None = None
    max_iters: int = DEFAULT_MAX_ITERS
    gap_tol: float = DEFAULT_GAP_TOL
    initial_weights: str | Mapping[str, float] = "invcap"
    weight_space: str = "root"
    refine: bool = True
    refine_tol: float = DEFAULT_REFINE_TOL
    refine_max_iters: int = DEFAULT_REFINE_MAX_ITERS
    infeasibility_margin: float = DEFAULT_INFEASIBILITY_MARGIN

    def __post_init__(self) -> None:
        if self.step_schedule not in STEP_SCHEDULES:
            raise ConfigError(
                f"Invalid step schedule: {self.step_schedule}. "
                f"Valid options: {', '.join(sorted(STEP_SCHEDULES))}"
            )
        if self.weight_space not in WEIGHT_SPACES:
            raise ConfigError(
                f"Invalid weight space: {self.weight_space}. "
                f"Valid options: {', '.join(sorted(WEIGHT_SPACES))}"
            )
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.gap_tol > 0:
            raise ConfigError(f"gap_tol must be positive, got {self.gap_tol}")
        if not self.refine_tol > 0 or self.refine_max_iters < 1:
            raise ConfigError("Refinement needs a positive tolerance and >= 1 iteration")
        if isinstance(self.initial_weights, str):
            if self.initial_weights != "invcap":
                raise ConfigError(
                    f"Invalid initial weights: {self.initial_weights}. "
                    "Use 'invcap' or a link -> weight table"
                )
        else:
            bad = sorted(k for k, v in self.initial_weights.items() if not v >= 0)
            if bad:
                raise ConfigError(f"Initial weights must be >= 0 on link(s): {', '.join(bad)}")

    def step(self, k: int, topology: Topology) -> float:
        """Step size of iteration k (1-based)."""
        gamma0 = self.gamma if self.gamma is not None else 1.0 / topology.max_capacity
        return gamma0 / k if self.step_schedule == "diminishing" else gamma0

    def to_dict(self) -> dict[str, object]:
        """Convert to the experiment-config layout."""
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        if not isinstance(self.initial_weights, str):
            data["initial_weights"] = dict(self.initial_weights)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "SolverConfig":
        """Build from a config table, rejecting unknown keys."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown solver setting(s): {', '.join(unknown)}")
        try:
            return cls(**data)  # type: ignore[arg-type]
        except TypeError as e:
            raise ConfigError(f"Invalid solver settings: {e}") from e


@dataclass(frozen=True)
class TraceRow:
    """One projected subgradient step on the link prices."""

    iteration: int
    gap: float
    dual_objective: float

    def as_row(self) -> tuple[int, float, float]:
        """CSV row in TRACE_CSV_HEADER order."""
        return (self.iteration, self.gap, self.dual_objective)


@dataclass(frozen=True)
class SolveResult:
    """First weights, optimal spare capacities and target loads.

    flow is a per-destination assignment realizing optimal_flow when the
    refinement ran; otherwise the averaged (or, with saturated links, the
    last) routing iterate.
    """

    first_weights: dict[str, float]
    spare: dict[str, float]
    optimal_flow: dict[str, float]
    trace: tuple[TraceRow, ...]
    converged: bool
    flow: FlowAssignment
    iterations: int
    unique: bool = True
    refined: bool = False

    def utilization(self) -> dict[str, float]:
        """Target utilization f*_ij / c_ij per link."""
        topo = self.flow.topology
        return {
            link_id: self.optimal_flow[link_id] / topo.link(link_id).capacity
            for link_id in topo.link_ids
        }

    def to_dict(self) -> dict[str, object]:
        """Convert result to dictionary for JSON output."""
        return {
            "weights": dict(self.first_weights),
            "spare": dict(self.spare),
            "target_loads": dict(self.optimal_flow),
            "converged": self.converged,
            "unique": self.unique,
            "refined": self.refined,
            "iterations": self.iterations,
        }


@dataclass(frozen=True)
class KktReport:
    """Worst residual of each optimality-condition family."""

    capacity: float
    stationarity: float
    reduced_cost: float

    @property
    def worst(self) -> float:
        """Largest residual over all families."""
        return max(self.capacity, self.stationarity, self.reduced_cost)

    def within(self, tol: float) -> bool:
        """Return True if every family is below tol."""
        return self.worst < tol

    def to_dict(self) -> dict[str, float]:
        """Convert report to dictionary for JSON output."""
        return {
            "capacity": self.capacity,
            "stationarity": self.stationarity,
            "reduced_cost": self.reduced_cost,
        }


@dataclass(frozen=True)
class BalanceReport:
    """Outcome of sampling feasible flows against a candidate optimum."""

    passed: bool
    worst_deviation: float
    samples: int
    worst_sample: int | None = None

    def to_dict(self) -> dict[str, object]:
        """Convert report to dictionary for JSON output."""
        return {
            "passed": self.passed,
            "worst_deviation": self.worst_deviation,
            "samples": self.samples,
            "worst_sample": self.worst_sample,
        }


@dataclass(frozen=True)
class _ShortestTree:
    """Single shortest path per node toward dest; order is a topological order from dest."""

    dest: str
    dist: dict[str, float]
    next_link: dict[str, int]
    order: tuple[str, ...]
    topology: Topology = field(repr=False)

    def path(self, src: str) -> LinkPath:
        links = []
        node = src
        while node != self.dest:
            index = self.next_link[node]
            links.append(index)
            node = self.topology.links[index].dst
        return tuple(links)


@dataclass
class _DualRun:
    trace: list[TraceRow]
    stopped_on_gap: bool
    spares: list[np.ndarray]
    routed: list[dict[str, np.ndarray]]
    paths: list[dict[Pair, LinkPath]]

    @property
    def window(self) -> slice:
        return slice(len(self.spares) // 2, None)

    def average_spare(self) -> np.ndarray:
        return np.mean(self.spares[self.window], axis=0)

    def average_routing(self, destinations: tuple[str, ...]) -> dict[str, np.ndarray]:
        routed = self.routed[self.window]
        return {dest: np.mean([r[dest] for r in routed], axis=0) for dest in destinations}

    def average_paths(self, dm: DemandMatrix) -> dict[Pair, dict[LinkPath, float]]:
        chosen = self.paths[self.window]
        averaged: dict[Pair, dict[LinkPath, float]] = {}
        for src, dest, demand in dm.pairs():
            share = demand / len(chosen)
            flows: dict[LinkPath, float] = {}
            for paths in chosen:
                path = paths[(src, dest)]
                flows[path] = flows.get(path, 0.0) + share
            averaged[(src, dest)] = flows
        return averaged


def shortest_distances(topo: Topology, weights: np.ndarray, dest: str) -> dict[str, float]:
    """Shortest distance from every node that can reach dest, under link weights."""
    weight_of = dict(zip(topo.link_ids, np.asarray(weights, dtype=float).tolist()))
    return nx.single_source_dijkstra_path_length(
        topo.reverse_graph,
        dest,
        weight=lambda u, v, keyed: min(weight_of[k] for k in keyed),
    )


def _shortest_tree(topo: Topology, weights: np.ndarray, dest: str) -> _ShortestTree:
    dist = shortest_distances(topo, weights, dest)
    next_link: dict[str, int] = {}
    attached = {dest}
    order = [dest]
    pending = sorted((n for n in dist if n != dest), key=lambda n: (dist[n], n))
    while pending:
        waiting = []
        for node in pending:
            bound = dist[node] + _TIE_RTOL * max(1.0, abs(dist[node]))
            choice = next(
                (
                    link
                    for link in topo.out_links(node)
                    if link.dst in attached
                    and weights[topo.index(link.id)] + dist[link.dst] <= bound
                ),
                None,
            )
            if choice is None:
                waiting.append(node)
                continue
            next_link[node] = topo.index(choice.id)
            attached.add(node)
            order.append(node)
        if len(waiting) == len(pending):
            raise RoutingError(f"Cannot build a shortest path tree toward {dest}")
        pending = waiting
    return _ShortestTree(dest, dist, next_link, tuple(order), topo)


def _route(topo: Topology, tree: _ShortestTree, demands: Mapping[str, float]) -> np.ndarray:
    missing = sorted(src for src, d in demands.items() if d > 0 and src not in tree.dist)
    if missing:
        raise RoutingError(
            f"Demand source(s) {', '.join(missing)} cannot reach destination {tree.dest}"
        )
    through = dict.fromkeys(tree.order, 0.0)
    for src, demand in demands.items():
        if demand > 0:
            through[src] += demand
    loads = np.zeros(len(topo.links))
    for node in reversed(tree.order[1:]):
        amount = through[node]
        if amount:
            index = tree.next_link[node]
            loads[index] += amount
            through[topo.links[index].dst] += amount
    return loads


def route_to_destination(
    topo: Topology,
    w: Mapping[str, float],
    dest: str,
    demands: Mapping[str, float],
) -> dict[str, float]:
    """Route every source's demand toward dest along one shortest path.

    Among equal-cost next hops the lexicographically smallest head node wins
    (then the smallest link id).

    Args:
        topo: The network.
        w: Non-negative link weights; absent links weigh 0.
        dest: Destination node.
        demands: Demand per source node toward dest.

    Returns:
        Flow toward dest on every link.

    Raises:
        DomainError: If a weight is negative.
        RoutingError: If a source with positive demand cannot reach dest.
    """
    topo.check_nodes([dest, *demands])
    weights = topo.vector(w)
    if np.any(weights < 0):
        raise DomainError("Link weights must be non-negative")
    if dest in demands and demands[dest] > 0:
        raise DomainError(f"Destination {dest} cannot have demand toward itself")
    return topo.as_mapping(_route(topo, _shortest_tree(topo, weights, dest), demands))


def dual_gap(
    topo: Topology,
    w: Mapping[str, float],
    s: Mapping[str, float],
    f_aggregate: Mapping[str, float],
) -> float:
    """Return sum_ij w_ij (f_ij + s_ij - c_ij)."""
    return float(
        topo.vector(w) @ (topo.vector(f_aggregate) + topo.vector(s) - topo.capacities)
    )


def _initial_weights(topo: Topology, cfg: SolverConfig) -> np.ndarray:
    invcap = 1.0 / topo.capacities
    if isinstance(cfg.initial_weights, str):
        return invcap
    explicit = topo.vector(cfg.initial_weights, default=math.nan)
    return np.where(np.isnan(explicit), invcap, explicit)


def _lagrangian(
    spec_beta: float,
    q: np.ndarray,
    caps: np.ndarray,
    w: np.ndarray,
    s: np.ndarray,
    routing_cost: float,
) -> float:
    values = link_utilities(spec_beta, q, np.maximum(s, spare_floor(caps)))
    return float(values.sum() - w @ s + w @ caps - routing_cost)


def _run_dual_decomposition(
    topo: Topology, dm: DemandMatrix, spec: UtilitySpec, cfg: SolverConfig
) -> _DualRun:
    caps = topo.capacities
    q = spec.q_vector(topo)
    beta = spec.beta
    in_root_space = cfg.weight_space == "root" and beta > 0
    w = _initial_weights(topo, cfg)
    y = np.power(w, 1.0 / beta) if in_root_space else w.copy()

    run = _DualRun(trace=[], stopped_on_gap=False, spares=[], routed=[], paths=[])
    for k in range(cfg.max_iters):
        w = np.power(y, beta) if in_root_space else y
        if not np.all(np.isfinite(w)):
            raise InfeasibleDemandError("Link weights diverged; demand exceeds capacity")
        s = link_subproblem_spares(beta, q, w, caps)
        routed: dict[str, np.ndarray] = {}
        paths: dict[Pair, LinkPath] = {}
        routing_cost = 0.0
        for dest in dm.destinations:
            tree = _shortest_tree(topo, w, dest)
            demands = dm.toward(dest)
            routed[dest] = _route(topo, tree, demands)
            for src, demand in demands.items():
                routing_cost += demand * tree.dist[src]
                paths[(src, dest)] = tree.path(src)
        loads = sum(routed.values(), np.zeros(len(caps)))
        gap = float(w @ (loads + s - caps))
        run.trace.append(TraceRow(k, gap, _lagrangian(beta, q, caps, w, s, routing_cost)))
        run.spares.append(s)
        run.routed.append(routed)
        run.paths.append(paths)
        if abs(gap) < cfg.gap_tol:
            run.stopped_on_gap = True
            logger.debug("Dual gap %.3g below tolerance after %d iteration(s)", gap, k + 1)
            break
        y = np.maximum(0.0, y - cfg.step(k + 1, topo) * (caps - loads - s))
    return run


def _path_loads(n_links: int, flows: Mapping[Pair, Mapping[LinkPath, float]]) -> np.ndarray:
    loads = np.zeros(n_links)
    for paths in flows.values():
        for path, amount in paths.items():
            loads[list(path)] += amount
    return loads


def _path_length(w: np.ndarray, path: LinkPath) -> float:
    return float(w[list(path)].sum())


def _newton_shift(
    paths: dict[LinkPath, float],
    candidate: LinkPath,
    loads: np.ndarray,
    caps: np.ndarray,
    beta: float,
    q: np.ndarray,
) -> float:
    """Move flow of one pair toward its shortest path; return worst relative reduced cost."""
    w = marginal_utilities(beta, q, caps - loads)
    lengths = {path: _path_length(w, path) for path in paths}
    lengths.setdefault(candidate, _path_length(w, candidate))
    best = min(sorted(lengths), key=lengths.__getitem__)
    paths.setdefault(best, 0.0)
    total = sum(paths.values())
    worst = 0.0
    for path in sorted(paths):
        if path == best:
            continue
        spare = caps - loads
        w = marginal_utilities(beta, q, spare)
        best_length = _path_length(w, best)
        excess = _path_length(w, path) - best_length
        worst = max(worst, excess / best_length)
        gaining = sorted(set(best) - set(path))
        losing = sorted(set(path) - set(best))
        moved = 0.0
        if excess > 0:
            touched = gaining + losing
            curvature = float(utility_curvatures(beta, q[touched], spare[touched]).sum())
            moved = min(paths[path], excess / curvature)
            if gaining:
                moved = min(moved, 0.5 * float(spare[gaining].min()))
        if paths[path] - moved <= _DROP_FRACTION * total:
            moved = paths[path]
        paths[path] -= moved
        paths[best] += moved
        loads[gaining] += moved
        loads[losing] -= moved
        if paths[path] <= 0:
            del paths[path]
    return worst


def _refine(
    topo: Topology,
    dm: DemandMatrix,
    spec: UtilitySpec,
    start: dict[Pair, dict[LinkPath, float]],
    cfg: SolverConfig,
) -> tuple[dict[Pair, dict[LinkPath, float]], bool, int] | None:
    """Path-based projected Newton iterations from a demand-conserving start.

    Returns None when the start is not strictly inside capacity.
    """
    caps = topo.capacities
    q = spec.q_vector(topo)
    flows = {pair: dict(paths) for pair, paths in start.items()}
    loads = _path_loads(len(caps), flows)
    if np.any(loads >= caps):
        saturated = [topo.link_ids[i] for i in np.flatnonzero(loads >= caps)]
        logger.warning(
            "Skipping refinement: averaged routing saturates link(s) %s", ", ".join(saturated)
        )
        return None
    worst = math.inf
    for sweep in range(cfg.refine_max_iters):
        worst = 0.0
        for dest in dm.destinations:
            tree = _shortest_tree(topo, marginal_utilities(spec.beta, q, caps - loads), dest)
            for src in sorted(dm.toward(dest)):
                worst = max(
                    worst,
                    _newton_shift(flows[(src, dest)], tree.path(src), loads, caps, spec.beta, q),
                )
        if worst <= cfg.refine_tol:
            logger.debug("Refinement converged after %d sweep(s)", sweep + 1)
            return flows, True, sweep + 1
    logger.warning(
        "Refinement stopped after %d sweeps with relative reduced cost %.3g",
        cfg.refine_max_iters,
        worst,
    )
    return flows, False, cfg.refine_max_iters


def _flow_from_paths(
    topo: Topology, flows: Mapping[Pair, Mapping[LinkPath, float]]
) -> FlowAssignment:
    per_dest: dict[str, dict[str, float]] = {}
    for (_, dest), paths in flows.items():
        links = per_dest.setdefault(dest, {})
        for path, amount in paths.items():
            for index in path:
                link_id = topo.link_ids[index]
                links[link_id] = links.get(link_id, 0.0) + amount
    return FlowAssignment(topo, per_dest)


def _flow_from_vectors(topo: Topology, routed: Mapping[str, np.ndarray]) -> FlowAssignment:
    return FlowAssignment(
        topo,
        {
            dest: {lid: float(x) for lid, x in zip(topo.link_ids, loads) if x > 0}
            for dest, loads in routed.items()
        },
    )


def _warn_saturated(topo: Topology, saturated: np.ndarray) -> None:
    logger.warning(
        "Saturated link(s) %s: optimal flow is not unique",
        ", ".join(topo.link_ids[i] for i in np.flatnonzero(saturated)),
    )


def _min_hop_shortcut(topo: Topology, dm: DemandMatrix, spec: UtilitySpec) -> SolveResult | None:
    """beta = 0: shortest paths under w = q are optimal if they fit in capacity."""
    caps = topo.capacities
    q = spec.q_vector(topo)
    routed: dict[str, np.ndarray] = {}
    routing_cost = 0.0
    for dest in dm.destinations:
        tree = _shortest_tree(topo, q, dest)
        demands = dm.toward(dest)
        routed[dest] = _route(topo, tree, demands)
        routing_cost += sum(d * tree.dist[src] for src, d in demands.items())
    loads = sum(routed.values(), np.zeros(len(caps)))
    if np.any(loads > caps * (1.0 + _TIE_RTOL)):
        return None
    spare = np.maximum(0.0, caps - loads)
    saturated = spare < spare_floor(caps)
    if saturated.any():
        _warn_saturated(topo, saturated)
    row = TraceRow(0, float(q @ (loads + spare - caps)), float(q @ caps - routing_cost))
    return SolveResult(
        first_weights=topo.as_mapping(q),
        spare=topo.as_mapping(spare),
        optimal_flow=topo.as_mapping(caps - spare),
        trace=(row,),
        converged=True,
        flow=_flow_from_vectors(topo, routed),
        iterations=1,
        unique=not saturated.any(),
    )


def _min_hop_program(topo: Topology, dm: DemandMatrix, spec: UtilitySpec) -> SolveResult:
    """beta = 0 when w = q overloads a link: the min-cost multicommodity LP.

    Variables are per-destination link flows. w* = q + mu, where mu are the
    capacity duals, so the optimal flow uses only shortest paths under w*.

    Raises:
        InfeasibleDemandError: If no routing fits in capacity.
    """
    caps = topo.capacities
    q = spec.q_vector(topo)
    dests = dm.destinations
    n_links = len(caps)
    rows: list[np.ndarray] = []
    b_eq: list[float] = []
    for k, dest in enumerate(dests):
        demands = dm.toward(dest)
        for node in topo.nodes:
            if node == dest:
                continue
            row = np.zeros(len(dests) * n_links)
            for link in topo.out_links(node):
                row[k * n_links + topo.index(link.id)] += 1.0
            for link in topo.links:
                if link.dst == node:
                    row[k * n_links + topo.index(link.id)] -= 1.0
            rows.append(row)
            b_eq.append(demands.get(node, 0.0))
    a_ub = np.tile(np.eye(n_links), len(dests))
    result = linprog(
        np.tile(q, len(dests)),
        A_ub=a_ub,
        b_ub=caps,
        A_eq=np.array(rows),
        b_eq=b_eq,
        bounds=(0, None),
        method="highs",
    )
    if result.status == 2:
        raise InfeasibleDemandError("No routing of the demand fits in link capacity")
    if not result.success:
        raise InfeasibleDemandError(f"Minimum-hop program failed: {result.message}")

    per_dest = result.x.reshape(len(dests), n_links)
    per_dest[per_dest < _DROP_FRACTION * max(1.0, dm.total)] = 0.0
    routed = {dest: per_dest[k] for k, dest in enumerate(dests)}
    loads = per_dest.sum(axis=0)
    spare = np.clip(caps - loads, 0.0, caps)
    weights = q + np.maximum(0.0, -result.ineqlin.marginals)
    saturated = spare < spare_floor(caps)
    if saturated.any():
        _warn_saturated(topo, saturated)
    row = TraceRow(0, float(weights @ (loads + spare - caps)), float(q @ spare))
    logger.debug("Minimum-hop program solved; %d link(s) priced above q", int((weights > q).sum()))
    return SolveResult(
        first_weights=topo.as_mapping(weights),
        spare=topo.as_mapping(spare),
        optimal_flow=topo.as_mapping(caps - spare),
        trace=(row,),
        converged=True,
        flow=_flow_from_vectors(topo, routed),
        iterations=1,
        unique=not saturated.any(),
    )


def solve_first_weights(
    topo: Topology,
    dm: DemandMatrix,
    spec: UtilitySpec,
    cfg: SolverConfig | None = None,
) -> SolveResult:
    """Compute the first link weights w* and target loads f* = c - s*.

    Each iteration solves every link subproblem, routes every destination's
    demand on a shortest path tree and takes a projected subgradient step.
    Iteration stops on |gap| < gap_tol or after max_iters; s* is then the
    last link-subproblem solution (gap stop) or the average over the trailing
    half of the iterations. For beta > 0 the refinement stage drives the
    averaged routing to an exact optimum and sets w* = V'(s*). beta = 0 is a
    linear program; when w = q overloads a link it is solved directly.

    Args:
        topo: The network.
        dm: Offered demands.
        spec: Utility family parameters.
        cfg: Solver settings; defaults apply when None.

    Returns:
        The solve result with the per-iteration dual trace.

    Raises:
        RoutingError: If some demand cannot reach its destination.
        InfeasibleDemandError: If the averaged routing exceeds capacity by more
            than the configured margin or the weights diverge.
    """
    cfg = cfg or SolverConfig()
    dm.check_nodes(topo)
    topo.check_links(spec.q)
    caps = topo.capacities
    q = spec.q_vector(topo)
    floor = spare_floor(caps)

    if spec.beta == 0.0:
        shortcut = _min_hop_shortcut(topo, dm, spec)
        if shortcut is not None:
            logger.debug("Minimum-cost routing under w = q fits capacity")
            return shortcut
        return _min_hop_program(topo, dm, spec)

    run = _run_dual_decomposition(topo, dm, spec, cfg)
    iterations = len(run.trace)
    routing = run.average_routing(dm.destinations)
    averaged_loads = sum(routing.values(), np.zeros(len(caps)))
    overloaded = averaged_loads > caps * (1.0 + cfg.infeasibility_margin)
    if overloaded.any():
        names = ", ".join(topo.link_ids[i] for i in np.flatnonzero(overloaded))
        raise InfeasibleDemandError(f"Demand exceeds capacity on link(s): {names}")

    if spec.beta > 0 and cfg.refine:
        refined = _refine(topo, dm, spec, run.average_paths(dm), cfg)
        if refined is not None:
            flows, refine_converged, _ = refined
            loads = _path_loads(len(caps), flows)
            spare = caps - loads
            return SolveResult(
                first_weights=topo.as_mapping(marginal_utilities(spec.beta, q, spare)),
                spare=topo.as_mapping(spare),
                optimal_flow=topo.as_mapping(loads),
                trace=tuple(run.trace),
                converged=refine_converged,
                flow=_flow_from_paths(topo, flows),
                iterations=iterations,
                refined=True,
            )

    spare = run.spares[-1] if run.stopped_on_gap else run.average_spare()
    spare = np.clip(spare, 0.0, caps)
    saturated = spare < floor
    if saturated.any():
        _warn_saturated(topo, saturated)
        flow = _flow_from_vectors(topo, run.routed[-1])
    else:
        flow = _flow_from_vectors(topo, routing)
    weights = marginal_utilities(spec.beta, q, np.maximum(spare, floor))
    if not run.stopped_on_gap:
        logger.warning(
            "Dual decomposition did not reach the gap tolerance in %d iterations", iterations
        )
    return SolveResult(
        first_weights=topo.as_mapping(weights),
        spare=topo.as_mapping(spare),
        optimal_flow=topo.as_mapping(caps - spare),
        trace=tuple(run.trace),
        converged=run.stopped_on_gap,
        flow=flow,
        iterations=iterations,
        unique=not saturated.any(),
    )


def verify_kkt(
    topo: Topology,
    dm: DemandMatrix,
    spec: UtilitySpec,
    w: Mapping[str, float],
    s: Mapping[str, float],
    fa: FlowAssignment,
    tol: float = DEFAULT_KKT_TOL,
) -> KktReport:
    """Evaluate the optimality conditions of the TE problem at (w, s, fa).

    Node potentials are shortest distances toward each destination under w.
    Residual families: capacity |c - sum_t f^t - s|; stationarity |V'(s) - w|
    where s > tol, (V'(s) - w)_+ elsewhere; reduced cost |w_ij + nu_j - nu_i|
    on links carrying more than tol toward a destination.
    """
    dm.check_nodes(topo)
    caps = topo.capacities
    q = spec.q_vector(topo)
    weights = topo.vector(w)
    spare = topo.vector(s)

    capacity = float(np.abs(caps - fa.aggregate_vector() - spare).max(initial=0.0))

    positive = spare > tol
    with np.errstate(divide="ignore"):
        marginals = marginal_utilities(spec.beta, q, np.maximum(spare, 0.0))
    stationarity = float(
        max(
            np.abs(marginals - weights)[positive].max(initial=0.0),
            np.maximum(0.0, marginals - weights)[~positive].max(initial=0.0),
        )
    )

    reduced = 0.0
    for dest, flows in fa.per_dest.items():
        dist = shortest_distances(topo, weights, dest)
        for link_id, amount in flows.items():
            if amount <= tol:
                continue
            link = topo.link(link_id)
            if link.src not in dist or link.dst not in dist:
                reduced = math.inf
                continue
            residual = weights[topo.index(link_id)] + dist[link.dst] - dist[link.src]
            reduced = max(reduced, abs(residual))
    return KktReport(capacity=capacity, stationarity=stationarity, reduced_cost=float(reduced))


def _balance_sum(beta: float, q: np.ndarray, s: np.ndarray, s_star: np.ndarray) -> float:
    return float(np.sum(q * (s - s_star) / np.power(s_star, beta)))


def balance_deviation(
    spec: UtilitySpec,
    topo: Topology,
    spare: Mapping[str, float],
    spare_star: Mapping[str, float],
) -> float:
    """Return sum_ij q_ij (s_ij - s*_ij) / (s*_ij)^beta.

    A (q, beta) proportionally balanced s* makes this <= 0 for every
    feasible s.
    """
    star = topo.vector(spare_star)
    if np.any(star <= 0):
        raise DomainError("Reference spare capacities must be positive")
    return _balance_sum(spec.beta, spec.q_vector(topo), topo.vector(spare), star)


def _simple_paths(topo: Topology, src: str, dest: str) -> list[LinkPath]:
    edge_paths = itertools.islice(
        nx.all_simple_edge_paths(topo.graph, src, dest), PATH_ENUMERATION_CAP
    )
    return [tuple(topo.index(key) for _, _, key in path) for path in edge_paths]


def verify_balance(
    topo: Topology,
    dm: DemandMatrix,
    spec: UtilitySpec,
    fa_star: FlowAssignment,
    samples: int = DEFAULT_BALANCE_SAMPLES,
    seed: int = 0,
    tol: float = DEFAULT_BALANCE_TOL,
) -> BalanceReport:
    """Check the proportional-balance inequality against random feasible flows.

    Each sample splits every demand over its simple paths with Dirichlet
    random shares, then mixes the result with fa_star just enough to stay
    within capacity.

    Raises:
        DomainError: If samples < 1.
        SamplingError: If some pair has no path or fa_star leaves no spare
            capacity on some link.
    """
    if samples < 1:
        raise DomainError(f"samples must be >= 1, got {samples}")
    caps = topo.capacities
    q = spec.q_vector(topo)
    f_star = fa_star.aggregate_vector()
    s_star = caps - f_star
    if np.any(s_star <= 0):
        raise SamplingError("Reference flow leaves no spare capacity on some link")
    options: dict[Pair, list[LinkPath]] = {}
    for src, dest, _ in dm.pairs():
        options[(src, dest)] = _simple_paths(topo, src, dest)
        if not options[(src, dest)]:
            raise SamplingError(f"No path from {src} to {dest} to sample")

    rng = np.random.default_rng(seed)
    worst = -math.inf
    worst_sample = None
    for sample in range(samples):
        loads = np.zeros(len(caps))
        for src, dest, demand in dm.pairs():
            paths = options[(src, dest)]
            for share, path in zip(rng.dirichlet(np.ones(len(paths))), paths):
                loads[list(path)] += demand * share
        over = loads > f_star
        theta = 1.0
        if over.any():
            theta = min(1.0, 0.999 * float(np.min(s_star[over] / (loads - f_star)[over])))
        mixed = f_star + theta * (loads - f_star)
        deviation = _balance_sum(spec.beta, q, caps - mixed, s_star)
        if deviation > worst:
            worst, worst_sample = deviation, sample
    return BalanceReport(
        passed=worst <= tol, worst_deviation=worst, samples=samples, worst_sample=worst_sample
    )


def round_weights(w: Mapping[str, float], s: Mapping[str, float]) -> dict[str, int]:
    """Integer weights round(w_ij * max s), floored at 1."""
    scale = max(s.values(), default=1.0)
    return {
        link_id: max(1, math.floor(weight * scale + 0.5)) for link_id, weight in w.items()
    }
