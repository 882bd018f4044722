"""SPEF splitting: equal-cost DAGs, second weights and forwarding tables.

Traffic to a destination t is split at every node over its ON^t successors
in proportion to e^{-v_sj} Z^t(j), where Z^t(j) sums e^{-(second-weight
path length)} over the shortest paths from j to t. Z is computed by dynamic
programming over the DAG, so paths are only enumerated by the oracle
helpers at the bottom of this module.
"""

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields

import networkx as nx
import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DomainError, InfeasibleDemandError, StructuralError
from .log_config import get_logger
from .net_model import DemandMatrix, FlowAssignment, Link, Topology
from .weight_solver import PATH_ENUMERATION_CAP, shortest_distances

logger = get_logger(__name__)

DIJKSTRA_TOLERANCE_PRESETS: dict[str, float] = {
    "real": 1e-9,
    "noninteger": 0.3,
    "integer": 1.0,
}
SECOND_TRACE_CSV_HEADER = ("iteration", "max_excess", "dual_objective", "symmetric_gap")

DEFAULT_SECOND_MAX_ITERS = 20_000
DEFAULT_EPSILON_FRACTION = 1e-3

_CUT_SOURCE = ("source",)

SplitRatios = dict[str, dict[str, float]]


@dataclass(frozen=True)
class DestinationDag:
    """ON^t for one destination.

    successors holds, per node that can reach dest, its ON^t out-links
    ordered by (head node, link id). order lists those nodes by decreasing
    distance, so dest comes last.
    """

    dest: str
    dist: dict[str, float]
    successors: dict[str, tuple[Link, ...]]
    order: tuple[str, ...]

    @property
    def link_ids(self) -> tuple[str, ...]:
        """Links of ON^t."""
        return tuple(link.id for node in self.order for link in self.successors[node])


@dataclass(frozen=True)
class EcmpDag:
    """Shortest-path DAGs for a set of destinations under the first weights."""

    topology: Topology
    per_dest: dict[str, DestinationDag]
    tol: float

    def __getitem__(self, dest: str) -> DestinationDag:
        try:
            return self.per_dest[dest]
        except KeyError:
            raise StructuralError(f"DAG does not cover destination {dest}") from None

    @property
    def destinations(self) -> tuple[str, ...]:
        """Destinations with a DAG, sorted."""
        return tuple(self.per_dest)


@dataclass(frozen=True)
class SecondSolverConfig:
    """Settings of the second-weight solver; None picks the target-load based default."""

    gamma: float | None = None
    epsilon: float | None = None
    max_iters: int = DEFAULT_SECOND_MAX_ITERS
    halve_on_increase: bool = True

    def __post_init__(self) -> None:
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.epsilon is not None and not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")

    def to_dict(self) -> dict[str, object]:
        """Convert to the experiment-config layout."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "SecondSolverConfig":
        """Build from a config table, rejecting unknown keys."""
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"Unknown second-weight setting(s): {', '.join(unknown)}")
        try:
            return cls(**data)  # type: ignore[arg-type]
        except TypeError as e:
            raise ConfigError(f"Invalid second-weight settings: {e}") from e


@dataclass(frozen=True)
class SecondTraceRow:
    """One second-weight update: a gradient step on the entropy dual."""

    iteration: int
    max_excess: float
    dual_objective: float
    symmetric_gap: float

    def as_row(self) -> tuple[int, float, float, float]:
        """CSV row in SECOND_TRACE_CSV_HEADER order."""
        return (self.iteration, self.max_excess, self.dual_objective, self.symmetric_gap)


@dataclass(frozen=True)
class SecondWeights:
    """Second link weights v >= 0 with the iteration trace that produced them."""

    v: dict[str, float]
    trace: tuple[SecondTraceRow, ...] = ()
    converged: bool = True

    @property
    def iterations(self) -> int:
        """Number of traffic distributions evaluated."""
        return len(self.trace)

    def to_dict(self) -> dict[str, object]:
        """Convert to dictionary for JSON output."""
        return {"v": dict(self.v), "converged": self.converged, "iterations": self.iterations}


@dataclass(frozen=True)
class NextHop:
    """One forwarding entry: next hop, link, split ratio and subtree mass Z^t(via)."""

    via: str
    link_id: str
    ratio: float
    mass: float


@dataclass(frozen=True)
class ForwardingRow:
    """Next hops of one (node, destination)."""

    node: str
    dest: str
    nexthops: tuple[NextHop, ...]

    def to_dict(self) -> dict[str, object]:
        """Convert row to the exported JSON layout."""
        return {
            "node": self.node,
            "dest": self.dest,
            "nexthops": [
                {"via": hop.via, "link": hop.link_id, "ratio": hop.ratio}
                for hop in self.nexthops
            ],
        }


@dataclass(frozen=True)
class ForwardingTable:
    """All forwarding rows, ordered by (destination, node)."""

    rows: tuple[ForwardingRow, ...]
    _lookup: dict[tuple[str, str], ForwardingRow] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "_lookup", {(r.node, r.dest): r for r in self.rows})

    def row(self, node: str, dest: str) -> ForwardingRow | None:
        """Return the row of (node, dest), or None if none is emitted."""
        return self._lookup.get((node, dest))

    def ratios(self, node: str, dest: str) -> dict[str, float]:
        """Split ratio per next-hop node (parallel links summed)."""
        result: dict[str, float] = {}
        row = self.row(node, dest)
        for hop in row.nexthops if row else ():
            result[hop.via] = result.get(hop.via, 0.0) + hop.ratio
        return result

    def to_list(self) -> list[dict[str, object]]:
        """Rows in the exported JSON layout."""
        return [row.to_dict() for row in self.rows]


@dataclass(frozen=True)
class PathSplit:
    """Per-pair probabilities over the pair's shortest paths (link id tuples)."""

    probabilities: dict[tuple[str, str], dict[tuple[str, ...], float]]

    def probability(self, src: str, dest: str, path: Sequence[str]) -> float:
        """Probability of a path; 0 if it is not a shortest path of the pair."""
        return self.probabilities.get((src, dest), {}).get(tuple(path), 0.0)


def _second_vector(topo: Topology, v: "SecondWeights | Mapping[str, float]") -> np.ndarray:
    values = v.v if isinstance(v, SecondWeights) else v
    vector = topo.vector(values)
    if np.any(vector < 0):
        raise DomainError("Second weights must be non-negative")
    return vector


def build_ecmp_dag(
    topo: Topology,
    w: Mapping[str, float],
    dests: Iterable[str],
    tol: float = DIJKSTRA_TOLERANCE_PRESETS["real"],
) -> EcmpDag:
    """Build ON^t for every destination.

    A link (i, j) belongs to ON^t when |dist(i) - w_ij - dist(j)| <= tol and
    dist(j) < dist(i).

    Raises:
        DomainError: If some first weight is not strictly positive or tol < 0.
    """
    weights = topo.vector(w, default=math.nan)
    if not np.all(weights > 0):
        raise DomainError("First weights must be strictly positive on every link")
    if not tol >= 0:
        raise DomainError(f"Dijkstra tolerance must be >= 0, got {tol}")
    dests = sorted(set(dests))
    topo.check_nodes(dests)

    per_dest: dict[str, DestinationDag] = {}
    for dest in dests:
        dist = shortest_distances(topo, weights, dest)
        successors = {
            node: tuple(
                link
                for link in topo.out_links(node)
                if link.dst in dist
                and dist[link.dst] < dist[node]
                and abs(dist[node] - weights[topo.index(link.id)] - dist[link.dst]) <= tol
            )
            for node in dist
        }
        order = tuple(sorted(dist, key=lambda n: (-dist[n], n)))
        per_dest[dest] = DestinationDag(dest, dict(dist), successors, order)
        logger.debug(
            "ON^%s has %d link(s)", dest, sum(len(links) for links in successors.values())
        )
    return EcmpDag(topo, per_dest, tol)


def subtree_log_masses(
    topo: Topology, ddag: DestinationDag, v: "SecondWeights | Mapping[str, float]"
) -> dict[str, float]:
    """log Z^t(s) for every node of the DAG; Z^t(t) = 1.

    The recursion stays in log space so long paths do not underflow.
    """
    vector = _second_vector(topo, v)
    log_mass: dict[str, float] = {}
    for node in reversed(ddag.order):
        links = ddag.successors[node]
        if node == ddag.dest:
            log_mass[node] = 0.0
        elif not links:
            log_mass[node] = -math.inf
        else:
            log_mass[node] = float(
                logsumexp([-vector[topo.index(l.id)] + log_mass[l.dst] for l in links])
            )
    return log_mass


def _split_at(
    topo: Topology,
    links: Sequence[Link],
    vector: np.ndarray,
    log_mass: Mapping[str, float],
) -> dict[str, float]:
    exponents = np.array([-vector[topo.index(l.id)] + log_mass[l.dst] for l in links])
    shares = np.exp(exponents - exponents.max())
    ratios = shares / shares.sum()
    return {link.id: float(r) for link, r in zip(links, ratios)}


def split_ratios(
    topo: Topology, ddag: DestinationDag, v: "SecondWeights | Mapping[str, float]"
) -> SplitRatios:
    """Gamma^t(s, link) = e^{-v_sj} Z^t(j) / Z^t(s) for every node with successors."""
    vector = _second_vector(topo, v)
    log_mass = subtree_log_masses(topo, ddag, v)
    return {
        node: _split_at(topo, ddag.successors[node], vector, log_mass)
        for node in ddag.order
        if ddag.successors[node]
    }


def exponential_split(row: Sequence[Sequence[float]]) -> list[float]:
    """Split ratios of one table row from its per-next-hop path-length lists.

    Gamma_k = sum_j e^{-v_kj} / sum_i sum_j e^{-v_ij}.

    Raises:
        StructuralError: If the row has no next hop with a path.
    """
    if not any(len(lengths) for lengths in row):
        raise StructuralError("Cannot split over an empty next-hop set")
    log_masses = np.array(
        [logsumexp(-np.asarray(lengths, dtype=float)) if len(lengths) else -np.inf
         for lengths in row]
    )
    shares = np.exp(log_masses - log_masses.max())
    return [float(x) for x in shares / shares.sum()]


def _even_ratios(ddag: DestinationDag) -> SplitRatios:
    return {
        node: {link.id: 1.0 / len(links) for link in links}
        for node, links in ddag.successors.items()
        if links
    }


def distribute_over_dag(
    topo: Topology,
    dm: DemandMatrix,
    dag: EcmpDag,
    ratios: Mapping[str, Mapping[str, Mapping[str, float]]],
) -> FlowAssignment:
    """Push every destination's demand down its DAG with the given split ratios.

    Nodes are visited by decreasing distance; each forwards its own demand
    plus everything it received. The last successor takes the remainder, so
    conservation holds exactly.

    Args:
        topo: The network.
        dm: Offered demands.
        dag: DAGs covering every demanded destination.
        ratios: dest -> node -> link id -> split ratio.

    Raises:
        StructuralError: If a destination has no DAG or a node with traffic
            has no DAG successor.
    """
    dm.check_nodes(topo)
    per_dest: dict[str, dict[str, float]] = {}
    for dest in dm.destinations:
        ddag = dag[dest]
        demands = dm.toward(dest)
        stranded = sorted(set(demands) - set(ddag.dist))
        if stranded:
            raise StructuralError(
                f"Node(s) {', '.join(stranded)} carry traffic to {dest} "
                "but have no DAG successor"
            )
        through = {node: demands.get(node, 0.0) for node in ddag.order}
        flows: dict[str, float] = {}
        for node in ddag.order:
            amount = through[node]
            if node == dest or amount <= 0:
                continue
            links = ddag.successors[node]
            if not links:
                raise StructuralError(
                    f"Node {node} carries traffic to {dest} but has no DAG successor"
                )
            node_ratios = ratios[dest][node]
            remaining = amount
            for link in links[:-1]:
                share = amount * node_ratios[link.id]
                flows[link.id] = flows.get(link.id, 0.0) + share
                through[link.dst] += share
                remaining -= share
            last = links[-1]
            flows[last.id] = flows.get(last.id, 0.0) + remaining
            through[last.dst] += remaining
        per_dest[dest] = flows
    return FlowAssignment(topo, per_dest)


def traffic_distribution(
    topo: Topology,
    dm: DemandMatrix,
    dag: EcmpDag,
    v: "SecondWeights | Mapping[str, float]",
) -> FlowAssignment:
    """Distribute demand with the exponential split under second weights v."""
    ratios = {dest: split_ratios(topo, dag[dest], v) for dest in dm.destinations}
    return distribute_over_dag(topo, dm, dag, ratios)


def even_split_distribution(topo: Topology, dm: DemandMatrix, dag: EcmpDag) -> FlowAssignment:
    """Distribute demand splitting evenly over the DAG successors of each node."""
    ratios = {dest: _even_ratios(dag[dest]) for dest in dm.destinations}
    return distribute_over_dag(topo, dm, dag, ratios)


def _check_cuts(
    topo: Topology,
    dm: DemandMatrix,
    dag: EcmpDag,
    targets: np.ndarray,
    slack: float,
) -> None:
    """Raise if some destination's demand exceeds a cut of ON^t under capacities f*."""
    for dest in dm.destinations:
        ddag = dag[dest]
        network = nx.DiGraph()
        network.add_nodes_from(ddag.order)
        for node in ddag.order:
            for link in ddag.successors[node]:
                capacity = targets[topo.index(link.id)]
                if network.has_edge(node, link.dst):
                    network[node][link.dst]["capacity"] += capacity
                else:
                    network.add_edge(node, link.dst, capacity=capacity)
        demands = dm.toward(dest)
        for src, demand in demands.items():
            if src in network:
                network.add_edge(_CUT_SOURCE, src, capacity=demand)
        total = sum(demands.values())
        if _CUT_SOURCE not in network:
            raise InfeasibleDemandError(f"No DAG path carries demand toward {dest}")
        carried = nx.maximum_flow_value(network, _CUT_SOURCE, dest)
        if carried < total - slack:
            raise InfeasibleDemandError(
                f"Target loads admit only {carried:.6g} of {total:.6g} units toward {dest}"
            )


def _nem_dual(
    dm: DemandMatrix,
    log_masses: Mapping[str, Mapping[str, float]],
    vector: np.ndarray,
    targets: np.ndarray,
) -> float:
    total = sum(
        demand * log_masses[dest][src] for src, dest, demand in dm.pairs()
    )
    return float(total + vector @ targets)


def solve_second_weights(
    topo: Topology,
    dm: DemandMatrix,
    dag: EcmpDag,
    f_star: Mapping[str, float],
    gamma: float | None = None,
    epsilon: float | None = None,
    max_iters: int = DEFAULT_SECOND_MAX_ITERS,
    halve_on_increase: bool = True,
) -> SecondWeights:
    """Gradient projection on the network entropy maximization dual.

    Starts from v = 0 and applies v <- (v - gamma (f* - f(v)))_+ until
    f(v) <= f* + epsilon on every link. The trace records the dual value
    sum_r d_r log Z_r(v) + v . f* and max |f - f*|; with halve_on_increase
    the step is halved whenever that value goes up.

    Args:
        topo: The network.
        dm: Offered demands.
        dag: DAGs under the first weights for every demanded destination.
        f_star: Target aggregate load per link.
        gamma: Step size; default 1 / max f*.
        epsilon: Stopping slack; default 1e-3 * max f*.
        max_iters: Iteration limit.
        halve_on_increase: Halve gamma when the dual objective increases.

    Returns:
        Second weights with trace; converged=False if max_iters ran out.

    Raises:
        DomainError: If gamma or epsilon is not positive or max_iters < 1.
        InfeasibleDemandError: If some destination's demand exceeds a cut of
            its DAG under capacities f*.
    """
    targets = topo.vector(f_star)
    peak = float(targets.max(initial=0.0))
    gamma = gamma if gamma is not None else (1.0 / peak if peak > 0 else 1.0)
    epsilon = epsilon if epsilon is not None else DEFAULT_EPSILON_FRACTION * peak
    if not gamma > 0 or not epsilon >= 0 or max_iters < 1:
        raise DomainError("Need gamma > 0, epsilon >= 0 and max_iters >= 1")
    _check_cuts(topo, dm, dag, targets, slack=max(epsilon, 1e-9 * dm.total))

    vector = np.zeros(len(topo.links))
    trace: list[SecondTraceRow] = []
    previous = math.inf
    for k in range(max_iters):
        weights = topo.as_mapping(vector)
        log_masses = {
            dest: subtree_log_masses(topo, dag[dest], weights) for dest in dm.destinations
        }
        ratios = {
            dest: {
                node: _split_at(topo, dag[dest].successors[node], vector, log_masses[dest])
                for node in dag[dest].order
                if dag[dest].successors[node]
            }
            for dest in dm.destinations
        }
        loads = distribute_over_dag(topo, dm, dag, ratios).aggregate_vector()
        excess = loads - targets
        dual = _nem_dual(dm, log_masses, vector, targets)
        max_excess = float(excess.max(initial=0.0))
        trace.append(
            SecondTraceRow(k, max_excess, dual, float(np.abs(excess).max(initial=0.0)))
        )
        if max_excess <= epsilon:
            logger.debug("Second weights converged after %d iteration(s)", k + 1)
            return SecondWeights(topo.as_mapping(vector), tuple(trace), True)
        if halve_on_increase and dual > previous:
            gamma /= 2.0
        previous = dual
        vector = np.maximum(0.0, vector - gamma * (targets - loads))
    logger.warning(
        "Second weights did not reach epsilon=%.3g in %d iterations", epsilon, max_iters
    )
    return SecondWeights(topo.as_mapping(vector), tuple(trace), False)


def build_forwarding_tables(
    topo: Topology, dag: EcmpDag, v: "SecondWeights | Mapping[str, float]"
) -> ForwardingTable:
    """One row per (node, destination) with ON^t successors, exponential ratios."""
    vector = _second_vector(topo, v)
    rows = []
    for dest in dag.destinations:
        ddag = dag[dest]
        log_mass = subtree_log_masses(topo, ddag, v)
        for node in sorted(ddag.order):
            links = ddag.successors[node]
            if not links:
                continue
            ratios = _split_at(topo, links, vector, log_mass)
            rows.append(
                ForwardingRow(
                    node=node,
                    dest=dest,
                    nexthops=tuple(
                        NextHop(link.dst, link.id, ratios[link.id], math.exp(log_mass[link.dst]))
                        for link in links
                    ),
                )
            )
    return ForwardingTable(tuple(rows))


def enumerate_dag_paths(
    topo: Topology, ddag: DestinationDag, src: str, cap: int = PATH_ENUMERATION_CAP
) -> list[tuple[str, ...]]:
    """All DAG paths from src to the destination as link id tuples.

    Raises:
        DomainError: If there are more than cap paths.
    """
    topo.check_nodes([src])
    if src not in ddag.dist:
        return []
    paths: list[tuple[str, ...]] = []
    stack: list[tuple[str, tuple[str, ...]]] = [(src, ())]
    while stack:
        node, prefix = stack.pop()
        if node == ddag.dest:
            paths.append(prefix)
            if len(paths) > cap:
                raise DomainError(f"More than {cap} shortest paths from {src}")
            continue
        for link in reversed(ddag.successors[node]):
            stack.append((link.dst, prefix + (link.id,)))
    return paths


def path_split(
    topo: Topology,
    dm: DemandMatrix,
    dag: EcmpDag,
    v: "SecondWeights | Mapping[str, float]",
) -> PathSplit:
    """p^r_k proportional to e^{-v^r_k} over the enumerated DAG paths of each pair."""
    vector = _second_vector(topo, v)
    probabilities: dict[tuple[str, str], dict[tuple[str, ...], float]] = {}
    for src, dest, _ in dm.pairs():
        paths = enumerate_dag_paths(topo, dag[dest], src)
        if not paths:
            raise StructuralError(f"No DAG path from {src} to {dest}")
        lengths = np.array([sum(vector[topo.index(l)] for l in path) for path in paths])
        p = np.exp(-lengths - logsumexp(-lengths))
        probabilities[(src, dest)] = {path: float(x) for path, x in zip(paths, p)}
    return PathSplit(probabilities)
