"""OSPF/InvCap baseline with even ECMP splitting, and evaluation metrics."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import RoutingError
from .log_config import get_logger
from .net_model import DemandMatrix, FlowAssignment, Topology, aggregate_loads
from .spef_split import (
    DIJKSTRA_TOLERANCE_PRESETS,
    DestinationDag,
    EcmpDag,
    ForwardingRow,
    ForwardingTable,
    NextHop,
    build_ecmp_dag,
    even_split_distribution,
)

logger = get_logger(__name__)

PATH_COUNT_LIMIT = 2**32
NEG_INF_SENTINEL = "-inf"
SORTED_UTIL_CSV_HEADER = ("rank", "utilization")


@dataclass(frozen=True)
class EcmpHistogram:
    """Equal-cost path count per demanded pair and the histogram n_i."""

    per_pair: dict[tuple[str, str], int]
    histogram: dict[int, int]
    saturated: bool = False

    def to_dict(self) -> dict[str, object]:
        """Convert to dictionary for JSON output."""
        return {
            "histogram": {str(k): v for k, v in self.histogram.items()},
            "saturated": self.saturated,
        }


@dataclass(frozen=True)
class MetricsReport:
    """Flow-level evaluation of one routing."""

    mlu: float
    normalized_utility: float
    sorted_utilizations: tuple[float, ...]
    ecmp_histogram: dict[int, int]
    network_load: float
    utilization: dict[str, float]
    histogram_saturated: bool = False

    def sorted_utilization_rows(self) -> list[tuple[int, float]]:
        """(rank, utilization) rows, rank starting at 1."""
        return [(rank, u) for rank, u in enumerate(self.sorted_utilizations, start=1)]

    def to_dict(self) -> dict[str, object]:
        """Convert report to dictionary for JSON output; -inf becomes "-inf"."""
        utility: float | str = self.normalized_utility
        if math.isinf(utility):
            utility = NEG_INF_SENTINEL
        return {
            "mlu": self.mlu,
            "normalized_utility": utility,
            "sorted_utilizations": list(self.sorted_utilizations),
            "ecmp_histogram": {str(k): v for k, v in self.ecmp_histogram.items()},
            "histogram_saturated": self.histogram_saturated,
            "network_load": self.network_load,
            "utilization": dict(self.utilization),
        }


def invcap_weights(topo: Topology) -> dict[str, float]:
    """w_ij = 1 / c_ij."""
    return {link.id: 1.0 / link.capacity for link in topo.links}


def ospf_dag(
    topo: Topology, dm: DemandMatrix, tol: float = DIJKSTRA_TOLERANCE_PRESETS["real"]
) -> EcmpDag:
    """ECMP DAGs under InvCap weights for every demanded destination.

    Raises:
        RoutingError: If some demand source cannot reach its destination.
    """
    dag = build_ecmp_dag(topo, invcap_weights(topo), dm.destinations, tol)
    unreachable = sorted(
        f"{src}->{dest}" for src, dest, _ in dm.pairs() if src not in dag[dest].dist
    )
    if unreachable:
        raise RoutingError(f"Unreachable demand pair(s): {', '.join(unreachable)}")
    return dag


def ospf_invcap(
    topo: Topology, dm: DemandMatrix, tol: float = DIJKSTRA_TOLERANCE_PRESETS["real"]
) -> FlowAssignment:
    """Route demand as OSPF with InvCap weights and even per-node ECMP splitting."""
    return even_split_distribution(topo, dm, ospf_dag(topo, dm, tol))


def _path_counts(ddag: DestinationDag) -> tuple[dict[str, int], bool]:
    counts: dict[str, int] = {}
    saturated = False
    for node in reversed(ddag.order):
        if node == ddag.dest:
            counts[node] = 1
            continue
        total = sum(counts[link.dst] for link in ddag.successors[node])
        if total > PATH_COUNT_LIMIT:
            total, saturated = PATH_COUNT_LIMIT, True
        counts[node] = total
    return counts, saturated


def even_forwarding_tables(topo: Topology, dag: EcmpDag) -> ForwardingTable:
    """OSPF forwarding rows: ratio 1/m_s per successor, mass = paths below the hop."""
    rows = []
    for dest in dag.destinations:
        ddag = dag[dest]
        counts, _ = _path_counts(ddag)
        for node in sorted(ddag.order):
            links = ddag.successors[node]
            if links:
                rows.append(
                    ForwardingRow(
                        node=node,
                        dest=dest,
                        nexthops=tuple(
                            NextHop(link.dst, link.id, 1.0 / len(links), float(counts[link.dst]))
                            for link in links
                        ),
                    )
                )
    return ForwardingTable(tuple(rows))


def count_ecmp_paths(dag: EcmpDag, dm: DemandMatrix) -> EcmpHistogram:
    """Count DAG paths per demanded pair; counts saturate at 2^32."""
    per_pair: dict[tuple[str, str], int] = {}
    saturated = False
    for dest in dm.destinations:
        counts, dest_saturated = _path_counts(dag[dest])
        saturated = saturated or dest_saturated
        for src in sorted(dm.toward(dest)):
            per_pair[(src, dest)] = counts.get(src, 0)
    histogram: dict[int, int] = {}
    for count in per_pair.values():
        histogram[count] = histogram.get(count, 0) + 1
    if saturated:
        logger.warning("Equal-cost path counts saturated at %d", PATH_COUNT_LIMIT)
    return EcmpHistogram(per_pair, dict(sorted(histogram.items())), saturated)


def compute_metrics(
    topo: Topology,
    dm: DemandMatrix,
    fa: FlowAssignment,
    dag: EcmpDag | None = None,
) -> MetricsReport:
    """MLU, normalized utility sum log(1 - u), sorted utilizations and network load.

    The ECMP histogram is filled when the DAG the routing used is given.
    """
    utilization = {link_id: load.utilization for link_id, load in aggregate_loads(fa).items()}
    values = np.array(list(utilization.values()))
    mlu = float(values.max(initial=0.0))
    utility = float(np.log1p(-values).sum()) if mlu < 1 else -math.inf
    histogram = count_ecmp_paths(dag, dm) if dag is not None else None
    total_capacity = float(topo.capacities.sum())
    return MetricsReport(
        mlu=mlu,
        normalized_utility=utility,
        sorted_utilizations=tuple(sorted(values.tolist(), reverse=True)),
        ecmp_histogram=histogram.histogram if histogram else {},
        network_load=dm.total / total_capacity if total_capacity > 0 else 0.0,
        utilization=utilization,
        histogram_saturated=histogram.saturated if histogram else False,
    )
