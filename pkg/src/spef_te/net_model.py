"""Network, demand and flow data model with feasibility checking."""

import csv
import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import networkx as nx
import numpy as np

from .errors import ConfigError, DomainError, StructuralError

DEFAULT_FEASIBILITY_TOL = 1e-9
DEMAND_CSV_HEADER = ("src", "dst", "demand")


@dataclass(frozen=True)
class Link:
    """A directed link with capacity (traffic units/sec) and propagation delay."""

    id: str
    src: str
    dst: str
    capacity: float
    delay: float = 1.0

    def to_dict(self) -> dict[str, object]:
        """Convert link to dictionary for JSON output."""
        return {
            "id": self.id,
            "src": self.src,
            "dst": self.dst,
            "capacity": self.capacity,
            "delay": self.delay,
        }


@dataclass(frozen=True)
class Topology:
    """Directed graph with per-link capacities; parallel links allowed.

    Node identifiers are opaque strings; every tie-break in the package uses
    their lexicographic order.
    """

    nodes: tuple[str, ...]
    links: tuple[Link, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(str(n) for n in self.nodes))
        object.__setattr__(self, "links", tuple(self.links))

        if len(set(self.nodes)) != len(self.nodes):
            raise StructuralError("Duplicate node identifiers in topology")
        node_set = set(self.nodes)
        seen: set[str] = set()
        for link in self.links:
            if link.id in seen:
                raise StructuralError(f"Duplicate link id: {link.id}")
            seen.add(link.id)
            if link.src not in node_set or link.dst not in node_set:
                raise StructuralError(
                    f"Link {link.id} references unknown node(s): "
                    f"{link.src} -> {link.dst}"
                )
            if link.src == link.dst:
                raise StructuralError(f"Link {link.id} is a self-loop on {link.src}")
            if not math.isfinite(link.capacity) or link.capacity <= 0:
                raise StructuralError(
                    f"Link {link.id} capacity must be positive and finite, "
                    f"got {link.capacity}"
                )
            if not math.isfinite(link.delay) or link.delay < 0:
                raise StructuralError(
                    f"Link {link.id} delay must be non-negative and finite, "
                    f"got {link.delay}"
                )

    @cached_property
    def link_ids(self) -> tuple[str, ...]:
        """Link identifiers in declaration order (the vector index order)."""
        return tuple(link.id for link in self.links)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {link_id: i for i, link_id in enumerate(self.link_ids)}

    @cached_property
    def _by_id(self) -> dict[str, Link]:
        return {link.id: link for link in self.links}

    @cached_property
    def capacities(self) -> np.ndarray:
        """Read-only capacity vector in link index order."""
        caps = np.array([link.capacity for link in self.links], dtype=float)
        caps.flags.writeable = False
        return caps

    @cached_property
    def graph(self) -> nx.MultiDiGraph:
        """MultiDiGraph keyed by link id; treat as read-only."""
        g = nx.MultiDiGraph()
        g.add_nodes_from(self.nodes)
        for link in self.links:
            g.add_edge(link.src, link.dst, key=link.id, link=link)
        return g

    @cached_property
    def reverse_graph(self) -> nx.MultiDiGraph:
        """Graph with every link reversed, for distances toward a destination."""
        return self.graph.reverse(copy=True)

    @cached_property
    def _out_links(self) -> dict[str, tuple[Link, ...]]:
        out: dict[str, list[Link]] = {n: [] for n in self.nodes}
        for link in self.links:
            out[link.src].append(link)
        return {
            n: tuple(sorted(links, key=lambda l: (l.dst, l.id)))
            for n, links in out.items()
        }

    @cached_property
    def _in_links(self) -> dict[str, tuple[Link, ...]]:
        into: dict[str, list[Link]] = {n: [] for n in self.nodes}
        for link in self.links:
            into[link.dst].append(link)
        return {n: tuple(links) for n, links in into.items()}

    @property
    def max_capacity(self) -> float:
        """Largest link capacity (0 for a link-free topology)."""
        return float(self.capacities.max()) if self.links else 0.0

    def index(self, link_id: str) -> int:
        """Return the vector index of a link."""
        try:
            return self._index[link_id]
        except KeyError:
            raise StructuralError(f"Unknown link id(s): {link_id}") from None

    def link(self, link_id: str) -> Link:
        """Return the link with the given id."""
        try:
            return self._by_id[link_id]
        except KeyError:
            raise StructuralError(f"Unknown link id(s): {link_id}") from None

    def out_links(self, node: str) -> tuple[Link, ...]:
        """Outgoing links of a node, ordered by (head node, link id)."""
        return self._out_links[node]

    def in_links(self, node: str) -> tuple[Link, ...]:
        """Incoming links of a node."""
        return self._in_links[node]

    def check_links(self, link_ids: Iterable[str]) -> None:
        """Raise StructuralError if any id is not a link of this topology."""
        unknown = sorted(set(link_ids) - set(self._index))
        if unknown:
            raise StructuralError(f"Unknown link id(s): {', '.join(unknown)}")

    def check_nodes(self, nodes: Iterable[str]) -> None:
        """Raise StructuralError if any node is not part of this topology."""
        unknown = sorted(set(nodes) - set(self.nodes))
        if unknown:
            raise StructuralError(f"Unknown node(s): {', '.join(unknown)}")

    def vector(self, values: Mapping[str, float], default: float = 0.0) -> np.ndarray:
        """Map link id -> value into a vector in link index order."""
        self.check_links(values)
        return np.array(
            [float(values.get(link_id, default)) for link_id in self.link_ids]
        )

    def as_mapping(self, vector: Iterable[float]) -> dict[str, float]:
        """Inverse of vector()."""
        return {link_id: float(x) for link_id, x in zip(self.link_ids, vector)}

    def to_dict(self) -> dict[str, object]:
        """Convert topology to the JSON file layout."""
        return {
            "nodes": list(self.nodes),
            "links": [link.to_dict() for link in self.links],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "Topology":
        """Build a topology from the JSON file layout."""
        try:
            nodes = [str(n) for n in data["nodes"]]  # type: ignore[union-attr]
            links = [
                Link(
                    id=str(item["id"]),
                    src=str(item["src"]),
                    dst=str(item["dst"]),
                    capacity=float(item["capacity"]),
                    delay=float(item.get("delay", 1.0)),
                )
                for item in data["links"]  # type: ignore[union-attr]
            ]
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ConfigError(f"Malformed topology data: {e}") from e
        return cls(nodes=tuple(nodes), links=tuple(links))


@dataclass(frozen=True)
class DemandMatrix:
    """Demand d_s^t per (source, destination); absent pairs are zero."""

    entries: Mapping[tuple[str, str], float]

    def __post_init__(self) -> None:
        clean: dict[tuple[str, str], float] = {}
        for (src, dst), value in sorted(self.entries.items()):
            value = float(value)
            if src == dst:
                raise StructuralError(f"Demand pair ({src}, {dst}) is a self-pair")
            if not math.isfinite(value) or value < 0:
                raise StructuralError(
                    f"Demand for ({src}, {dst}) must be finite and >= 0, got {value}"
                )
            clean[(str(src), str(dst))] = value
        object.__setattr__(self, "entries", clean)

    @classmethod
    def zero(cls) -> "DemandMatrix":
        """The empty demand matrix."""
        return cls({})

    def demand(self, src: str, dst: str) -> float:
        """Return d_src^dst (0 for absent pairs)."""
        return self.entries.get((src, dst), 0.0)

    @cached_property
    def destinations(self) -> tuple[str, ...]:
        """Destination set D: nodes targeted by some positive demand."""
        return tuple(sorted({t for (_, t), d in self.entries.items() if d > 0}))

    def toward(self, dst: str) -> dict[str, float]:
        """Positive demands toward a destination, keyed by source."""
        return {s: d for (s, t), d in self.entries.items() if t == dst and d > 0}

    def pairs(self) -> tuple[tuple[str, str, float], ...]:
        """Positive demand pairs (src, dst, demand) in sorted order."""
        return tuple((s, t, d) for (s, t), d in self.entries.items() if d > 0)

    @property
    def total(self) -> float:
        """Sum of all demands."""
        return float(sum(self.entries.values()))

    def scaled(self, factor: float) -> "DemandMatrix":
        """Return a copy with every entry multiplied by factor."""
        return DemandMatrix({pair: d * factor for pair, d in self.entries.items()})

    def check_nodes(self, topology: Topology) -> None:
        """Raise StructuralError if a pair references a node not in topology."""
        topology.check_nodes(n for pair in self.entries for n in pair)


@dataclass(frozen=True)
class FlowAssignment:
    """Per-destination link flows f^t_ij on a topology."""

    topology: Topology
    per_dest: Mapping[str, Mapping[str, float]]

    def __post_init__(self) -> None:
        clean: dict[str, dict[str, float]] = {}
        for dest in sorted(self.per_dest):
            flows = self.per_dest[dest]
            self.topology.check_links(flows)
            clean[dest] = {lid: float(flows[lid]) for lid in sorted(flows)}
        self.topology.check_nodes(clean)
        object.__setattr__(self, "per_dest", clean)

    @classmethod
    def zero(cls, topology: Topology) -> "FlowAssignment":
        """Assignment carrying no traffic."""
        return cls(topology, {})

    def flow(self, dest: str, link_id: str) -> float:
        """Return f^dest on a link."""
        return self.per_dest.get(dest, {}).get(link_id, 0.0)

    def aggregate_vector(self) -> np.ndarray:
        """Aggregate loads f_ij = sum_t f^t_ij in link index order."""
        loads = np.zeros(len(self.topology.links))
        for flows in self.per_dest.values():
            for link_id, value in flows.items():
                loads[self.topology.index(link_id)] += value
        return loads

    def aggregate(self) -> dict[str, float]:
        """Aggregate loads keyed by link id (every link present)."""
        return self.topology.as_mapping(self.aggregate_vector())

    def to_dict(self) -> dict[str, dict[str, float]]:
        """Per-destination flows for JSON output."""
        return {dest: dict(flows) for dest, flows in self.per_dest.items()}


@dataclass(frozen=True)
class LinkLoad:
    """Aggregate load, utilization and spare capacity of one link."""

    load: float
    utilization: float
    spare: float


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of checking a flow against capacity and conservation."""

    feasible: bool
    max_capacity_violation: float
    max_conservation_residual: float
    min_flow: float

    def to_dict(self) -> dict[str, object]:
        """Convert report to dictionary for JSON output."""
        return {
            "feasible": self.feasible,
            "max_capacity_violation": self.max_capacity_violation,
            "max_conservation_residual": self.max_conservation_residual,
            "min_flow": self.min_flow,
        }


def aggregate_loads(fa: FlowAssignment) -> dict[str, LinkLoad]:
    """Return load, utilization and spare capacity for every link."""
    loads = fa.aggregate_vector()
    caps = fa.topology.capacities
    return {
        link_id: LinkLoad(
            load=float(loads[i]),
            utilization=float(loads[i] / caps[i]),
            spare=float(caps[i] - loads[i]),
        )
        for i, link_id in enumerate(fa.topology.link_ids)
    }


def _conservation_residual(
    topo: Topology, dm: DemandMatrix, dest: str, flows: Mapping[str, float]
) -> float:
    net = dict.fromkeys(topo.nodes, 0.0)
    for link_id, value in flows.items():
        link = topo.link(link_id)
        net[link.src] += value
        net[link.dst] -= value
    return max(
        (abs(net[node] - dm.demand(node, dest)) for node in topo.nodes if node != dest),
        default=0.0,
    )


def validate_flow(
    topo: Topology,
    dm: DemandMatrix,
    fa: FlowAssignment,
    tol: float = DEFAULT_FEASIBILITY_TOL,
) -> ValidationReport:
    """Check capacity, conservation and non-negativity of a flow assignment.

    Args:
        topo: The network.
        dm: Offered demands.
        fa: Candidate per-destination flows.
        tol: Absolute tolerance applied to every constraint family.

    Returns:
        A report with the worst residual of each constraint family.

    Raises:
        StructuralError: If fa or dm reference links or nodes outside topo.
        DomainError: If tol is not positive.
    """
    if not tol > 0:
        raise DomainError(f"Tolerance must be positive, got {tol}")
    dm.check_nodes(topo)
    topo.check_nodes(fa.per_dest)
    for flows in fa.per_dest.values():
        topo.check_links(flows)

    loads = np.zeros(len(topo.links))
    min_flow = 0.0
    for flows in fa.per_dest.values():
        for link_id, value in flows.items():
            loads[topo.index(link_id)] += value
            min_flow = min(min_flow, value)
    cap_violation = float(max(0.0, (loads - topo.capacities).max(initial=0.0)))

    destinations = sorted(set(dm.destinations) | set(fa.per_dest))
    conservation = max(
        (
            _conservation_residual(topo, dm, dest, fa.per_dest.get(dest, {}))
            for dest in destinations
        ),
        default=0.0,
    )
    feasible = cap_violation <= tol and conservation <= tol and min_flow >= -tol
    return ValidationReport(
        feasible=feasible,
        max_capacity_violation=cap_violation,
        max_conservation_residual=float(conservation),
        min_flow=float(min_flow),
    )


def load_topology(path: Path) -> Topology:
    """Read a topology JSON file."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read topology file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Topology file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Topology file {path} must contain a JSON object")
    return Topology.from_dict(data)


def load_demands(path: Path) -> DemandMatrix:
    """Read a demand CSV with header src,dst,demand."""
    entries: dict[tuple[str, str], float] = {}
    try:
        with Path(path).open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != DEMAND_CSV_HEADER:
                raise ConfigError(
                    f"Demand file {path} must have header {','.join(DEMAND_CSV_HEADER)}"
                )
            for row in reader:
                if None in row or None in row.values():
                    raise ConfigError(
                        f"Malformed demand row on line {reader.line_num} of {path}: "
                        f"expected {len(DEMAND_CSV_HEADER)} fields"
                    )
                pair = (row["src"].strip(), row["dst"].strip())
                if pair in entries:
                    raise ConfigError(f"Duplicate demand pair {pair} in {path}")
                try:
                    value = float(row["demand"])
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"Bad demand value in {path}: {row}") from e
                if not math.isfinite(value) or value < 0:
                    raise ConfigError(
                        f"Demand for {pair} in {path} must be finite and >= 0"
                    )
                entries[pair] = value
    except OSError as e:
        raise ConfigError(f"Cannot read demand file {path}: {e}") from e
    return DemandMatrix(entries)


def write_demands(dm: DemandMatrix, path: Path) -> None:
    """Write a demand matrix in the CSV layout read by load_demands."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(DEMAND_CSV_HEADER)
        for (src, dst), value in dm.entries.items():
            writer.writerow([src, dst, repr(value)])
