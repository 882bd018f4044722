"""Unit tests for the net_model module."""

import json
from pathlib import Path

import pytest

from spef_te.errors import ConfigError, DomainError, StructuralError
from spef_te.net_model import (
    DemandMatrix,
    FlowAssignment,
    Link,
    Topology,
    aggregate_loads,
    load_demands,
    load_topology,
    validate_flow,
    write_demands,
)


@pytest.mark.unit
class TestTopology:
    """Tests for Topology construction and lookups."""

    def test_rejects_unknown_node(self) -> None:
        """A link to an undeclared node is a structural error."""
        with pytest.raises(StructuralError, match="unknown node"):
            Topology(nodes=("a",), links=(Link("x", "a", "b", 1.0),))

    def test_rejects_self_loop(self) -> None:
        """Self-loops are rejected."""
        with pytest.raises(StructuralError, match="self-loop"):
            Topology(nodes=("a",), links=(Link("x", "a", "a", 1.0),))

    @pytest.mark.parametrize("capacity", [0.0, -1.0, float("inf"), float("nan")])
    def test_rejects_bad_capacity(self, capacity: float) -> None:
        """Capacity must be positive and finite."""
        with pytest.raises(StructuralError, match="capacity"):
            Topology(nodes=("a", "b"), links=(Link("x", "a", "b", capacity),))

    def test_rejects_duplicate_link_id(self) -> None:
        """Link ids are unique."""
        links = (Link("x", "a", "b", 1.0), Link("x", "b", "a", 1.0))
        with pytest.raises(StructuralError, match="Duplicate link id"):
            Topology(nodes=("a", "b"), links=links)

    def test_parallel_links_allowed(self) -> None:
        """Two links between the same ordered pair are distinct."""
        links = (Link("x", "a", "b", 1.0), Link("y", "a", "b", 2.0))
        topo = Topology(nodes=("a", "b"), links=links)
        assert [link.id for link in topo.out_links("a")] == ["x", "y"]

    def test_vector_follows_declaration_order(self, fig1) -> None:
        """vector() lays values out in link declaration order."""
        topo, _ = fig1
        vector = topo.vector({"2-3": 4.0, "1-3": 1.0})
        assert vector.tolist() == [1.0, 0.0, 0.0, 4.0]

    def test_vector_rejects_unknown_link(self, fig1) -> None:
        """Unknown link ids raise StructuralError."""
        topo, _ = fig1
        with pytest.raises(StructuralError, match="Unknown link id"):
            topo.vector({"9-9": 1.0})

    def test_capacities_read_only(self, fig1) -> None:
        """The capacity vector cannot be modified."""
        topo, _ = fig1
        with pytest.raises(ValueError):
            topo.capacities[0] = 5.0

    def test_dict_layout_round_trip(self, fig1) -> None:
        """from_dict(to_dict()) rebuilds an equal topology."""
        topo, _ = fig1
        assert Topology.from_dict(topo.to_dict()) == topo


@pytest.mark.unit
class TestDemandMatrix:
    """Tests for DemandMatrix."""

    def test_destinations_ignore_zero_demand(self) -> None:
        """Only positive demands define destinations."""
        dm = DemandMatrix({("a", "b"): 0.0, ("a", "c"): 1.0})
        assert dm.destinations == ("c",)

    def test_rejects_self_pair(self) -> None:
        """d_s^s is not allowed."""
        with pytest.raises(StructuralError, match="self-pair"):
            DemandMatrix({("a", "a"): 1.0})

    def test_rejects_negative(self) -> None:
        """Demands are non-negative."""
        with pytest.raises(StructuralError):
            DemandMatrix({("a", "b"): -1.0})

    def test_scaled(self) -> None:
        """scaled() multiplies every entry."""
        dm = DemandMatrix({("a", "b"): 1.5, ("b", "a"): 2.0}).scaled(2.0)
        assert dm.demand("a", "b") == 3.0
        assert dm.demand("b", "a") == 4.0

    def test_check_nodes(self, fig1) -> None:
        """Pairs must reference nodes of the topology."""
        topo, _ = fig1
        with pytest.raises(StructuralError, match="Unknown node"):
            DemandMatrix({("1", "9"): 1.0}).check_nodes(topo)


@pytest.mark.unit
class TestValidateFlow:
    """Tests for validate_flow."""

    def test_feasible_flow(self, fig1) -> None:
        """A conserving flow within capacity is feasible."""
        topo, dm = fig1
        fa = FlowAssignment(
            topo,
            {"3": {"1-3": 2 / 3, "1-2": 1 / 3, "2-3": 1 / 3}, "4": {"3-4": 0.9}},
        )
        report = validate_flow(topo, dm, fa)
        assert report.feasible
        assert report.max_conservation_residual == pytest.approx(0.0, abs=1e-12)

    def test_capacity_violation_reported(self, fig1) -> None:
        """Load above capacity is reported with its size."""
        topo, _ = fig1
        dm = DemandMatrix({("1", "3"): 1.5})
        fa = FlowAssignment(topo, {"3": {"1-3": 1.5}})
        report = validate_flow(topo, dm, fa)
        assert not report.feasible
        assert report.max_capacity_violation == pytest.approx(0.5)

    def test_conservation_violation_reported(self, fig1) -> None:
        """Missing flow shows up as a conservation residual."""
        topo, dm = fig1
        fa = FlowAssignment(topo, {"3": {"1-3": 0.5}, "4": {"3-4": 0.9}})
        report = validate_flow(topo, dm, fa)
        assert not report.feasible
        assert report.max_conservation_residual == pytest.approx(0.5)

    def test_negative_flow_reported(self, fig1) -> None:
        """Negative flow values make the flow infeasible."""
        topo, _ = fig1
        fa = FlowAssignment(topo, {"3": {"1-3": -0.1}})
        report = validate_flow(topo, DemandMatrix.zero(), fa)
        assert report.min_flow == pytest.approx(-0.1)
        assert not report.feasible

    def test_rejects_non_positive_tolerance(self, fig1) -> None:
        """tol must be positive."""
        topo, dm = fig1
        with pytest.raises(DomainError):
            validate_flow(topo, dm, FlowAssignment.zero(topo), tol=0.0)

    def test_unknown_link_in_flow(self, fig1) -> None:
        """Flows on links outside the topology are structural errors."""
        topo, _ = fig1
        with pytest.raises(StructuralError):
            FlowAssignment(topo, {"3": {"nope": 1.0}})


@pytest.mark.unit
def test_aggregate_loads_reports_spare(fig1) -> None:
    """aggregate_loads sums destinations and derives utilization and spare."""
    topo, _ = fig1
    fa = FlowAssignment(topo, {"3": {"1-3": 0.25}, "4": {"1-3": 0.25, "3-4": 0.5}})
    loads = aggregate_loads(fa)
    assert loads["1-3"].load == pytest.approx(0.5)
    assert loads["1-3"].utilization == pytest.approx(0.5)
    assert loads["3-4"].spare == pytest.approx(0.5)
    assert loads["2-3"].load == 0.0


@pytest.mark.unit
class TestFileFormats:
    """Tests for topology and demand file IO."""

    def test_load_topology(self, fig1_files, fig1) -> None:
        """A written topology file loads back equal."""
        topology_path, _ = fig1_files
        assert load_topology(topology_path) == fig1[0]

    def test_load_topology_delay_defaults_to_one(self, tmp_path: Path) -> None:
        """Links without a delay get delay 1."""
        path = tmp_path / "t.json"
        path.write_text(json.dumps({
            "nodes": ["a", "b"],
            "links": [{"id": "x", "src": "a", "dst": "b", "capacity": 2}],
        }))
        assert load_topology(path).link("x").delay == 1.0

    def test_load_topology_missing_file(self, tmp_path: Path) -> None:
        """A missing file is a config error."""
        with pytest.raises(ConfigError, match="Cannot read topology"):
            load_topology(tmp_path / "missing.json")

    def test_load_topology_bad_json(self, tmp_path: Path) -> None:
        """Invalid JSON is a config error."""
        path = tmp_path / "t.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_topology(path)

    def test_load_topology_missing_key(self, tmp_path: Path) -> None:
        """A link without capacity is malformed."""
        path = tmp_path / "t.json"
        path.write_text(json.dumps({
            "nodes": ["a", "b"], "links": [{"id": "x", "src": "a", "dst": "b"}],
        }))
        with pytest.raises(ConfigError, match="Malformed topology"):
            load_topology(path)

    def test_demands_round_trip(self, tmp_path: Path) -> None:
        """write_demands output loads back to the same matrix."""
        dm = DemandMatrix({("1", "3"): 1.0, ("3", "4"): 0.9})
        path = tmp_path / "d.csv"
        write_demands(dm, path)
        assert load_demands(path) == dm

    def test_demands_wrong_header(self, tmp_path: Path) -> None:
        """The header must be src,dst,demand."""
        path = tmp_path / "d.csv"
        path.write_text("from,to,amount\n1,3,1\n")
        with pytest.raises(ConfigError, match="header"):
            load_demands(path)

    def test_demands_duplicate_pair(self, tmp_path: Path) -> None:
        """A pair may appear once."""
        path = tmp_path / "d.csv"
        path.write_text("src,dst,demand\n1,3,1\n1,3,2\n")
        with pytest.raises(ConfigError, match="Duplicate demand pair"):
            load_demands(path)

    def test_demands_bad_value(self, tmp_path: Path) -> None:
        """Non-numeric demand values are rejected."""
        path = tmp_path / "d.csv"
        path.write_text("src,dst,demand\n1,3,lots\n")
        with pytest.raises(ConfigError, match="Bad demand value"):
            load_demands(path)

    @pytest.mark.parametrize("body", ["1\n", "1,3\n", "1,3,1,9\n"])
    def test_demands_wrong_field_count(self, tmp_path: Path, body: str) -> None:
        """Rows with missing or extra fields name their line."""
        path = tmp_path / "d.csv"
        path.write_text("src,dst,demand\n1,2,1\n" + body)
        with pytest.raises(ConfigError, match="Malformed demand row on line 3"):
            load_demands(path)
