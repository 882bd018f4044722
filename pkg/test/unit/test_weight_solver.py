"""Unit tests for the weight_solver module (first link weights)."""

import networkx as nx
import numpy as np
import pytest
from scipy.optimize import minimize

from spef_te.errors import (
    ConfigError,
    DomainError,
    InfeasibleDemandError,
    RoutingError,
)
from spef_te.net_model import DemandMatrix, FlowAssignment, Link, Topology, validate_flow
from spef_te.objectives import UtilitySpec, link_utilities, marginal_utilities
from spef_te.weight_solver import (
    SolverConfig,
    balance_deviation,
    dual_gap,
    round_weights,
    route_to_destination,
    shortest_distances,
    solve_first_weights,
    verify_balance,
    verify_kkt,
)
from test.conftest import random_instance

FIG1_ORDER = ("1-3", "3-4", "1-2", "2-3")


def _square() -> Topology:
    """Two equal-cost two-hop paths a->b->d and a->c->d."""
    links = (
        Link("a-c", "a", "c", 1.0),
        Link("a-b", "a", "b", 1.0),
        Link("b-d", "b", "d", 1.0),
        Link("c-d", "c", "d", 1.0),
    )
    return Topology(nodes=("a", "b", "c", "d"), links=links)


@pytest.mark.unit
class TestShortestRouting:
    """Tests for shortest_distances and route_to_destination."""

    def test_distances(self, fig1) -> None:
        """Distances toward 3 under unit weights."""
        topo, _ = fig1
        dist = shortest_distances(topo, np.ones(4), "3")
        assert dist == {"3": 0.0, "1": 1.0, "2": 1.0}

    def test_single_path_routing(self, fig1) -> None:
        """Unit weights send (1, 3) over the direct link."""
        topo, _ = fig1
        w = dict.fromkeys(topo.link_ids, 1.0)
        flows = route_to_destination(topo, w, "3", {"1": 1.0})
        assert flows == {"1-3": 1.0, "3-4": 0.0, "1-2": 0.0, "2-3": 0.0}

    def test_tie_break_prefers_smallest_head_node(self) -> None:
        """Among equal-cost next hops the smallest head node wins."""
        topo = _square()
        w = dict.fromkeys(topo.link_ids, 1.0)
        flows = route_to_destination(topo, w, "d", {"a": 2.0})
        assert flows["a-b"] == 2.0
        assert flows["a-c"] == 0.0

    def test_flows_accumulate_through_transit_nodes(self, fig1) -> None:
        """Demand from 1 and 2 toward 3 share link 2-3 when 1-3 is expensive."""
        topo, _ = fig1
        w = {"1-3": 5.0, "3-4": 1.0, "1-2": 1.0, "2-3": 1.0}
        flows = route_to_destination(topo, w, "3", {"1": 1.0, "2": 0.5})
        assert flows["2-3"] == pytest.approx(1.5)
        assert flows["1-2"] == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_cost_matches_enumerated_shortest_paths(self, seed: int) -> None:
        """Routed cost equals demand times the cheapest simple path, over single paths."""
        topo, _ = random_instance(200 + seed, max_nodes=6)
        rng = np.random.default_rng(seed)
        w = {link_id: float(rng.integers(1, 4)) for link_id in topo.link_ids}
        dest = topo.nodes[-1]
        demands = {node: 0.25 + 0.5 * i for i, node in enumerate(topo.nodes[:-1])}
        flows = route_to_destination(topo, w, dest, demands)
        graph = nx.DiGraph()
        graph.add_weighted_edges_from((l.src, l.dst, w[l.id]) for l in topo.links)
        cheapest = {
            src: min(
                nx.path_weight(graph, path, weight="weight")
                for path in nx.all_simple_paths(graph, src, dest)
            )
            for src in demands
        }
        routed_cost = sum(w[link_id] * flow for link_id, flow in flows.items())
        assert routed_cost == pytest.approx(sum(d * cheapest[s] for s, d in demands.items()))
        for node in topo.nodes[:-1]:
            used = [l for l in topo.out_links(node) if flows[l.id] > 0]
            assert len(used) <= 1

    def test_unreachable_source(self, fig1) -> None:
        """Node 4 has no path to 1."""
        topo, _ = fig1
        with pytest.raises(RoutingError):
            route_to_destination(topo, dict.fromkeys(topo.link_ids, 1.0), "1", {"4": 1.0})

    def test_negative_weight(self, fig1) -> None:
        """Weights must be non-negative."""
        topo, _ = fig1
        w = {"1-3": -1.0}
        with pytest.raises(DomainError):
            route_to_destination(topo, w, "3", {"1": 1.0})


@pytest.mark.unit
def test_dual_gap(fig1) -> None:
    """gap = sum w (f + s - c)."""
    topo, _ = fig1
    w = {"1-3": 1.0, "3-4": 2.0, "1-2": 0.0, "2-3": 0.0}
    s = {"1-3": 0.5, "3-4": 0.5, "1-2": 1.0, "2-3": 1.0}
    f = {"1-3": 1.0, "3-4": 0.0, "1-2": 0.0, "2-3": 0.0}
    assert dual_gap(topo, w, s, f) == pytest.approx(0.5 - 1.0)


@pytest.mark.unit
class TestReferenceInstance:
    """The four-node instance under the three reference objectives."""

    def test_proportional_utilizations(self, fig1) -> None:
        """beta = 1 gives utilizations (2/3, 0.9, 1/3, 1/3)."""
        topo, dm = fig1
        result = solve_first_weights(topo, dm, UtilitySpec(beta=1.0))
        util = result.utilization()
        expected = (2 / 3, 0.9, 1 / 3, 1 / 3)
        for link_id, value in zip(FIG1_ORDER, expected):
            assert util[link_id] == pytest.approx(value, abs=0.02)

    def test_proportional_weights(self, fig1) -> None:
        """Weights are proportional to (3, 10, 1.5, 1.5) with link 3-4 at 10."""
        topo, dm = fig1
        result = solve_first_weights(topo, dm, UtilitySpec(beta=1.0))
        norm = 10.0 / result.first_weights["3-4"]
        expected = (3.0, 10.0, 1.5, 1.5)
        for link_id, value in zip(FIG1_ORDER, expected):
            assert result.first_weights[link_id] * norm == pytest.approx(value, rel=0.03)

    def test_proportional_converges(self, fig1) -> None:
        """The default solver converges and refines."""
        topo, dm = fig1
        result = solve_first_weights(topo, dm, UtilitySpec(beta=1.0))
        assert result.converged
        assert result.refined
        assert result.unique

    def test_min_max_limit(self, fig1) -> None:
        """Large beta approaches the min-max utilizations (0.5, 0.9, 0.5, 0.5)."""
        topo, dm = fig1
        result = solve_first_weights(topo, dm, UtilitySpec(beta=50.0))
        util = result.utilization()
        expected = (0.5, 0.9, 0.5, 0.5)
        for link_id, value in zip(FIG1_ORDER, expected):
            assert util[link_id] == pytest.approx(value, abs=0.03)

    def test_min_hop(self, fig1) -> None:
        """beta = 0 keeps (1, 3) on the direct link: (1, 0.9, 0, 0) exactly."""
        topo, dm = fig1
        result = solve_first_weights(topo, dm, UtilitySpec(beta=0.0))
        util = result.utilization()
        assert [util[link_id] for link_id in FIG1_ORDER] == pytest.approx(
            [1.0, 0.9, 0.0, 0.0], abs=1e-12
        )

    def test_min_hop_saturation_flags_non_unique(self, fig1) -> None:
        """The saturated direct link makes the optimum non-unique."""
        topo, dm = fig1
        result = solve_first_weights(topo, dm, UtilitySpec(beta=0.0))
        assert not result.unique
        assert result.first_weights == dict.fromkeys(topo.link_ids, 1.0)

    def test_min_hop_overloaded_shortest_link(self, fig1) -> None:
        """1.5 units from 1 to 3: the direct link fills and the rest takes 1-2-3."""
        topo, _ = fig1
        dm = DemandMatrix({("1", "3"): 1.5, ("3", "4"): 0.9})
        spec = UtilitySpec(beta=0.0)
        result = solve_first_weights(topo, dm, spec)
        assert result.converged
        assert not result.unique
        util = result.utilization()
        assert [util[link_id] for link_id in FIG1_ORDER] == pytest.approx(
            [1.0, 0.9, 0.5, 0.5], abs=1e-9
        )
        weights = [result.first_weights[link_id] for link_id in FIG1_ORDER]
        assert weights == pytest.approx([2.0, 1.0, 1.0, 1.0], abs=1e-9)
        report = verify_kkt(
            topo, dm, spec, result.first_weights, result.spare, result.flow, tol=1e-9
        )
        assert report.within(1e-6), report.to_dict()

    def test_linear_weight_space_matches_root_at_beta_one(self, fig1) -> None:
        """At beta = 1 both update spaces give the same answer."""
        topo, dm = fig1
        spec = UtilitySpec(beta=1.0)
        root = solve_first_weights(topo, dm, spec)
        linear = solve_first_weights(topo, dm, spec, SolverConfig(weight_space="linear"))
        for link_id in topo.link_ids:
            assert linear.optimal_flow[link_id] == pytest.approx(
                root.optimal_flow[link_id], abs=1e-6
            )

    def test_without_refinement_is_close(self, fig1) -> None:
        """Averaged subgradient iterates alone land near the optimum."""
        topo, dm = fig1
        cfg = SolverConfig(refine=False, max_iters=5000)
        result = solve_first_weights(topo, dm, UtilitySpec(beta=1.0), cfg)
        assert not result.refined
        assert result.utilization()["1-3"] == pytest.approx(2 / 3, abs=0.05)

    def test_flow_realizes_target_loads(self, fig1) -> None:
        """The per-destination flow is feasible and sums to f*."""
        topo, dm = fig1
        result = solve_first_weights(topo, dm, UtilitySpec(beta=1.0))
        assert validate_flow(topo, dm, result.flow, tol=1e-9).feasible
        aggregate = result.flow.aggregate()
        for link_id in topo.link_ids:
            assert aggregate[link_id] == pytest.approx(result.optimal_flow[link_id], abs=1e-12)

    def test_trace_min_gap_shrinks(self, fig1) -> None:
        """The smallest |gap| seen so far never grows across 50-iteration windows."""
        topo, dm = fig1
        cfg = SolverConfig(max_iters=500, gap_tol=1e-14, refine=False)
        result = solve_first_weights(topo, dm, UtilitySpec(beta=1.0), cfg)
        gaps = np.abs([row.gap for row in result.trace])
        running = np.minimum.accumulate(gaps)
        checkpoints = running[49::50]
        assert np.all(np.diff(checkpoints) <= 0)
        assert running[-1] < gaps[0]


@pytest.mark.unit
class TestEdgeCases:
    """Zero demand, infeasibility and unreachable pairs."""

    def test_zero_demand(self, fig1) -> None:
        """No demand: no flow, spare equals capacity."""
        topo, _ = fig1
        result = solve_first_weights(topo, DemandMatrix.zero(), UtilitySpec(beta=1.0))
        assert result.optimal_flow == dict.fromkeys(topo.link_ids, 0.0)
        assert result.spare == pytest.approx(dict.fromkeys(topo.link_ids, 1.0))
        assert result.converged

    @pytest.mark.parametrize("beta", [0.0, 1.0])
    def test_demand_above_cut(self, fig1, beta: float) -> None:
        """2.5 units cannot leave node 1 over two unit links."""
        topo, _ = fig1
        dm = DemandMatrix({("1", "3"): 2.5})
        with pytest.raises(InfeasibleDemandError):
            solve_first_weights(topo, dm, UtilitySpec(beta=beta))

    def test_unreachable_pair(self, fig1) -> None:
        """Node 4 cannot reach node 1."""
        topo, _ = fig1
        dm = DemandMatrix({("4", "1"): 0.5})
        with pytest.raises(RoutingError):
            solve_first_weights(topo, dm, UtilitySpec(beta=1.0))


@pytest.mark.unit
@pytest.mark.parametrize("seed", range(20))
def test_kkt_on_random_instances(seed: int) -> None:
    """Every optimality residual family stays below 1e-3."""
    topo, dm = random_instance(seed)
    spec = UtilitySpec(beta=1.0 if seed % 2 == 0 else 2.0)
    result = solve_first_weights(topo, dm, spec)
    report = verify_kkt(
        topo, dm, spec, result.first_weights, result.spare, result.flow, tol=1e-9
    )
    assert report.within(1e-3), report.to_dict()


def _path_flow_optimum(
    topo: Topology, dm: DemandMatrix, spec: UtilitySpec
) -> tuple[np.ndarray, float]:
    """Maximize the total utility over path flows on every simple path.

    Returns the optimal link loads in link index order and the utility there.
    """
    graph = nx.DiGraph()
    graph.add_edges_from((link.src, link.dst, {"id": link.id}) for link in topo.links)
    variables: list[tuple[tuple[str, str], list[str]]] = []
    for src, dest, _ in dm.pairs():
        for nodes in nx.all_simple_paths(graph, src, dest):
            ids = [graph.edges[u, v]["id"] for u, v in zip(nodes, nodes[1:])]
            variables.append(((src, dest), ids))
    incidence = np.zeros((len(topo.link_ids), len(variables)))
    for column, (_, ids) in enumerate(variables):
        for link_id in ids:
            incidence[topo.index(link_id), column] = 1.0
    caps = topo.capacities
    q = spec.q_vector(topo)
    pairs = sorted({pair for pair, _ in variables})
    members = [np.array([p == pair for p, _ in variables]) for pair in pairs]

    def objective(x: np.ndarray) -> float:
        return -float(np.sum(link_utilities(spec.beta, q, caps - incidence @ x)))

    def gradient(x: np.ndarray) -> np.ndarray:
        return incidence.T @ marginal_utilities(spec.beta, q, caps - incidence @ x)

    constraints = [
        {"type": "eq", "fun": lambda x, m=m, d=dm.demand(*pair): float(x[m].sum() - d)}
        for m, pair in zip(members, pairs)
    ]
    x0 = np.zeros(len(variables))
    for m, pair in zip(members, pairs):
        x0[m] = dm.demand(*pair) / m.sum()
    bounds = [(0.0, dm.demand(*pair)) for pair, _ in variables]
    result = minimize(
        objective,
        x0,
        jac=gradient,
        bounds=bounds,
        constraints=constraints,
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 1000},
    )
    assert result.success, result.message
    return incidence @ result.x, -float(result.fun)


@pytest.mark.unit
@pytest.mark.parametrize("seed", range(8))
def test_target_loads_match_path_flow_optimum(seed: int) -> None:
    """Target loads and utility agree with a direct optimization over path flows."""
    topo, dm = random_instance(100 + seed, max_nodes=6)
    spec = UtilitySpec(beta=1.0 if seed % 2 == 0 else 2.0)
    result = solve_first_weights(topo, dm, spec)
    expected_loads, expected_utility = _path_flow_optimum(topo, dm, spec)
    loads = topo.vector(result.optimal_flow)
    achieved = float(
        np.sum(link_utilities(spec.beta, spec.q_vector(topo), topo.capacities - loads))
    )
    assert achieved == pytest.approx(expected_utility, abs=1e-5)
    assert loads == pytest.approx(expected_loads, abs=2e-3)


@pytest.mark.unit
def test_kkt_flags_wrong_weights(fig1) -> None:
    """Perturbed weights break stationarity."""
    topo, dm = fig1
    spec = UtilitySpec(beta=1.0)
    result = solve_first_weights(topo, dm, spec)
    bad = {k: v * 2.0 for k, v in result.first_weights.items()}
    report = verify_kkt(topo, dm, spec, bad, result.spare, result.flow)
    assert report.stationarity > 0.1


@pytest.mark.unit
def test_kkt_flags_non_shortest_flow(fig1) -> None:
    """Flow on a longer path shows up as a reduced-cost residual."""
    topo, dm = fig1
    spec = UtilitySpec(beta=1.0)
    w = {"1-3": 1.0, "3-4": 10.0, "1-2": 1.0, "2-3": 1.0}
    fa = FlowAssignment(topo, {"3": {"1-2": 1.0, "2-3": 1.0}, "4": {"3-4": 0.9}})
    s = {"1-3": 1.0, "3-4": 0.1, "1-2": 1e-3, "2-3": 1e-3}
    report = verify_kkt(topo, dm, spec, w, s, fa)
    assert report.reduced_cost == pytest.approx(1.0)


@pytest.mark.unit
class TestBalance:
    """Tests for the proportional balance inequality."""

    def test_optimum_passes(self, fig1) -> None:
        """Random feasible flows never beat the optimum."""
        topo, dm = fig1
        spec = UtilitySpec(beta=1.0)
        result = solve_first_weights(topo, dm, spec)
        report = verify_balance(topo, dm, spec, result.flow, samples=100, seed=3)
        assert report.passed
        assert report.samples == 100

    def test_equal_cost_shift_is_neutral(self, fig1) -> None:
        """Moving (1, 3) entirely to the equal-cost detour leaves the sum at zero."""
        topo, dm = fig1
        spec = UtilitySpec(beta=1.0)
        result = solve_first_weights(topo, dm, spec)
        detour = {"1-3": 1.0, "3-4": 0.1, "1-2": 0.0, "2-3": 0.0}
        assert balance_deviation(spec, topo, detour, result.spare) == pytest.approx(
            0.0, abs=1e-8
        )

    def test_suboptimal_reference_fails(self, fig1) -> None:
        """All of (1, 3) on the detour is not balanced."""
        topo, dm = fig1
        spec = UtilitySpec(beta=1.0)
        fa = FlowAssignment(topo, {"3": {"1-2": 0.9, "2-3": 0.9, "1-3": 0.1}, "4": {"3-4": 0.9}})
        report = verify_balance(topo, dm, spec, fa, samples=200, seed=0)
        assert not report.passed
        assert report.worst_deviation > 0

    def test_zero_reference_spare_rejected(self, fig1) -> None:
        """Reference spare capacities must be positive."""
        topo, _ = fig1
        spec = UtilitySpec(beta=1.0)
        zero = dict.fromkeys(topo.link_ids, 0.0)
        with pytest.raises(DomainError):
            balance_deviation(spec, topo, zero, zero)


@pytest.mark.unit
class TestRoundWeights:
    """Tests for integer weight rounding."""

    def test_reference_instance(self, fig1) -> None:
        """The beta = 1 solution rounds to (2, 7, 1, 1)."""
        topo, dm = fig1
        result = solve_first_weights(topo, dm, UtilitySpec(beta=1.0))
        rounded = round_weights(result.first_weights, result.spare)
        assert [rounded[link_id] for link_id in FIG1_ORDER] == [2, 7, 1, 1]

    def test_floor_at_one(self) -> None:
        """Tiny weights still round to 1."""
        assert round_weights({"l": 1e-6}, {"l": 1.0}) == {"l": 1}

    def test_half_rounds_up(self) -> None:
        """x.5 rounds up."""
        assert round_weights({"l": 2.5}, {"l": 1.0}) == {"l": 3}


@pytest.mark.unit
class TestSolverConfig:
    """Tests for SolverConfig validation."""

    def test_invalid_schedule(self) -> None:
        """Unknown schedules list valid options."""
        with pytest.raises(ConfigError, match="Valid options"):
            SolverConfig(step_schedule="adaptive")

    def test_invalid_weight_space(self) -> None:
        """Unknown weight spaces are rejected."""
        with pytest.raises(ConfigError):
            SolverConfig(weight_space="log")

    def test_non_positive_gamma(self) -> None:
        """gamma must be positive."""
        with pytest.raises(ConfigError):
            SolverConfig(gamma=0.0)

    def test_unknown_key(self) -> None:
        """from_dict rejects unknown settings."""
        with pytest.raises(ConfigError, match="Unknown solver setting"):
            SolverConfig.from_dict({"momentum": 0.9})

    def test_default_step_is_inverse_max_capacity(self, fig1) -> None:
        """The default constant step is 1 / max capacity."""
        topo, _ = fig1
        assert SolverConfig().step(7, topo) == 1.0

    def test_diminishing_step(self, fig1) -> None:
        """The diminishing schedule divides by the iteration number."""
        topo, _ = fig1
        cfg = SolverConfig(step_schedule="diminishing", gamma=2.0)
        assert cfg.step(4, topo) == pytest.approx(0.5)

    def test_explicit_initial_weights(self, fig1) -> None:
        """A link -> weight table seeds the solver and still converges."""
        topo, dm = fig1
        cfg = SolverConfig(initial_weights={"1-3": 2.0})
        result = solve_first_weights(topo, dm, UtilitySpec(beta=1.0), cfg)
        assert result.utilization()["1-3"] == pytest.approx(2 / 3, abs=1e-6)
