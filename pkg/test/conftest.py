"""Pytest configuration and shared fixtures."""

import json
import sys
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from spef_te.cli import main
from spef_te.net_model import DemandMatrix, Link, Topology, write_demands


def pytest_configure(config: pytest.Config) -> None:
    """Register custom pytest markers."""
    config.addinivalue_line("markers", "unit: unit tests")
    config.addinivalue_line("markers", "integration: integration tests")
    config.addinivalue_line("markers", "e2e: end-to-end tests")


def _run_main(args: list[str]) -> tuple[int, str, str]:
    """Run main() with patched sys.argv and return exit code, stdout, stderr."""
    stdout_lines: list[str] = []
    stderr_lines: list[str] = []

    def mock_print(*print_args: object, **kwargs: object) -> None:
        text = " ".join(str(a) for a in print_args)
        if kwargs.get("file") is sys.stderr:
            stderr_lines.append(text)
        elif kwargs.get("file") is None:
            stdout_lines.append(text)

    with patch("sys.argv", ["prog"] + args):
        with patch("builtins.print", side_effect=mock_print):
            with pytest.raises(SystemExit) as exc_info:
                main()
            code = int(exc_info.value.code or 0)
            return code, "\n".join(stdout_lines), "\n".join(stderr_lines)


def fig1_instance() -> tuple[Topology, DemandMatrix]:
    """Four nodes, unit capacities; demand 1 from 1 to 3 and 0.9 from 3 to 4."""
    links = (
        Link("1-3", "1", "3", 1.0),
        Link("3-4", "3", "4", 1.0),
        Link("1-2", "1", "2", 1.0),
        Link("2-3", "2", "3", 1.0),
    )
    topo = Topology(nodes=("1", "2", "3", "4"), links=links)
    return topo, DemandMatrix({("1", "3"): 1.0, ("3", "4"): 0.9})


def random_instance(
    seed: int,
    max_nodes: int = 10,
    max_demands: int = 3,
    load: float = 0.3,
) -> tuple[Topology, DemandMatrix]:
    """Strongly connected random digraph with a few light demands.

    A bidirectional ring guarantees connectivity; chords are added at random.
    Demands total `load` times the smallest capacity, so every instance is
    strictly feasible.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, max_nodes + 1))
    nodes = tuple(str(i) for i in range(n))
    edges = {(i, (i + 1) % n) for i in range(n)} | {((i + 1) % n, i) for i in range(n)}
    for _ in range(n):
        a, b = (int(x) for x in rng.choice(n, size=2, replace=False))
        edges.add((a, b))
    links = tuple(
        Link(f"{a}-{b}", str(a), str(b), float(rng.uniform(1.0, 4.0)))
        for a, b in sorted(edges)
    )
    topo = Topology(nodes=nodes, links=links)
    smallest = min(link.capacity for link in links)
    pairs: set[tuple[str, str]] = set()
    count = int(rng.integers(1, max_demands + 1))
    while len(pairs) < count:
        a, b = (int(x) for x in rng.choice(n, size=2, replace=False))
        pairs.add((str(a), str(b)))
    share = load * smallest / count
    return topo, DemandMatrix({pair: share for pair in sorted(pairs)})


def bottleneck_instance() -> tuple[Topology, DemandMatrix]:
    """ECMP-blind bottleneck: InvCap leaves a thin direct link idle.

    The direct link a->c has capacity 2 (InvCap weight 0.5) while the detour
    a->b->c has capacity 10 per link (InvCap length 0.2). InvCap sends all
    demand over the detour; the direct link is idle. With demand 11, OSPF
    overloads the detour while the network can carry 12.
    """
    links = (
        Link("a-c", "a", "c", 2.0),
        Link("a-b", "a", "b", 10.0),
        Link("b-c", "b", "c", 10.0),
    )
    topo = Topology(nodes=("a", "b", "c"), links=links)
    return topo, DemandMatrix({("a", "c"): 11.0})


def write_instance(topo: Topology, dm: DemandMatrix, directory: Path) -> tuple[Path, Path]:
    """Write topology.json and demands.csv into directory."""
    topology_path = directory / "topology.json"
    topology_path.write_text(json.dumps(topo.to_dict()), encoding="utf-8")
    demands_path = directory / "demands.csv"
    write_demands(dm, demands_path)
    return topology_path, demands_path


@pytest.fixture
def run_main_with_args():
    """Fixture that returns a function to run main() with args."""
    return _run_main


@pytest.fixture
def fig1() -> tuple[Topology, DemandMatrix]:
    """The four-node reference instance."""
    return fig1_instance()


@pytest.fixture
def fig1_files(tmp_path: Path) -> tuple[Path, Path]:
    """topology.json and demands.csv of the four-node instance in tmp_path."""
    topo, dm = fig1_instance()
    return write_instance(topo, dm, tmp_path)
