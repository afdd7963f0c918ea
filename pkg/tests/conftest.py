import numpy as np
import pytest

from urbanbounds.geo import CellId
from urbanbounds.odgraph import OdGraph

ACCEPTANCE_LINES: list[str] = []


def make_graph(edges, directed=True):
    """OdGraph from ``{(i, j): w}`` over integer node labels (cells (i, 0))."""
    return OdGraph.from_edges({(CellId(a, 0), CellId(b, 0)): w for (a, b), w in edges.items()},
                              directed)


def random_strong_graph(rng, n, p=0.4, wmax=5):
    """Random directed graph on n nodes containing a Hamiltonian cycle
    (hence strongly connected) plus extra random edges."""
    order = rng.permutation(n)
    edges = {}
    for k in range(n):
        edges[(int(order[k]), int(order[(k + 1) % n]))] = int(rng.integers(1, wmax + 1))
    for a in range(n):
        for b in range(n):
            if a != b and rng.random() < p:
                edges[(a, b)] = int(rng.integers(1, wmax + 1))
    return make_graph(edges)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    def record(number, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"acceptance {number}: {status}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
