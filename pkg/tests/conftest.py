import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fraudgnn.graph import MultiRelationGraph

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_edges(rng, n, m):
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    u = rng.integers(0, n, m)
    v = rng.integers(0, n, m)
    return np.stack([u, v], axis=1)


def random_graph(rng, n=20, d=4, relations=2, mean_degree=3.0, fraud=0.3):
    edges = [random_edges(rng, n, int(mean_degree * n / 2)) for _ in range(relations)]
    x = rng.standard_normal((n, d))
    y = (rng.random(n) < fraud).astype(np.int64)
    return MultiRelationGraph.from_edge_lists(x, y, edges), edges


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_graph():
    """Three nodes, one relation, a single edge 0-1."""
    return MultiRelationGraph.from_edge_lists(np.eye(3), np.array([0, 1, 0]), [[(0, 1)]])


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
