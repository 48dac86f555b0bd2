import json
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pnormsolve.graph import Graph
from pnormsolve.io import random_connected_graph

FIXTURES = Path(__file__).parent / "fixtures"

settings.register_profile(
    "default", max_examples=40, deadline=None, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")

# acceptance results collected during the run and echoed at the end
ACCEPTANCE_LINES = {}


def load_fixture(name):
    return json.loads((FIXTURES / f"{name}.json").read_text())


@pytest.fixture(scope="session")
def fixture_data():
    return load_fixture


@pytest.fixture(autouse=True)
def _quiet_range_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=r".*entries fall outside.*")
        yield


def triangle():
    return Graph(3, [(0, 1), (1, 2), (2, 0)])


def path_graph(n):
    return Graph(n, [(i, i + 1) for i in range(n - 1)])


def random_graph(n, m, seed):
    return random_connected_graph(n, m, np.random.default_rng(seed))


def floyd_warshall(n, tails, heads, lengths):
    D = np.full((n, n), np.inf)
    np.fill_diagonal(D, 0.0)
    for u, v, ell in zip(tails, heads, lengths):
        D[u, v] = min(D[u, v], ell)
        D[v, u] = min(D[v, u], ell)
    for k in range(n):
        D = np.minimum(D, D[:, [k]] + D[[k], :])
    return D


def simple_cycles(n, tails, heads):
    """Every simple cycle of an undirected multigraph as ``[(edge, sign), ...]``.

    A cycle is reported once: it starts with its smallest edge, traversed tail to head.
    """
    adj = [[] for _ in range(n)]
    for e, (u, v) in enumerate(zip(tails, heads)):
        adj[u].append((e, v, 1))
        adj[v].append((e, u, -1))
    found = []
    for e0, (t0, h0) in enumerate(zip(tails, heads)):
        if t0 == h0:
            found.append([(e0, 1)])
            continue
        stack = [(h0, [(e0, 1)], {t0, h0})]
        while stack:
            x, path, seen = stack.pop()
            for e, y, sign in adj[x]:
                if e <= e0:
                    continue
                if y == t0:
                    found.append(path + [(e, sign)])
                elif y not in seen:
                    stack.append((y, path + [(e, sign)], seen | {y}))
    return found


def flow_instance_with_untouched(n, m, seed, untouched_fraction=0.4, consistent=True, p=3.0):
    """Random flow instance where some edges have ``r = s = 0``.

    With ``consistent`` the gradient on those edges is a potential difference,
    so no untouched cycle gains anything.
    """
    from pnormsolve.instances import FlowInstance
    rng = np.random.default_rng(seed)
    g = random_graph(n, m, seed)
    m = g.edge_count
    untouched = rng.random(m) < untouched_fraction
    r = np.where(untouched, 0.0, rng.uniform(0.1, 4, m))
    s = np.where(untouched, 0.0, rng.uniform(0.1, 4, m))
    grad = rng.normal(size=m)
    if consistent:
        phi = rng.normal(size=n)
        grad[untouched] = (phi[g.tails] - phi[g.heads])[untouched]
    return FlowInstance(g, grad, r, s, p)


def record_acceptance(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
