import math

import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given
from hypothesis import strategies as st

from conftest import floyd_warshall, path_graph, random_graph, triangle
from pnormsolve.errors import InvalidInputError
from pnormsolve.graph import Graph, incidence_matrix, weighted_laplacian
from pnormsolve.instances import VoltageInstance
from pnormsolve.voltage_sparsify import (baswana_sen_spanner, effective_resistances,
                                         spanner_sparsify, spectral_sample_count,
                                         spectral_sparsify, voltage_scaling)


def stretch(g, lengths, kept):
    D_G = floyd_warshall(g.vertex_count, g.tails, g.heads, lengths)
    sub = g.subgraph(kept)
    D_H = floyd_warshall(g.vertex_count, sub.tails, sub.heads, lengths[kept])
    off = ~np.eye(g.vertex_count, dtype=bool) & np.isfinite(D_G)
    return float(np.max(D_H[off] / D_G[off], initial=1.0))


def generalized_extremes(g, w, kept, weights):
    """Extreme eigenvalues of (L_H, L_G) restricted to vectors orthogonal to the all-ones vector."""
    n = g.vertex_count
    L_G = weighted_laplacian(g, w).toarray()
    full = np.zeros(g.edge_count)
    full[kept] = weights
    L_H = weighted_laplacian(g, full).toarray()
    Q = la.null_space(np.ones((1, n)))
    vals = la.eigh(Q.T @ L_H @ Q, Q.T @ L_G @ Q, eigvals_only=True)
    return vals.min(), vals.max()


def test_spanner_of_tree_is_tree():
    g = random_graph(15, 14, 3)
    kept = baswana_sen_spanner(g, np.ones(14), 3, np.random.default_rng(0))
    assert kept.tolist() == list(range(14))


def test_spanner_triangle():
    kept = baswana_sen_spanner(triangle(), np.ones(3), 2, np.random.default_rng(1))
    assert len(kept) <= 3
    assert stretch(triangle(), np.ones(3), kept) <= 3


def test_spanner_complete_graph():
    n = 20
    g = Graph(n, [(u, v) for u in range(n) for v in range(u + 1, n)])
    kept = baswana_sen_spanner(g, np.ones(g.edge_count), 3, np.random.default_rng(2))
    assert stretch(g, np.ones(g.edge_count), kept) <= 5
    assert len(kept) < g.edge_count


def test_spanner_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        baswana_sen_spanner(triangle(), np.ones(3), 1, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        baswana_sen_spanner(triangle(), np.array([1.0, 0.0, 1.0]), 2, np.random.default_rng(0))


def test_spectral_single_edge():
    kept, weights = spectral_sparsify(Graph(2, [(0, 1)]), [2.5], 0.5, 0.1, np.random.default_rng(0))
    assert kept.tolist() == [0]
    assert weights == pytest.approx([2.5])


def test_spectral_tree_keeps_everything():
    g = random_graph(12, 11, 4)
    w = np.random.default_rng(1).uniform(0.5, 2, 11)
    kept, weights = spectral_sparsify(g, w, 0.5, 0.1, np.random.default_rng(2))
    assert kept.tolist() == list(range(11))
    # every leverage is 1, so each draw of an edge adds w_e (n - 1) / q
    q = spectral_sample_count(12, 0.5, 0.1)
    counts = weights / w * q / 11
    assert np.allclose(counts, np.round(counts)) and np.all(np.round(counts) >= 1)
    assert round(counts.sum()) == q


def test_spectral_random_graph_eigenvalues():
    g = random_graph(30, 200, 5)
    w = np.random.default_rng(3).uniform(0.1, 10, 200)
    kept, weights = spectral_sparsify(g, w, 0.5, 0.1, np.random.default_rng(4))
    lo, hi = generalized_extremes(g, w, kept, weights)
    assert 1 / 1.5 ** 2 <= lo and hi <= 1.5 ** 2


def test_effective_resistance_examples():
    assert np.allclose(effective_resistances(path_graph(3), np.ones(2)), [1, 1])
    assert np.allclose(effective_resistances(triangle(), np.ones(3)), [2 / 3] * 3)


def test_sparsify_pure_halves():
    g = random_graph(20, 60, 6)
    rng = np.random.default_rng(0)
    d = np.zeros(20)
    only_w = spanner_sparsify(VoltageInstance(g, rng.uniform(1, 2, 60), np.zeros(60), d, 3), 0.1, rng)
    assert only_w.spanner_edges.size == 0 and np.all(only_w.t == 0)
    only_s = spanner_sparsify(VoltageInstance(g, np.zeros(60), rng.uniform(1, 2, 60), d, 3), 0.1, rng)
    assert only_s.spectral_edges.size == 0 and np.all(only_s.u == 0)


def test_sparsify_drops_inert_edges():
    g = path_graph(4)
    inst = VoltageInstance(g, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], np.zeros(4), 3)
    out = spanner_sparsify(inst, 0.1, np.random.default_rng(0))
    assert 2 not in out.edge_ids.tolist()


def sandwich_violations(inst, out, rng, samples):
    B_G = incidence_matrix(inst.graph)
    B_H = incidence_matrix(out.graph)
    m, p = inst.graph.edge_count, inst.p
    lower = upper = 0
    for _ in range(samples):
        x = rng.normal(size=inst.graph.vertex_count)
        full = np.linalg.norm(inst.s * (B_G @ x), p)
        sparse = np.linalg.norm(out.t * (B_H @ x), p)
        lower += sparse > full
        upper += full > m ** (1 / p) * out.stretch * sparse * (1 + 1e-12)
    return lower, upper


def test_dense_instance_sandwich_and_size():
    n, m, delta = 40, 600, 0.1
    g = random_graph(n, m, 7)
    rng = np.random.default_rng(8)
    inst = VoltageInstance(g, rng.uniform(0.1, 10, m), rng.uniform(0.1, 10, m), np.zeros(n), 4.0)
    out = spanner_sparsify(inst, delta, rng)
    assert out.edge_ids.size <= 16 * n * math.log(n / delta)
    assert sandwich_violations(inst, out, rng, 1000) == (0, 0)


def test_voltage_scaling_examples():
    assert voltage_scaling(16, 5)[0] == pytest.approx(0.5)
    assert voltage_scaling(100, 3)[0] == pytest.approx(0.1)
    assert voltage_scaling(100, 1e6)[0] == pytest.approx(1.0, abs=1e-4)
    mu2, kappa2 = voltage_scaling(64, 3, n=16)
    assert kappa2 == pytest.approx(8 * 7)
    with pytest.raises(InvalidInputError):
        voltage_scaling(0, 3)


def test_sample_count_formula():
    assert spectral_sample_count(30, 0.5, 0.1) == math.ceil(30 * 4 * math.log(300))


@given(st.integers(4, 25), st.integers(0, 40), st.integers(2, 5), st.integers(0, 10 ** 6))
def test_spanner_linf_chain(n, extra, k, seed):
    g = random_graph(n, n - 1 + extra, seed)
    rng = np.random.default_rng(seed)
    lengths = rng.uniform(0.1, 3, g.edge_count)
    kept = baswana_sen_spanner(g, lengths, k, rng)
    assert stretch(g, lengths, kept) <= (2 * k - 1) * (1 + 1e-12)
    B = incidence_matrix(g)
    for _ in range(5):
        x = rng.normal(size=n)
        ratios = np.abs(B @ x) / lengths
        assert ratios[kept].max() <= ratios.max()
        assert ratios.max() <= (2 * k - 1) * ratios[kept].max() * (1 + 1e-12)


@given(st.integers(5, 20), st.integers(0, 10 ** 6), st.sampled_from([2.0, 3.0, 6.0]))
def test_sparsified_mixed_sandwich(n, seed, p):
    g = random_graph(n, 3 * n, seed)
    m = g.edge_count
    rng = np.random.default_rng(seed)
    w, s = rng.uniform(0.1, 5, m), rng.uniform(0.1, 5, m)
    inst = VoltageInstance(g, w, s, np.zeros(n), p)
    out = spanner_sparsify(inst, 0.1, rng)
    assert set(out.edge_ids.tolist()) <= set(range(m))
    assert np.array_equal(out.t[np.isin(out.edge_ids, out.spanner_edges)], s[out.spanner_edges])
    B_G, B_H = incidence_matrix(g), incidence_matrix(out.graph)
    mu = m ** (-1 / (p - 1))
    lo, hi = generalized_extremes(g, w, out.spectral_edges, out.u[np.isin(out.edge_ids, out.spectral_edges)])
    slack = 1 / lo if lo > 0 else np.inf
    for _ in range(50):
        x = rng.normal(size=n)
        bg, bh = B_G @ x, B_H @ x
        left = mu * (mu * np.sum(w * bg ** 2) + np.sum(np.abs(s * bg) ** p) / m)
        # the p-norm side loses the spanner stretch once per power
        right = mu * (max(slack, 1.0) * np.sum(out.u * bh ** 2)
                      + out.stretch ** p * np.sum(np.abs(out.t * bh) ** p))
        assert left <= right * (1 + 1e-9)
