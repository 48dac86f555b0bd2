"""Edge sparsification for voltage problems: spanners for the p-norm edges,
effective-resistance sampling for the quadratic edges."""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError
from .graph import Graph, incidence_matrix, solve_laplacian, weighted_laplacian


def baswana_sen_spanner(g, lengths, k, rng):
    """Indices of the edges of a ``(2k-1)``-spanner of ``g`` under ``lengths``.

    Randomized cluster growing: in each of ``k-1`` rounds every current cluster
    survives with probability ``n^(-1/k)``; vertices of dead clusters either join
    a neighboring surviving cluster through their lightest edge or keep one
    lightest edge to every neighboring cluster. A final round links every vertex
    to each adjacent remaining cluster.
    """
    k = int(k)
    if k <= 1:
        raise InvalidInputError("spanner parameter k must exceed 1")
    lengths = np.asarray(lengths, dtype=float)
    if lengths.shape != (g.edge_count,) or np.any(~(lengths > 0)):
        raise InvalidInputError("edge lengths must be strictly positive")
    n = g.vertex_count
    prob = n ** (-1.0 / k)

    # lightest edge per unordered vertex pair; parallel copies are spanned by it
    best = {}
    for e, (u, v) in enumerate(zip(g.tails.tolist(), g.heads.tolist())):
        key = (min(u, v), max(u, v))
        if key not in best or (lengths[e], e) < (lengths[best[key]], best[key]):
            best[key] = e
    adj = [dict() for _ in range(n)]
    for (u, v), e in best.items():
        adj[u][v] = e
        adj[v][u] = e
    weight = lengths.tolist()

    spanner = set()
    cluster = list(range(n))  # cluster id per vertex, -1 once unclustered

    def remove(u, v):
        adj[u].pop(v, None)
        adj[v].pop(u, None)

    def lightest_per_cluster(v):
        out = {}
        for x, e in adj[v].items():
            c = cluster[x]
            if c < 0:
                continue
            cand = (weight[e], e)
            if c not in out or cand < out[c][0]:
                out[c] = (cand, x)
        return out

    for _ in range(k - 1):
        live = sorted({c for c in cluster if c >= 0})
        sampled = {c for c in live if rng.random() < prob}
        new_cluster = [c if c in sampled else -1 for c in cluster]
        for v in range(n):
            c_v = cluster[v]
            if c_v < 0 or c_v in sampled:
                continue
            nbrs = lightest_per_cluster(v)
            joins = [(cand, c) for c, (cand, _) in nbrs.items() if c in sampled]
            if not joins:
                for c, ((_, e), _) in nbrs.items():
                    spanner.add(e)
                for x in [x for x in adj[v] if cluster[x] >= 0]:
                    remove(v, x)
                continue
            (w_star, e_star), c_star = min(joins)
            spanner.add(e_star)
            new_cluster[v] = c_star
            for c, ((w_e, e), _) in nbrs.items():
                if c == c_star:
                    continue
                if (w_e, e) < (w_star, e_star):
                    spanner.add(e)
                    for x in [x for x in adj[v] if cluster[x] == c]:
                        remove(v, x)
            for x in [x for x in adj[v] if cluster[x] == c_star]:
                remove(v, x)
        cluster = new_cluster
        # drop edges inside a cluster and edges touching unclustered vertices
        for v in range(n):
            for x in list(adj[v]):
                if cluster[v] < 0 or cluster[x] < 0 or cluster[v] == cluster[x]:
                    remove(v, x)

    for v in range(n):
        for _, ((_, e), _) in lightest_per_cluster(v).items():
            spanner.add(e)
    return np.array(sorted(spanner), dtype=np.int64)


def effective_resistances(g, w):
    """``R_eff`` between the endpoints of every edge under conductances ``w``."""
    w = np.asarray(w, dtype=float)
    n = g.vertex_count
    L = weighted_laplacian(g, w).toarray()
    if n <= 2000:
        pinv = np.linalg.pinv(L, rcond=1e-12, hermitian=True)
        t, h = g.tails, g.heads
        return np.maximum(pinv[t, t] + pinv[h, h] - 2 * pinv[t, h], 0.0)
    out = np.empty(g.edge_count)
    for e, (t, h) in enumerate(zip(g.tails, g.heads)):
        rhs = np.zeros(n)
        rhs[t], rhs[h] = 1.0, -1.0
        x = solve_laplacian(g, w, rhs)
        out[e] = x[t] - x[h]
    return out


def spectral_sample_count(n, epsilon, delta, constant=1.0):
    return int(math.ceil(constant * n * epsilon ** -2 * math.log(n / delta)))


def spectral_sparsify(g, w, epsilon, delta, rng, constant=1.0):
    """Sample edges with probability proportional to ``w_e R_eff(e)``.

    Returns ``(edge_ids, new_weights)``; repeated draws of an edge accumulate
    weight ``w_e / (q prob_e)``.
    """
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise InvalidInputError("weights must be non-negative")
    if not 0 < epsilon <= 0.5 + 1e-12:
        raise InvalidInputError("epsilon must lie in (0, 1/2]")
    live = np.flatnonzero(w > 0)
    if live.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    lev = w * effective_resistances(g, w)
    lev = np.where(w > 0, lev, 0.0)
    probs = lev / lev.sum()
    q = spectral_sample_count(max(g.vertex_count, 2), epsilon, delta, constant)
    counts = rng.multinomial(q, probs)
    kept = np.flatnonzero(counts)
    weights = counts[kept] * w[kept] / (q * probs[kept])
    return kept, weights


@dataclass
class SparsifyResult:
    """Sparse voltage instance on a subset of the original edges."""

    graph: Graph
    edge_ids: np.ndarray
    u: np.ndarray
    t: np.ndarray
    spanner_edges: np.ndarray
    spectral_edges: np.ndarray
    k: int
    stats: dict = field(default_factory=dict)

    @property
    def stretch(self):
        return 2 * self.k - 1


def spanner_k(n):
    return max(2, int(math.ceil(math.log2(max(n, 2)))))


def spanner_sparsify(inst, delta, rng, spectral_constant=1.0, k=None):
    """Sparsify a voltage instance: spanner on ``s > 0`` edges, spectral sampling on ``w > 0`` edges."""
    g = inst.graph
    n = g.vertex_count
    k = spanner_k(n) if k is None else k
    p_edges = np.flatnonzero(inst.s > 0)
    if p_edges.size:
        sub = g.subgraph(p_edges)
        span_local = baswana_sen_spanner(sub, 1.0 / inst.s[p_edges], k, rng)
        spanner_edges = p_edges[span_local]
    else:
        spanner_edges = np.zeros(0, dtype=np.int64)
    q_edges = np.flatnonzero(inst.w > 0)
    if q_edges.size:
        sub = g.subgraph(q_edges)
        kept_local, weights = spectral_sparsify(sub, inst.w[q_edges], 0.5, delta / 2, rng,
                                                spectral_constant)
        spectral_edges = q_edges[kept_local]
    else:
        spectral_edges, weights = np.zeros(0, dtype=np.int64), np.zeros(0)
    edge_ids = np.union1d(spanner_edges, spectral_edges).astype(np.int64)
    pos = {e: i for i, e in enumerate(edge_ids.tolist())}
    u = np.zeros(edge_ids.size)
    t = np.zeros(edge_ids.size)
    for e, wt in zip(spectral_edges.tolist(), weights.tolist()):
        u[pos[e]] = wt
    for e in spanner_edges.tolist():
        t[pos[e]] = inst.s[e]
    stats = {"edges_in": g.edge_count, "edges_out": int(edge_ids.size),
             "spanner_edges": int(spanner_edges.size), "spectral_edges": int(spectral_edges.size),
             "stretch_bound": 2 * k - 1}
    return SparsifyResult(g.subgraph(edge_ids), edge_ids, u, t, spanner_edges, spectral_edges, k,
                          stats)


def voltage_scaling(m, p, n=None):
    """``(mu2, kappa2)`` used when a sparsified voltage residual stands in for the original."""
    if m < 1 or not p > 1:
        raise InvalidInputError("need m >= 1 and p > 1")
    mu2 = m ** (-1.0 / (p - 1))
    stretch = 2 * spanner_k(n) - 1 if n is not None else 1
    return mu2, m ** (1.0 / (p - 1)) * stretch


def sparsified_factors(result):
    """``(diag(sqrt(u)) B_H, diag(t) B_H)`` as sparse matrices over the vertices."""
    B = incidence_matrix(result.graph)
    return ((sp.diags(np.sqrt(result.u)) @ B).tocsr(), (sp.diags(result.t) @ B).tocsr())
