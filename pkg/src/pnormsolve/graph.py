"""Graphs, incidence/Laplacian matrices, SPSD solves and cycle-space projection."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .errors import InfeasibleRhsError, InvalidInputError, SolverFailure

DEFAULT_TOL = 1e-10
DENSE_THRESHOLD = 512


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed multigraph with a fixed edge order.

    ``tails[e] -> heads[e]`` is edge ``e``. Orientation only matters for signs.
    """

    vertex_count: int
    tails: np.ndarray
    heads: np.ndarray

    def __init__(self, vertex_count, edges=()):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        n = int(vertex_count)
        if n < 1:
            raise InvalidInputError("graph needs at least one vertex")
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise InvalidInputError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise InvalidInputError("self-loops are not allowed")
        tails = edges[:, 0].copy()
        heads = edges[:, 1].copy()
        tails.setflags(write=False)
        heads.setflags(write=False)
        object.__setattr__(self, "vertex_count", n)
        object.__setattr__(self, "tails", tails)
        object.__setattr__(self, "heads", heads)

    @property
    def edge_count(self):
        return len(self.tails)

    @property
    def edges(self):
        return np.column_stack([self.tails, self.heads])

    def subgraph(self, edge_ids):
        """Graph on the same vertices keeping ``edge_ids`` in the given order."""
        edge_ids = np.asarray(edge_ids, dtype=np.int64)
        return Graph(self.vertex_count, self.edges[edge_ids])

    def __repr__(self):
        return f"Graph(n={self.vertex_count}, m={self.edge_count})"


def incidence_matrix(g):
    """Edge-by-vertex matrix with +1 at the tail and -1 at the head of each edge."""
    m = g.edge_count
    rows = np.repeat(np.arange(m), 2)
    cols = np.column_stack([g.tails, g.heads]).ravel()
    vals = np.tile([1.0, -1.0], m)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, g.vertex_count))


def weighted_laplacian(g, w):
    w = np.asarray(w, dtype=float)
    if w.shape != (g.edge_count,):
        raise InvalidInputError("weight vector length must equal edge count")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidInputError("weights must be finite and non-negative")
    B = incidence_matrix(g)
    return (B.T @ sp.diags(w) @ B).tocsr()


def components(g, mask=None):
    """Connected-component label per vertex, using only edges where ``mask`` is true."""
    tails, heads = g.tails, g.heads
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        tails, heads = tails[mask], heads[mask]
    n = g.vertex_count
    adj = sp.csr_matrix((np.ones(len(tails)), (tails, heads)), shape=(n, n))
    _, labels = csgraph.connected_components(adj, directed=False)
    return labels


def _as_operator(apply):
    if callable(apply):
        return apply, None
    if sp.issparse(apply):
        mat = apply.tocsr()
        return (lambda v: mat @ v), mat
    mat = np.asarray(apply, dtype=float)
    return (lambda v: mat @ v), mat


def _dense_pinv_solve(mat, rhs):
    mat = mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)
    mat = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(mat)
    top = max(abs(vals).max(initial=0.0), 1e-300)
    keep = vals > top * 1e-13 * max(1, len(vals))
    coef = (vecs[:, keep].T @ rhs) / vals[keep]
    return vecs[:, keep] @ coef


def solve_spsd(apply, rhs, tol=DEFAULT_TOL, max_iter=None, dense_threshold=DENSE_THRESHOLD,
               diagonal=None):
    """Solve ``apply(x) = rhs`` for a symmetric positive semidefinite operator.

    ``apply`` may be a dense array, a sparse matrix or a callable. Explicit
    matrices up to ``dense_threshold`` rows go through an eigendecomposition
    (minimum-norm solution); everything else uses Jacobi-preconditioned CG.
    """
    rhs = np.asarray(rhs, dtype=float)
    op, mat = _as_operator(apply)
    dim = rhs.shape[0]
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0:
        return np.zeros(dim)
    if max_iter is None:
        max_iter = 20 * dim

    if mat is not None and dim <= dense_threshold:
        x = _dense_pinv_solve(mat, rhs)
        res = np.linalg.norm(op(x) - rhs)
        if res > max(tol, 1e-8) * rhs_norm:
            raise InfeasibleRhsError("right-hand side is not in the operator range", res / rhs_norm)
        return x

    if diagonal is None and mat is not None:
        diagonal = mat.diagonal() if sp.issparse(mat) else np.diag(mat)
    if diagonal is None:
        precond = np.ones(dim)
    else:
        diagonal = np.asarray(diagonal, dtype=float)
        precond = np.where(diagonal > 0, 1.0 / np.where(diagonal > 0, diagonal, 1.0), 1.0)

    x = np.zeros(dim)
    r = rhs.copy()
    z = precond * r
    d = z.copy()
    rz = r @ z
    best = (np.inf, x.copy())
    for _ in range(max_iter):
        rn = np.linalg.norm(r)
        if rn < best[0]:
            best = (rn, x.copy())
        if rn <= tol * rhs_norm:
            return x
        q = op(d)
        dq = d @ q
        if dq <= 0:
            break
        step = rz / dq
        x = x + step * d
        r = r - step * q
        z = precond * r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    res = np.linalg.norm(op(x) - rhs)
    if res <= tol * rhs_norm:
        return x
    raise SolverFailure("conjugate gradient did not converge", min(res, best[0]) / rhs_norm)


def solve_laplacian(g, w, rhs, tol=DEFAULT_TOL, **kwargs):
    """Mean-zero solution of ``L x = rhs`` for ``L = B^T diag(w) B``.

    The right-hand side must sum to zero on each connected component of the
    positive-weight edges; the returned voltages are centered per component.
    """
    w = np.asarray(w, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    labels = components(g, w > 0)
    sums = np.bincount(labels, weights=rhs)
    counts = np.bincount(labels)
    if np.abs(sums).max() > 1e-9 * np.abs(rhs).sum():
        raise InfeasibleRhsError("right-hand side does not sum to zero on every component",
                                 float(np.abs(sums).max()))
    rhs = rhs - (sums / counts)[labels]
    L = weighted_laplacian(g, w)
    x = solve_spsd(L, rhs, tol=tol, **kwargs)
    means = np.bincount(labels, weights=x) / counts
    return x - means[labels]


def project_cycle_space(g, grad, tol=DEFAULT_TOL):
    """Orthogonal projection of an edge vector onto the circulations ``ker B^T``."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != (g.edge_count,):
        raise InvalidInputError("gradient length must equal edge count")
    if g.edge_count == 0:
        return grad.copy()
    B = incidence_matrix(g)
    rhs = B.T @ grad
    # residues sum to zero per component exactly; strip the roundoff so that
    # near-circulations are not mistaken for an inconsistent right-hand side
    labels = components(g)
    rhs -= (np.bincount(labels, weights=rhs) / np.bincount(labels))[labels]
    psi = solve_laplacian(g, np.ones(g.edge_count), rhs, tol=tol)
    return grad - B @ psi


def shortest_path_distances(g, lengths, source):
    """Single-source distances treating edges as undirected; ``inf`` if unreachable."""
    lengths = np.asarray(lengths, dtype=float)
    if lengths.shape != (g.edge_count,):
        raise InvalidInputError("length vector must match edge count")
    if np.any(~(lengths > 0)) or not np.all(np.isfinite(lengths)):
        raise InvalidInputError("edge lengths must be finite and strictly positive")
    return _distances(g, lengths, source)


def _distances(g, lengths, source=None):
    n = g.vertex_count
    best = {}
    for t, h, ln in zip(g.tails.tolist(), g.heads.tolist(), lengths.tolist()):
        key = (t, h) if t < h else (h, t)
        if ln < best.get(key, np.inf):
            best[key] = ln
    if best:
        keys = np.array(list(best.keys()))
        vals = np.array(list(best.values()))
        adj = sp.csr_matrix((vals, (keys[:, 0], keys[:, 1])), shape=(n, n))
    else:
        adj = sp.csr_matrix((n, n))
    return csgraph.dijkstra(adj, directed=False, indices=source)


def all_pairs_distances(g, lengths):
    lengths = np.asarray(lengths, dtype=float)
    if np.any(~(lengths > 0)):
        raise InvalidInputError("edge lengths must be strictly positive")
    return _distances(g, lengths)
