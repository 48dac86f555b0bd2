"""Instance generation and JSON (de)serialization."""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError
from .graph import Graph
from .instances import FlowInstance, PNormProblem, VoltageInstance, as_pnorm_problem

KINDS = ("flow", "voltage", "matrix")


def random_connected_graph(n, m, rng):
    """Random spanning tree (each vertex attaches to an earlier one) plus random extra edges."""
    if n < 1:
        raise InvalidInputError("need at least one vertex")
    if m < n - 1:
        raise InvalidInputError("m must be at least n - 1 for a connected graph")
    if n == 1 and m > 0:
        raise InvalidInputError("a single vertex cannot carry edges")
    perm = rng.permutation(n)
    edges = []
    for i in range(1, n):
        j = int(rng.integers(i))
        edges.append((int(perm[j]), int(perm[i])))
    while len(edges) < m:
        u, v = (int(x) for x in rng.integers(n, size=2))
        if u != v:
            edges.append((u, v))
    # random orientation
    flip = rng.random(m) < 0.5
    edges = [(v, u) if f else (u, v) for (u, v), f in zip(edges, flip.tolist())]
    return Graph(n, edges)


def log_uniform(rng, size, lo, hi):
    if not 0 < lo <= hi:
        raise InvalidInputError("weight range must satisfy 0 < lo <= hi")
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


def mean_zero_demands(n, rng):
    if n == 1:
        return np.zeros(1)
    d = rng.normal(size=n)
    d -= d.mean()
    d *= 2.0 / np.abs(d).sum()
    return d if d[0] >= 0 else -d


def generate_instance(kind, n, m, p, seed, weight_range=(0.1, 10.0), constraints=None):
    """Reproducible random instance as a JSON-ready dict.

    ``m`` is the edge count for graph kinds and the p-norm row count for
    matrices (which also get ``m // 2`` quadratic rows and ``constraints``
    equality rows, by default ``max(1, n // 5)``).
    """
    if kind not in KINDS:
        raise InvalidInputError(f"kind must be one of {KINDS}")
    if not p >= 2:
        raise InvalidInputError("p must be at least 2")
    rng = np.random.default_rng(seed)
    lo, hi = weight_range
    base = {"kind": kind, "p": float(p), "seed": int(seed), "weight_range": [lo, hi]}
    if kind == "matrix":
        if n < 1 or m < 1:
            raise InvalidInputError("matrix instances need n >= 1 and m >= 1")
        d = max(1, n // 5) if constraints is None else int(constraints)
        if d >= n:
            raise InvalidInputError("need fewer constraints than variables")
        A = rng.normal(size=(d, n))
        M = rng.normal(size=(m // 2, n))
        N = rng.normal(size=(m, n))
        base.update(A=matrix_to_json(A), M=matrix_to_json(M), N=matrix_to_json(N),
                    b=rng.normal(size=n).tolist(), c=rng.normal(size=d).tolist())
        return base
    g = random_connected_graph(n, m, rng)
    base["graph"] = graph_to_json(g)
    if kind == "flow":
        base.update(g=rng.normal(size=m).tolist(), r=log_uniform(rng, m, lo, hi).tolist(),
                    s=log_uniform(rng, m, lo, hi).tolist(),
                    demands=mean_zero_demands(n, rng).tolist())
    else:
        base.update(w=log_uniform(rng, m, lo, hi).tolist(), s=log_uniform(rng, m, lo, hi).tolist(),
                    d=mean_zero_demands(n, rng).tolist())
    return base


def graph_to_json(g):
    return {"n": g.vertex_count, "edges": g.edges.tolist()}


def graph_from_json(data):
    return Graph(int(data["n"]), data["edges"])


def matrix_to_json(mat):
    """Coordinate triplets ``{"rows": R, "cols": C, "entries": [[i, j, v], ...]}``."""
    coo = sp.coo_matrix(mat)
    coo.sum_duplicates()
    entries = [[int(i), int(j), float(v)] for i, j, v in zip(coo.row, coo.col, coo.data)]
    return {"rows": int(coo.shape[0]), "cols": int(coo.shape[1]), "entries": entries}


def matrix_from_json(data):
    try:
        shape = (int(data["rows"]), int(data["cols"]))
        entries = np.asarray(data["entries"], dtype=float).reshape(-1, 3)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed matrix: {exc}") from exc
    rows, cols = entries[:, 0].astype(np.int64), entries[:, 1].astype(np.int64)
    if np.any(rows != entries[:, 0]) or np.any(cols != entries[:, 1]):
        raise InvalidInputError("matrix indices must be integers")
    if rows.size and (rows.min() < 0 or rows.max() >= shape[0] or cols.min() < 0
                      or cols.max() >= shape[1]):
        raise InvalidInputError("matrix index out of range")
    if not np.all(np.isfinite(entries[:, 2])):
        raise InvalidInputError("matrix entries must be finite")
    return sp.csr_matrix((entries[:, 2], (rows, cols)), shape=shape)


@dataclass
class LoadedInstance:
    kind: str
    problem: PNormProblem
    instance: object = None
    demands: np.ndarray = None
    raw: dict = field(default_factory=dict)


def problem_from_json(data, p=None):
    """``LoadedInstance`` from a parsed JSON dict; ``p`` overrides the stored exponent."""
    try:
        kind = data["kind"]
        p = float(data["p"] if p is None else p)
        if kind == "flow":
            inst = FlowInstance(graph_from_json(data["graph"]), data["g"], data["r"], data["s"], p)
            demands = np.asarray(data.get("demands", np.zeros(inst.graph.vertex_count)), dtype=float)
            return LoadedInstance(kind, as_pnorm_problem(inst, demands), inst, demands, data)
        if kind == "voltage":
            inst = VoltageInstance(graph_from_json(data["graph"]), data["w"], data["s"], data["d"], p)
            return LoadedInstance(kind, as_pnorm_problem(inst), inst, None, data)
        if kind == "matrix":
            N = matrix_from_json(data["N"])
            M = matrix_from_json(data["M"]) if data.get("M") else None
            A = matrix_from_json(data["A"]) if data.get("A") else None
            return LoadedInstance(kind, PNormProblem(A, M, N, data["b"], data.get("c", []), p),
                                  None, None, data)
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"malformed instance: {exc}") from exc
    raise InvalidInputError(f"unknown instance kind {kind!r}")


def dumps(data):
    """Deterministic JSON text (sorted keys, shortest round-trip floats)."""
    return json.dumps(data, sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_json(data, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(data))


def load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc


def load_problem(path, p=None):
    return problem_from_json(load_json(path), p)
