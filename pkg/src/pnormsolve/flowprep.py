"""Preprocessing for flow instances and numerical checks of instance approximation.

``H ⪯_{κ,δ} G`` (written here as an :class:`ApproxMap` from ``H`` to ``G``)
means a linear map sends every flow ``f`` on ``H`` to a flow ``M f`` on ``G``
with the same residues and
``(obj_H(f) - δ ||f||_1) / κ <= obj_G(M f / κ)``, where ``obj`` is the
maximization objective ``g^T f - sum r f^2 - sum s |f|^p``.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import CycleTouchingError, InvalidInputError, UnboundedInstanceError
from .graph import Graph, incidence_matrix, project_cycle_space
from .instances import FlowInstance, flow_objective


@dataclass
class ApproxMap:
    """Linear flow map from a source instance to a target instance."""

    map: sp.csr_matrix
    kappa: float = 1.0
    delta: float = 0.0
    cycle_only: bool = False

    def __post_init__(self):
        self.map = sp.csr_matrix(self.map)
        if not self.kappa >= 1:
            raise InvalidInputError("kappa must be at least 1")
        if not self.delta >= 0:
            raise InvalidInputError("delta must be non-negative")

    @property
    def shape(self):
        return self.map.shape

    def apply(self, f):
        return self.map @ np.asarray(f, dtype=float)

    def norm_1to1(self):
        if self.map.shape[1] == 0:
            return 0.0
        return float(abs(self.map).sum(axis=0).max())

    def then(self, second):
        """Map ``source -> second.target`` obtained by applying ``self`` first."""
        if second.map.shape[1] != self.map.shape[0]:
            raise InvalidInputError("maps do not chain: dimension mismatch")
        return ApproxMap((second.map @ self.map).tocsr(), self.kappa * second.kappa,
                         self.delta + second.delta * self.norm_1to1(),
                         self.cycle_only or second.cycle_only)

    def to_dict(self):
        coo = self.map.tocoo()
        entries = [[int(i), int(j), float(v)] for i, j, v in zip(coo.row, coo.col, coo.data)]
        return {"map": {"rows": int(coo.shape[0]), "cols": int(coo.shape[1]), "entries": entries},
                "kappa": float(self.kappa), "delta": float(self.delta),
                "cycle_only": bool(self.cycle_only)}

    @classmethod
    def from_dict(cls, data):
        layout = data["map"]
        entries = np.asarray(layout["entries"], dtype=float).reshape(-1, 3)
        mat = sp.csr_matrix((entries[:, 2], (entries[:, 0].astype(np.int64),
                                             entries[:, 1].astype(np.int64))),
                            shape=(int(layout["rows"]), int(layout["cols"])))
        return cls(mat, float(data["kappa"]), float(data["delta"]), bool(data["cycle_only"]))


def identity_map(m, kappa=1.0, delta=0.0, cycle_only=False):
    return ApproxMap(sp.identity(m, format="csr"), kappa, delta, cycle_only)


def _untouched(inst):
    return (inst.r == 0) & (inst.s == 0)


def _scale(inst):
    return max(np.abs(inst.g).max(initial=0.0), 1e-300)


def _forest_potentials(inst, tol):
    """DFS over untouched edges assigning ``phi`` with ``g_e = phi[tail] - phi[head]``.

    Returns ``(phi, labels, parent_edge, order, conflict)`` where ``conflict``
    is the first non-tree untouched edge whose gradient disagrees with the
    potentials, or ``None``.
    """
    g = inst.graph
    n = g.vertex_count
    mask = _untouched(inst)
    adj = [[] for _ in range(n)]
    for e in np.flatnonzero(mask).tolist():
        t, h = int(g.tails[e]), int(g.heads[e])
        adj[t].append((h, e))
        adj[h].append((t, e))
    phi = np.zeros(n)
    labels = np.full(n, -1, dtype=np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    order = []
    conflict = None
    comp = 0
    thresh = tol * _scale(inst)
    for root in range(n):
        if labels[root] >= 0:
            continue
        labels[root] = comp
        stack = [root]
        while stack:
            v = stack.pop()
            order.append(v)
            for x, e in adj[v]:
                if e == parent[v]:
                    continue
                # potential at x implied by edge e
                implied = phi[v] - inst.g[e] if g.tails[e] == v else phi[v] + inst.g[e]
                if labels[x] < 0:
                    labels[x] = comp
                    parent[x] = e
                    phi[x] = implied
                    stack.append(x)
                elif conflict is None and abs(implied - phi[x]) > thresh:
                    conflict = e
        comp += 1
    return phi, labels, parent, order, conflict


def _tree_path(g, parent, u, v):
    """Edges (with signs) of the tree path from ``u`` to ``v``; signs follow travel direction."""

    def to_root(x):
        path = [x]
        while parent[x] >= 0:
            e = parent[x]
            x = int(g.tails[e] if g.heads[e] == x else g.heads[e])
            path.append(x)
        return path

    pu, pv = to_root(u), to_root(v)
    on_v = {x: i for i, x in enumerate(pv)}
    i = next(i for i, x in enumerate(pu) if x in on_v)
    meet = pu[i]
    walk = pu[: i + 1] + pv[: on_v[meet]][::-1]
    out = []
    for a, b in zip(walk, walk[1:]):
        e = int(parent[a]) if parent[a] >= 0 and (g.tails[parent[a]] == b or g.heads[parent[a]] == b) \
            else int(parent[b])
        out.append((e, 1 if g.tails[e] == a else -1))
    return out


def detect_unbounded(inst, tol=1e-9):
    """An untouched cycle with non-zero signed gradient sum, as ``[(edge, sign), ...]``, or None.

    Pushing flow along the returned cycle in the given orientation increases
    the objective without bound.
    """
    _, _, parent, _, conflict = _forest_potentials(inst, tol)
    if conflict is None:
        return None
    g = inst.graph
    t, h = int(g.tails[conflict]), int(g.heads[conflict])
    cycle = [(int(conflict), 1)] + _tree_path(g, parent, h, t)
    total = sum(sign * inst.g[e] for e, sign in cycle)
    if total < 0:
        cycle = [(e, -sign) for e, sign in cycle]
    return cycle


def cycle_gain(inst, cycle):
    return float(sum(sign * inst.g[e] for e, sign in cycle))


@dataclass
class Contraction:
    """Result of contracting the untouched components of a flow instance.

    Unpacks as ``(instance, demands, forward, backward, offset)``. For a flow
    ``f`` meeting the original demands, ``obj(f) = obj'(forward f) + offset``;
    :meth:`lift` turns a flow meeting the contracted demands back into one
    meeting the original demands with ``obj(lift f') = obj'(f') + offset``.
    """

    instance: FlowInstance
    demands: np.ndarray
    forward: ApproxMap
    backward: ApproxMap
    offset: float
    labels: np.ndarray
    demand_flow: np.ndarray

    def __iter__(self):
        return iter((self.instance, self.demands, self.forward, self.backward, self.offset))

    def lift(self, flow):
        return self.backward.apply(flow) + self.demand_flow


def contract_constant_cycles(inst, demands=None, tol=1e-9):
    """Contract every connected component of untouched (``r = s = 0``) edges to a vertex.

    Touched edges inside one component would become self-loops; each is
    subdivided instead by a fresh vertex joined back to the component through an
    untouched zero-gradient edge.
    """
    g = inst.graph
    n, m = g.vertex_count, g.edge_count
    d = np.zeros(n) if demands is None else np.asarray(demands, dtype=float)
    if d.shape != (n,):
        raise InvalidInputError("demands must have one entry per vertex")
    phi, labels, parent, order, conflict = _forest_potentials(inst, tol)
    if conflict is not None:
        raise UnboundedInstanceError("instance has an unbounded untouched cycle")
    k = int(labels.max()) + 1
    touched = np.flatnonzero(~_untouched(inst))
    lt, lh = labels[g.tails[touched]], labels[g.heads[touched]]
    loops = lt == lh
    extra = int(loops.sum())
    edges, gs, rs, ss = [], [], [], []
    fwd_rows, fwd_cols = [], []
    aux_edges, aux_rows = [], []
    nxt = k
    g_adj = inst.g[touched] - phi[g.tails[touched]] + phi[g.heads[touched]]
    for j, e in enumerate(touched.tolist()):
        row = len(edges)
        if loops[j]:
            z = nxt
            nxt += 1
            edges.append((int(lt[j]), z))
            aux_edges.append((z, int(lt[j])))
            aux_rows.append(row)
        else:
            edges.append((int(lt[j]), int(lh[j])))
        gs.append(g_adj[j])
        rs.append(inst.r[e])
        ss.append(inst.s[e])
        fwd_rows.append(row)
        fwd_cols.append(e)
    base = len(edges)
    for i, (edge, row) in enumerate(zip(aux_edges, aux_rows)):
        edges.append(edge)
        gs.append(0.0)
        rs.append(0.0)
        ss.append(0.0)
        fwd_rows.append(base + i)
        fwd_cols.append(touched[row])
    n_new = k + extra
    m_new = len(edges)
    new_graph = Graph(n_new, edges if edges else np.zeros((0, 2), dtype=np.int64))
    new_inst = FlowInstance(new_graph, np.asarray(gs), np.asarray(rs), np.asarray(ss), inst.p)
    new_d = np.zeros(n_new)
    np.add.at(new_d, labels, d)
    forward = sp.csr_matrix((np.ones(len(fwd_rows)), (fwd_rows, fwd_cols)), shape=(m_new, m))

    # backward: copy touched flows, then route each vertex's imbalance along its component tree
    B_t = incidence_matrix(g)[touched].T.tocsr()  # vertex x touched-edge
    route = _tree_routing(g, parent, order, labels)  # edge x vertex, routes net outflow q
    copy = sp.csr_matrix((np.ones(len(touched)), (touched, np.arange(len(touched)))),
                         shape=(m, len(touched)))
    back_touched = copy - route @ B_t
    # contracted-edge coordinates: touched edges are the first len(touched) rows
    select = sp.csr_matrix((np.ones(len(touched)), (np.arange(len(touched)),
                                                    np.arange(len(touched)))),
                           shape=(len(touched), m_new))
    backward = (back_touched @ select).tocsr()
    demand_flow = route @ d
    offset = float(phi @ d)
    return Contraction(new_inst, new_d,
                       ApproxMap(forward, 1.0, 0.0, cycle_only=True),
                       ApproxMap(backward, 1.0, 0.0, cycle_only=True),
                       offset, labels, demand_flow)


def _tree_routing(g, parent, order, labels):
    """Matrix sending per-vertex net outflow ``q`` (summing to zero per component) to tree-edge flows."""
    m, n = g.edge_count, g.vertex_count
    rows, cols = [], []
    vals = []
    # subtree membership: walk each vertex up to its root
    for v in range(n):
        x = v
        while parent[x] >= 0:
            e = int(parent[x])
            # flow on e carries the net outflow of the subtree of x out of it
            rows.append(e)
            cols.append(v)
            vals.append(1.0 if g.tails[e] == x else -1.0)
            x = int(g.tails[e] if g.heads[e] == x else g.heads[e])
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, n))


def _pow2_floor(v):
    v = np.asarray(v, dtype=float)
    mant, expo = np.frexp(v)
    out = np.ldexp(np.ones_like(v), expo - 1)
    return np.where(v > 0, out, 0.0)


def _check_quasipolynomial(values, n, name):
    nz = np.abs(values[values != 0])
    if nz.size == 0:
        return
    bound = max(math.log2(max(n, 2)), 1.0) ** 2
    lo, hi = np.log2(nz.min()), np.log2(nz.max())
    if lo < -bound or hi > bound:
        warnings.warn(f"{name} entries fall outside [2^-{bound:.3g}, 2^{bound:.3g}]")


def instance_round(inst):
    """Round every non-zero ``r`` and ``s`` down to a power of two; ``g`` is unchanged."""
    n = inst.graph.vertex_count
    _check_quasipolynomial(inst.r, n, "r")
    _check_quasipolynomial(inst.s, n, "s")
    return inst.replace(r=_pow2_floor(inst.r), s=_pow2_floor(inst.s))


def round_maps(inst):
    """``(G -> G', G' -> G)`` maps certifying ``G ⪯_1 G'`` and ``G' ⪯_2 G`` for the rounding."""
    m = inst.graph.edge_count
    return identity_map(m, 1.0), identity_map(m, 2.0)


@dataclass
class BucketedInstance:
    """Edge partition of a rounded instance into groups with equal ``(r, s)``."""

    instance: FlowInstance
    buckets: list
    leftover: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def parts(self):
        """Sub-instances on the full vertex set, buckets first and the leftover last."""
        groups = [ids for _, _, ids in self.buckets]
        if self.leftover.size:
            groups.append(self.leftover)
        return [sub_instance(self.instance, ids) for ids in groups], groups


def sub_instance(inst, edge_ids):
    edge_ids = np.asarray(edge_ids, dtype=np.int64)
    return FlowInstance(inst.graph.subgraph(edge_ids), inst.g[edge_ids], inst.r[edge_ids],
                        inst.s[edge_ids], inst.p)


def _has_cycle(n, tails, heads):
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in zip(tails.tolist(), heads.tolist()):
        ra, rb = find(a), find(b)
        if ra == rb:
            return True
        parent[ra] = rb
    return False


def bucket_edges(inst):
    """Group the edges of a 2-rounded instance by their exact ``(r, s)`` pair."""
    rounded = (np.all(_pow2_floor(inst.r) == inst.r) and np.all(_pow2_floor(inst.s) == inst.s))
    if not rounded:
        raise InvalidInputError("instance must be 2-rounded before bucketing")
    untouched = _untouched(inst)
    leftover = np.flatnonzero(untouched)
    g = inst.graph
    if _has_cycle(g.vertex_count, g.tails[leftover], g.heads[leftover]):
        raise CycleTouchingError("edges with r = s = 0 contain a cycle")
    groups = {}
    for e in np.flatnonzero(~untouched).tolist():
        groups.setdefault((float(inst.r[e]), float(inst.s[e])), []).append(e)
    buckets = [(r, s, np.asarray(ids, dtype=np.int64)) for (r, s), ids in sorted(groups.items())]
    return BucketedInstance(inst, buckets, leftover.astype(np.int64))


def union_instances(parts):
    """Disjoint union of edge sets over a shared vertex set."""
    parts = list(parts)
    if not parts:
        raise InvalidInputError("need at least one instance")
    n = parts[0].graph.vertex_count
    p = parts[0].p
    for part in parts:
        if part.graph.vertex_count != n:
            raise InvalidInputError("instances must share the vertex set")
        if part.p != p:
            raise InvalidInputError("instances must share p")
    edges = np.vstack([part.graph.edges for part in parts])
    return FlowInstance(Graph(n, edges), np.concatenate([q.g for q in parts]),
                        np.concatenate([q.r for q in parts]),
                        np.concatenate([q.s for q in parts]), p)


def union_maps(maps):
    """Block-diagonal map for a union; ``κ`` and ``δ`` are the worst over the parts."""
    maps = list(maps)
    return ApproxMap(sp.block_diag([a.map for a in maps], format="csr"),
                     max(a.kappa for a in maps), max(a.delta for a in maps),
                     any(a.cycle_only for a in maps))


@dataclass
class RelationReport:
    passed: bool
    samples: int
    worst_violation: float
    worst_residue_error: float
    witness: np.ndarray = None
    checked: list = field(default_factory=list)


def check_approx_relation(G, H, amap, samples, rng, tol=1e-9, demands=None, scales=(-3, 3)):
    """Sample flows on ``H`` and test ``H ⪯_{κ,δ} G`` under ``amap``.

    With ``amap.cycle_only`` the samples are random circulations; otherwise
    random edge vectors (optionally shifted to meet ``demands``). Each sample is
    rescaled by ``10^U(scales)`` so both the quadratic and the p-th power
    regimes are exercised.
    """
    mH, mG = H.graph.edge_count, G.graph.edge_count
    if amap.map.shape != (mG, mH):
        raise InvalidInputError(f"map has shape {amap.map.shape}, expected {(mG, mH)}")
    if not amap.cycle_only and H.graph.vertex_count != G.graph.vertex_count:
        raise InvalidInputError("flow maps between different vertex sets need cycle_only")
    BH = incidence_matrix(H.graph)
    BG = incidence_matrix(G.graph)
    particular = None
    if demands is not None and not amap.cycle_only:
        particular = np.linalg.lstsq(BH.T.toarray(), np.asarray(demands, dtype=float),
                                     rcond=None)[0]
    worst = -np.inf
    worst_res = 0.0
    witness = None
    kappa, delta = amap.kappa, amap.delta
    for _ in range(samples):
        f = rng.normal(size=mH)
        if amap.cycle_only:
            f = project_cycle_space(H.graph, f) if mH else f
        f *= 10.0 ** rng.uniform(*scales)
        if particular is not None:
            f = f + particular
        fG = amap.apply(f)
        res_G = BG.T @ fG
        # circulations may live on different vertex sets; otherwise residues must match
        res_H = np.zeros_like(res_G) if amap.cycle_only else BH.T @ f
        res_err = float(np.abs(res_G - res_H).max(initial=0.0)) / (1 + np.abs(f).max(initial=0.0))
        worst_res = max(worst_res, res_err)
        lhs = (flow_objective(H, f) - delta * np.abs(f).sum()) / kappa
        rhs = flow_objective(G, fG / kappa)
        viol = (lhs - rhs) / (1 + abs(lhs) + abs(rhs))
        if viol > worst:
            worst, witness = viol, f
    passed = worst <= tol and worst_res <= 1e-8
    return RelationReport(bool(passed), samples, float(worst), float(worst_res), witness)


def identity_plugin(inst, rng=None):
    """Default sparsifier hook: returns the bucket unchanged with identity maps both ways."""
    m = inst.graph.edge_count
    return inst, identity_map(m), identity_map(m)


@dataclass
class FlowSparsification:
    """Output of :func:`flow_sparsify_pipeline`.

    ``forward`` maps flows of the input to the output and ``backward`` the
    other way; both carry the composed ``κ`` and ``δ``.
    """

    instance: FlowInstance
    demands: np.ndarray
    forward: ApproxMap
    backward: ApproxMap
    offset: float
    contraction: Contraction
    stages: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.instance, (self.forward, self.backward)))


def _permutation(order, m):
    order = np.asarray(order, dtype=np.int64)
    return sp.csr_matrix((np.ones(order.size), (np.arange(order.size), order)), shape=(order.size, m))


def flow_sparsify_pipeline(inst, demands=None, plugin=identity_plugin, rng=None):
    """Contract, round, bucket, sparsify each bucket with ``plugin``, and reunite.

    ``plugin(bucket_instance, rng)`` returns ``(sparse_instance, forward,
    backward)`` with maps between the bucket and its replacement.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    cycle = detect_unbounded(inst)
    if cycle is not None:
        raise UnboundedInstanceError(f"unbounded cycle through edges {[e for e, _ in cycle]}")
    contraction = contract_constant_cycles(inst, demands)
    contracted = contraction.instance
    rounded = instance_round(contracted)
    r_fwd, r_bwd = round_maps(contracted)
    bucketed = bucket_edges(rounded)
    parts, groups = bucketed.parts()
    m_r = rounded.graph.edge_count
    order = np.concatenate(groups) if groups else np.zeros(0, dtype=np.int64)
    perm = _permutation(order, m_r)
    outs, fwds, bwds = [], [], []
    for part in parts:
        out, fwd, bwd = plugin(part, rng)
        outs.append(out)
        fwds.append(fwd)
        bwds.append(bwd)
    if outs:
        result = union_instances(outs)
        fwd_union, bwd_union = union_maps(fwds), union_maps(bwds)
    else:
        result = FlowInstance(Graph(rounded.graph.vertex_count), [], [], [], rounded.p)
        fwd_union = bwd_union = ApproxMap(sp.csr_matrix((0, 0)))
    to_buckets = ApproxMap(perm)
    from_buckets = ApproxMap(perm.T.tocsr())
    forward = contraction.forward.then(r_fwd).then(to_buckets).then(fwd_union)
    backward = bwd_union.then(from_buckets).then(r_bwd).then(contraction.backward)
    stages = {"edges_in": inst.graph.edge_count, "edges_contracted": contracted.graph.edge_count,
              "buckets": len(bucketed.buckets), "leftover": int(bucketed.leftover.size),
              "edges_out": result.graph.edge_count}
    return FlowSparsification(result, contraction.demands, forward, backward, contraction.offset,
                              contraction, stages)
