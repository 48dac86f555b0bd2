import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from conftest import flow_instance_with_untouched, path_graph, simple_cycles, triangle
from pnormsolve.errors import CycleTouchingError, InvalidInputError, UnboundedInstanceError
from pnormsolve.flowprep import (ApproxMap, bucket_edges, check_approx_relation,
                                 contract_constant_cycles, cycle_gain, detect_unbounded,
                                 flow_sparsify_pipeline, identity_map, identity_plugin,
                                 instance_round, round_maps, union_instances, union_maps)
from pnormsolve.graph import Graph, incidence_matrix, project_cycle_space
from pnormsolve.instances import FlowInstance, flow_objective


def is_closed(g, cycle):
    net = np.zeros(g.vertex_count)
    for e, sign in cycle:
        net[g.tails[e]] += sign
        net[g.heads[e]] -= sign
    return np.all(net == 0)


def brute_force_unbounded(inst, tol=1e-9):
    untouched = np.flatnonzero((inst.r == 0) & (inst.s == 0))
    g = inst.graph
    cycles = simple_cycles(g.vertex_count, g.tails[untouched], g.heads[untouched])
    return any(abs(sum(sign * inst.g[untouched[e]] for e, sign in c)) > tol for c in cycles)


def flow_meeting(g, demands, rng, scale=1.0):
    B = incidence_matrix(g).toarray()
    base = np.linalg.lstsq(B.T, demands, rcond=None)[0]
    return base + scale * project_cycle_space(g, rng.normal(size=g.edge_count))


def test_detect_unbounded_triangle():
    zero = np.zeros(3)
    assert detect_unbounded(FlowInstance(triangle(), [1.0, 1.0, 1.0], zero, zero, 3)) is not None
    assert detect_unbounded(FlowInstance(triangle(), [1.0, -1.0, 0.0], zero, zero, 3)) is None
    touched = FlowInstance(triangle(), [1.0, 1.0, 1.0], [1.0, 0.0, 0.0], zero, 3)
    assert detect_unbounded(touched) is None


def test_detected_cycle_gains():
    inst = FlowInstance(triangle(), [1.0, 2.0, -0.5], np.zeros(3), np.zeros(3), 3)
    cycle = detect_unbounded(inst)
    assert is_closed(inst.graph, cycle)
    assert cycle_gain(inst, cycle) == pytest.approx(2.5)


def test_contract_untouched_triangle():
    inst = FlowInstance(triangle(), [1.0, -1.0, 0.0], np.zeros(3), np.zeros(3), 3)
    out, demands, fwd, bwd, offset = contract_constant_cycles(inst)
    assert out.graph.vertex_count == 1 and out.graph.edge_count == 0
    with pytest.raises(UnboundedInstanceError):
        contract_constant_cycles(FlowInstance(triangle(), np.ones(3), np.zeros(3), np.zeros(3), 3))


def test_contract_without_untouched_edges_is_identity():
    inst = FlowInstance(triangle(), [1.0, 2.0, 3.0], np.ones(3), np.ones(3), 3)
    con = contract_constant_cycles(inst)
    assert con.instance.graph.edge_count == 3 and con.instance.graph.vertex_count == 3
    assert np.allclose(con.forward.map.toarray(), np.eye(3))
    assert np.allclose(con.instance.g, inst.g) and con.offset == 0


def test_contract_subdivides_internal_touched_edges():
    # edges 0, 1 untouched, edge 2 touched but both ends in the same component
    g = Graph(3, [(0, 1), (1, 2), (2, 0)])
    inst = FlowInstance(g, [0.0, 0.0, 1.5], [0.0, 0.0, 1.0], [0.0, 0.0, 2.0], 3)
    con = contract_constant_cycles(inst)
    assert con.instance.graph.vertex_count == 2 and con.instance.graph.edge_count == 2
    assert con.forward.norm_1to1() == 2
    f = np.array([0.7, 0.7, 0.7])
    assert flow_objective(con.instance, con.forward.apply(f)) == pytest.approx(flow_objective(inst, f))


def test_lift_preserves_objective_with_demands():
    rng = np.random.default_rng(0)
    inst = flow_instance_with_untouched(9, 20, 1)
    d = rng.normal(size=9)
    d -= d.mean()
    con = contract_constant_cycles(inst, d)
    B = incidence_matrix(inst.graph)
    for _ in range(20):
        fc = flow_meeting(con.instance.graph, con.demands, rng)
        lifted = con.lift(fc)
        assert np.allclose(B.T @ lifted, d, atol=1e-9)
        assert flow_objective(inst, lifted) == pytest.approx(
            flow_objective(con.instance, fc) + con.offset, rel=1e-9, abs=1e-9)
        f = flow_meeting(inst.graph, d, rng)
        assert flow_objective(inst, f) == pytest.approx(
            flow_objective(con.instance, con.forward.apply(f)) + con.offset, rel=1e-9, abs=1e-9)


def test_rounding_examples():
    g = Graph(2, [(0, 1)] * 4)
    inst = FlowInstance(g, [1.0, 2.0, 3.0, 4.0], [3.0, 0.7, 4.0, 0.0], [0.0, 1.0, 5.0, 0.3], 3)
    out = instance_round(inst)
    assert out.r.tolist() == [2.0, 0.5, 4.0, 0.0]
    assert out.s.tolist() == [0.0, 1.0, 4.0, 0.25]
    assert np.array_equal(out.g, inst.g)


def test_round_maps_certify_both_directions():
    inst = flow_instance_with_untouched(8, 20, 2, untouched_fraction=0.0)
    rounded = instance_round(inst)
    fwd, bwd = round_maps(inst)
    assert (fwd.kappa, bwd.kappa) == (1.0, 2.0)
    rng = np.random.default_rng(3)
    assert check_approx_relation(rounded, inst, fwd, 300, rng).passed
    assert check_approx_relation(inst, rounded, bwd, 300, rng).passed


def test_bucket_examples():
    g = Graph(3, [(0, 1), (1, 2), (2, 0), (0, 2)])
    uniform = FlowInstance(g, np.zeros(4), np.ones(4), np.ones(4), 3)
    assert len(bucket_edges(uniform).buckets) == 1
    two = FlowInstance(g, np.zeros(4), [1.0, 2.0, 1.0, 2.0], np.ones(4), 3)
    buckets = bucket_edges(two).buckets
    assert [b[2].tolist() for b in buckets] == [[0, 2], [1, 3]]
    with pytest.raises(InvalidInputError):
        bucket_edges(FlowInstance(g, np.zeros(4), [3.0, 1, 1, 1], np.ones(4), 3))
    cyc = FlowInstance(g, np.zeros(4), [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 1.0], 3)
    with pytest.raises(CycleTouchingError):
        bucket_edges(cyc)


def test_bucket_count_bound():
    inst = instance_round(flow_instance_with_untouched(30, 120, 4, untouched_fraction=0.0))
    out = bucket_edges(inst)
    distinct_r, distinct_s = len(set(inst.r.tolist())), len(set(inst.s.tolist()))
    assert len(out.buckets) <= distinct_r * distinct_s
    ids = np.sort(np.concatenate([b[2] for b in out.buckets]))
    assert ids.tolist() == list(range(inst.graph.edge_count))
    for r, s, b in out.buckets:
        assert np.all(inst.r[b] == r) and np.all(inst.s[b] == s)


def test_union_examples():
    a = FlowInstance(triangle(), [1.0, 2.0, 3.0], np.ones(3), np.ones(3), 3)
    b = FlowInstance(Graph(3, [(0, 2)]), [4.0], [2.0], [0.0], 3)
    u = union_instances([a, b])
    assert u.graph.edge_count == 4 and u.g.tolist() == [1.0, 2.0, 3.0, 4.0]
    f = np.array([0.3, -0.2, 0.5, 1.0])
    assert flow_objective(u, f) == pytest.approx(flow_objective(a, f[:3]) + flow_objective(b, f[3:]))
    with pytest.raises(InvalidInputError):
        union_instances([a, FlowInstance(path_graph(2), [0.0], [1.0], [1.0], 3)])
    with pytest.raises(InvalidInputError):
        union_instances([a, a.replace(p=4.0)])
    merged = union_maps([identity_map(3, 2.0, 0.1), identity_map(1, 1.5, 0.3)])
    assert merged.shape == (4, 4) and (merged.kappa, merged.delta) == (2.0, 0.3)


def test_relation_checker_examples():
    rng = np.random.default_rng(5)
    G = flow_instance_with_untouched(8, 16, 6, untouched_fraction=0.0)
    m = G.graph.edge_count
    assert check_approx_relation(G, G, identity_map(m), 200, rng).passed
    # dividing r by 2 and s by 2^(p-1) gives an instance related to G with factor 2
    H = G.replace(r=G.r / 2, s=G.s / 2 ** (G.p - 1))
    assert check_approx_relation(G, H, identity_map(m, 2.0), 200, rng).passed
    wrong = check_approx_relation(G, H, identity_map(m), 200, rng)
    assert not wrong.passed and wrong.witness is not None
    f = wrong.witness
    assert flow_objective(H, f) > flow_objective(G, f)
    with pytest.raises(InvalidInputError):
        identity_map(m, 0.5)
    with pytest.raises(InvalidInputError):
        check_approx_relation(G, H, identity_map(m + 1), 10, rng)


def test_relation_checker_reports_residue_mismatch():
    G = FlowInstance(path_graph(3), [0.0, 0.0], [1.0, 1.0], [1.0, 1.0], 3)
    swap = ApproxMap(sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]])))
    report = check_approx_relation(G, G, swap, 20, np.random.default_rng(0))
    assert not report.passed and report.worst_residue_error > 1e-8


def r_doubling_plugin(inst, rng=None):
    m = inst.graph.edge_count
    return inst.replace(r=2 * inst.r, s=2 * inst.s), identity_map(m, 2.0), identity_map(m)


def test_pipeline_identity_plugin():
    inst = flow_instance_with_untouched(12, 40, 7)
    out = flow_sparsify_pipeline(inst)
    assert out.forward.kappa == 1 and out.backward.kappa == 2
    rng = np.random.default_rng(8)
    assert check_approx_relation(out.instance, inst, out.forward, 300, rng).passed
    assert check_approx_relation(inst, out.instance, out.backward, 300, rng).passed
    assert out.stages["edges_out"] == out.stages["edges_contracted"]


def test_pipeline_with_scaling_plugin():
    inst = flow_instance_with_untouched(10, 30, 9)
    out = flow_sparsify_pipeline(inst, plugin=r_doubling_plugin)
    assert out.forward.kappa == 2 and out.backward.kappa == 2
    rng = np.random.default_rng(10)
    assert check_approx_relation(out.instance, inst, out.forward, 300, rng).passed
    assert check_approx_relation(inst, out.instance, out.backward, 300, rng).passed


def test_pipeline_rejects_unbounded():
    inst = flow_instance_with_untouched(8, 20, 11, untouched_fraction=0.9, consistent=False)
    assert brute_force_unbounded(inst)
    with pytest.raises(UnboundedInstanceError):
        flow_sparsify_pipeline(inst)


def test_approx_map_json_round_trip():
    amap = ApproxMap(sp.csr_matrix(np.array([[1.0, 0.0, -2.0], [0.0, 0.5, 0.0]])), 3.0, 0.25, True)
    back = ApproxMap.from_dict(json.loads(json.dumps(amap.to_dict())))
    assert np.array_equal(back.map.toarray(), amap.map.toarray())
    assert (back.kappa, back.delta, back.cycle_only) == (3.0, 0.25, True)
    assert amap.norm_1to1() == 2.0


@given(st.integers(3, 9), st.integers(0, 10), st.integers(0, 10 ** 6), st.booleans())
def test_detect_matches_cycle_enumeration(n, extra, seed, consistent):
    inst = flow_instance_with_untouched(n, n - 1 + extra, seed, 0.6, consistent)
    cycle = detect_unbounded(inst)
    assert (cycle is not None) == brute_force_unbounded(inst)
    if cycle is not None:
        assert is_closed(inst.graph, cycle) and cycle_gain(inst, cycle) > 0
        assert all(inst.r[e] == 0 and inst.s[e] == 0 for e, _ in cycle)


@given(st.integers(3, 12), st.integers(0, 10 ** 6), st.sampled_from([2.0, 3.0, 5.0]))
def test_reflexivity(n, seed, p):
    G = flow_instance_with_untouched(n, 2 * n, seed, 0.0, p=p)
    m = G.graph.edge_count
    assert check_approx_relation(G, G, identity_map(m), 50, np.random.default_rng(seed)).passed


@given(st.integers(3, 10), st.integers(0, 10 ** 6), st.floats(1, 4), st.floats(1, 4),
       st.floats(0, 0.5), st.floats(0, 0.5))
def test_composition(n, seed, k1, k2, d1, d2):
    rng = np.random.default_rng(seed)
    G = flow_instance_with_untouched(n, 2 * n, seed, 0.0)
    m, p = G.graph.edge_count, G.p

    def weaker(inst, kappa, delta):
        # smaller penalties and a perturbed gradient: related to inst with (kappa, delta)
        return inst.replace(g=inst.g + rng.uniform(-delta, delta, m), r=inst.r / kappa,
                            s=inst.s / kappa ** (p - 1))

    K = weaker(G, k2, d2)
    H = weaker(K, k1, d1)
    first, second = identity_map(m, k1, d1), identity_map(m, k2, d2)
    assert check_approx_relation(K, H, first, 40, rng).passed
    assert check_approx_relation(G, K, second, 40, rng).passed
    both = first.then(second)
    assert both.kappa == pytest.approx(k1 * k2) and both.delta == pytest.approx(d1 + d2)
    assert check_approx_relation(G, H, both, 40, rng).passed


@given(st.integers(3, 8), st.integers(0, 10 ** 6), st.floats(1, 3), st.floats(1, 3))
def test_union_of_relations(n, seed, k1, k2):
    rng = np.random.default_rng(seed)
    G1 = flow_instance_with_untouched(n, 2 * n, seed, 0.0)
    G2 = flow_instance_with_untouched(n, n + 2, seed + 1, 0.0)
    p = G1.p
    H1 = G1.replace(r=G1.r / k1, s=G1.s / k1 ** (p - 1))
    H2 = G2.replace(r=G2.r / k2, s=G2.s / k2 ** (p - 1))
    maps = [identity_map(G1.graph.edge_count, k1), identity_map(G2.graph.edge_count, k2)]
    joined = union_maps(maps)
    assert joined.kappa == max(k1, k2)
    G, H = union_instances([G1, G2]), union_instances([H1, H2])
    assert check_approx_relation(G, H, joined, 60, rng).passed


@given(st.integers(3, 12), st.integers(0, 20), st.integers(0, 10 ** 6))
def test_contraction_maps(n, extra, seed):
    inst = flow_instance_with_untouched(n, n - 1 + extra, seed, 0.5)
    con = contract_constant_cycles(inst)
    assert con.forward.norm_1to1() <= 2
    assert con.instance.graph.edge_count <= 2 * inst.graph.edge_count
    untouched = (con.instance.r == 0) & (con.instance.s == 0)
    # only the subdivision edges stay untouched, and they carry no gradient
    assert np.all(con.instance.g[untouched] == 0)
    rng = np.random.default_rng(seed)
    assert check_approx_relation(con.instance, inst, con.forward, 30, rng).passed
    assert check_approx_relation(inst, con.instance, con.backward, 30, rng).passed
