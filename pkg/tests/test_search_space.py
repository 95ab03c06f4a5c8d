import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evnas.autograd import softmax
from evnas.search_space import (
    DEFAULT_OPS,
    DEFAULT_TOPOLOGY,
    PRIMITIVES,
    ArchParam,
    CellTopology,
    Genotype,
    GenotypeError,
    OperationSpace,
    decode,
    derive_genotype,
    genotype_from_json,
    genotype_to_dot,
    genotype_to_json,
    init_arch_param,
)

EDGES, OPS = DEFAULT_TOPOLOGY.num_edges, len(DEFAULT_OPS)

alpha_matrices = arrays(np.float64, (EDGES, OPS), elements=st.floats(-5, 5, allow_nan=False))


def brute_force_genotype(alpha, topology=DEFAULT_TOPOLOGY, ops=DEFAULT_OPS):
    """Rank every (edge, op) pair of a node by softmax weight and walk down
    the list, keeping the first two distinct edges."""
    cells = []
    for mat in alpha.cells():
        w = softmax(mat, axis=1)
        entries = []
        for t in range(topology.num_intermediate_nodes):
            pairs = [
                (w[e, o], e, o)
                for e in topology.incoming(t)
                for o in range(len(ops))
                if ops.ops[o] != "zero"
            ]
            pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
            chosen = {}
            for _, e, o in pairs:
                if e not in chosen:
                    chosen[e] = o
                if len(chosen) == 2:
                    break
            entries += [(topology.edges[e][0], ops.ops[o]) for e, o in chosen.items()]
        cells.append(tuple(entries))
    return Genotype(*cells, topology=topology)


def test_default_topology_has_14_edges_in_target_source_order():
    topo = CellTopology()
    assert topo.num_edges == 14
    assert [len(topo.incoming(t)) for t in range(4)] == [2, 3, 4, 5]
    assert list(topo.edges) == sorted(topo.edges, key=lambda e: (e[1], e[0]))
    assert list(topo.edges[:5]) == [(0, 0), (1, 0), (0, 1), (1, 1), (2, 1)]


def test_operation_space_contract():
    assert DEFAULT_OPS.ops == PRIMITIVES
    assert len(PRIMITIVES) == 8 and PRIMITIVES.count("zero") == 1
    with pytest.raises(ValueError):
        OperationSpace(("sep_conv_3x3", "skip_connect"))
    with pytest.raises(ValueError):
        OperationSpace(("zero",))
    with pytest.raises(ValueError):
        OperationSpace(("zero", "zero", "skip_connect"))


def test_init_range_shape_and_determinism():
    a = init_arch_param(np.random.default_rng(7))
    b = init_arch_param(np.random.default_rng(7))
    assert a.shape == (14, 8)
    for m in a.cells():
        assert (m >= 0).all() and (m < 1).all()
    assert a == b
    assert a.normal.tobytes() == b.normal.tobytes()


def test_init_mean_is_one_half():
    rng = np.random.default_rng(0)
    entries = np.concatenate([init_arch_param(rng).to_array().ravel() for _ in range(450)])
    assert entries.size >= 10**5
    assert abs(entries.mean() - 0.5) < 0.01


def test_arch_param_rejects_non_finite_and_is_read_only():
    m = np.zeros((14, 8))
    bad = m.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        ArchParam(bad, m)
    a = ArchParam(m, m)
    with pytest.raises(ValueError):
        a.normal[0, 0] = 1.0


def test_dominant_ops_are_selected_on_top_edges():
    rng = np.random.default_rng(3)
    mats = []
    for _ in range(2):
        m = np.zeros((14, 8))
        ops = rng.integers(0, 7, size=14)
        # the edge with the larger dominant value wins within its node
        vals = 5.0 + rng.permutation(14)
        m[np.arange(14), ops] = vals
        mats.append((m, ops, vals))
    g = derive_genotype(ArchParam(mats[0][0], mats[1][0]))
    for cell, (m, ops, vals) in zip(("normal", "reduce"), mats):
        for t in range(4):
            inc = DEFAULT_TOPOLOGY.incoming(t)
            top = sorted(inc, key=lambda e: -vals[e])[:2]
            expected = sorted((DEFAULT_TOPOLOGY.edges[e][0], PRIMITIVES[ops[e]]) for e in top)
            assert list(g.node_entries(cell, t)) == expected


def test_equal_rows_tie_break_to_lowest_edge_and_column():
    g = derive_genotype(ArchParam(np.zeros((14, 8)), np.ones((14, 8))))
    for cell in ("normal", "reduce"):
        for t in range(4):
            assert g.node_entries(cell, t) == ((0, "sep_conv_3x3"), (1, "sep_conv_3x3"))


def test_zero_op_is_never_selected_even_when_dominant():
    m = np.zeros((14, 8))
    m[:, DEFAULT_OPS.zero_index] = 100.0
    g = derive_genotype(ArchParam(m, m))
    assert all(op != "zero" for _, op in g.normal + g.reduce)


@settings(max_examples=200, deadline=None)
@given(alpha_matrices, alpha_matrices)
def test_derive_matches_brute_force(normal, reduce):
    alpha = ArchParam(normal, reduce)
    assert derive_genotype(alpha) == brute_force_genotype(alpha)


@settings(max_examples=100, deadline=None)
@given(alpha_matrices, alpha_matrices, st.integers(0, 13), st.floats(-50, 50))
def test_derive_invariant_to_row_shift(normal, reduce, row, shift):
    base = derive_genotype(ArchParam(normal, reduce))
    shifted = normal.copy()
    shifted[row] += shift
    # adding a constant changes softmax inputs only by rounding
    w0, w1 = softmax(normal[row]), softmax(shifted[row])
    if np.abs(w0 - w1).max() > 1e-12:
        return
    assert derive_genotype(ArchParam(shifted, reduce)) == base


@settings(max_examples=100, deadline=None)
@given(alpha_matrices)
def test_row_softmax_sums_to_one(mat):
    assert np.allclose(softmax(mat, axis=1).sum(axis=1), 1.0, atol=1e-6)


def test_decode_structure_and_support():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        alpha = init_arch_param(rng)
        d = decode(alpha)
        g = derive_genotype(alpha)
        for cell, m in zip(("normal", "reduce"), d.cells()):
            assert set(np.unique(m)) <= {0.0, 1.0}
            assert int((m == 1.0).sum()) == 8
            assert sorted(zip(*np.nonzero(m))) == sorted(g.selected_cells(cell, DEFAULT_OPS))
            edges = np.nonzero(m.any(axis=1))[0]
            targets = [DEFAULT_TOPOLOGY.edges[e][1] for e in edges]
            assert all(targets.count(t) == 2 for t in range(4))


def test_decode_scales_with_k_and_is_idempotent():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        alpha = init_arch_param(rng)
        d1, d2 = decode(alpha, 1.5), decode(alpha, 3.0)
        assert np.array_equal(d1.normal != 0, d2.normal != 0)
        assert np.array_equal(d1.reduce != 0, d2.reduce != 0)
        assert derive_genotype(d1) == derive_genotype(alpha)
    with pytest.raises(ValueError):
        decode(alpha, 0.0)


def test_decoded_row_softmax_weights():
    e = math.e
    d = decode(init_arch_param(np.random.default_rng(0)), 1.0)
    for m in d.cells():
        w = softmax(m, axis=1)
        for row, wrow in zip(m, w):
            if row.any():
                sel = row.argmax()
                assert abs(wrow[sel] - e / (e + 7)) < 1e-6
                assert np.all(np.abs(np.delete(wrow, sel) - 1 / (e + 7)) < 1e-6)
    assert abs(e / (e + 7) - 0.27971) < 1e-5 and abs(1 / (e + 7) - 0.10290) < 1e-5


def test_genotype_json_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        g = derive_genotype(init_arch_param(rng))
        assert genotype_from_json(genotype_to_json(g)) == g


def test_genotype_json_schema():
    g = derive_genotype(init_arch_param(np.random.default_rng(2)))
    obj = json.loads(genotype_to_json(g))
    assert set(obj) == {"normal", "reduce", "topology"}
    assert obj["topology"] == {"inputs": 2, "intermediates": 4}
    assert len(obj["normal"]) == 8 and all(isinstance(p, int) and isinstance(o, str) for p, o in obj["normal"])


@pytest.mark.parametrize("field", ["normal", "reduce", "topology"])
def test_missing_field_is_named(field):
    obj = json.loads(genotype_to_json(derive_genotype(init_arch_param(np.random.default_rng(0)))))
    del obj[field]
    with pytest.raises(GenotypeError, match=field):
        genotype_from_json(json.dumps(obj))


def test_malformed_json_reports_position():
    with pytest.raises(GenotypeError, match=r"line 2 column"):
        genotype_from_json('{"normal": [],\n  oops}')


def test_invalid_genotypes_rejected():
    ok = [[0, "sep_conv_3x3"], [1, "sep_conv_3x3"]] * 4
    base = {"normal": ok, "reduce": ok, "topology": {"inputs": 2, "intermediates": 4}}
    genotype_from_json(json.dumps(base))
    for bad in (
        [[0, "zero"], [1, "sep_conv_3x3"]] + ok[2:],
        [[0, "conv_7x7"], [1, "sep_conv_3x3"]] + ok[2:],
        [[0, "sep_conv_3x3"], [0, "sep_conv_5x5"]] + ok[2:],
        [[0, "sep_conv_3x3"], [2, "sep_conv_5x5"]] + ok[2:],
        ok[:6],
    ):
        with pytest.raises(GenotypeError):
            genotype_from_json(json.dumps({**base, "normal": bad}))


def test_hand_written_sep_dil_cell_parses():
    # a normal cell drawn only with separable and dilated convolutions
    text = """{
      "normal": [[0, "sep_conv_3x3"], [1, "sep_conv_3x3"],
                 [0, "sep_conv_5x5"], [2, "dil_conv_3x3"],
                 [1, "sep_conv_3x3"], [3, "dil_conv_5x5"],
                 [0, "dil_conv_3x3"], [4, "sep_conv_5x5"]],
      "reduce": [[0, "max_pool_3x3"], [1, "max_pool_3x3"],
                 [1, "skip_connect"], [2, "max_pool_3x3"],
                 [0, "avg_pool_3x3"], [2, "skip_connect"],
                 [2, "skip_connect"], [3, "sep_conv_3x3"]],
      "topology": {"inputs": 2, "intermediates": 4}
    }"""
    g = genotype_from_json(text)
    assert g.topology.num_intermediate_nodes == 4
    assert all(op.startswith(("sep_conv", "dil_conv")) for _, op in g.normal)


def test_dot_export_has_one_cluster_per_cell():
    dot = genotype_to_dot(derive_genotype(init_arch_param(np.random.default_rng(0))))
    assert dot.startswith("digraph")
    assert "subgraph cluster_normal" in dot and "subgraph cluster_reduce" in dot
    assert dot.count("->") >= 2 * 8


def test_small_topology():
    topo = CellTopology(1, 3)
    assert topo.num_edges == 1 + 2 + 3
    alpha = init_arch_param(np.random.default_rng(0), topo)
    with pytest.raises(GenotypeError, match="fewer than 2"):
        derive_genotype(alpha, topo)
