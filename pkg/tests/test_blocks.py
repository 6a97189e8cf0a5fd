import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockpd.blocks import (
    BlockPartition,
    BlockVector,
    ConnectionGraph,
    StructureError,
    block_weight_sum,
    build_connection_graph,
    make_partition,
    partition_from_sizes,
)


def test_partition_from_sizes_layout():
    P = partition_from_sizes([2, 3, 1])
    assert P.n_blocks == 3
    assert P.total_dim == 6
    assert list(P.block_of) == [0, 0, 1, 1, 1, 2]
    assert list(P.sizes) == [2, 3, 1]


def test_partition_accepts_index_lists_and_ranges():
    P = make_partition(5, [[0, 2, 4], range(1, 2), (3, 4)])
    assert list(P.block_of) == [0, 1, 0, 2, 0]


@pytest.mark.parametrize(
    "blocks",
    [
        [[0, 1], [1, 2]],  # overlap
        [[0, 1]],  # gap
        [[0, 1, 2], []],  # empty block
        [[0, 1, 2, 3]],  # out of range
    ],
)
def test_partition_rejects_bad_layouts(blocks):
    with pytest.raises(StructureError):
        BlockPartition(3, blocks)


def test_expand_and_mask():
    P = partition_from_sizes([2, 1, 2])
    assert np.array_equal(P.expand([1.0, 2.0, 3.0]), [1, 1, 2, 3, 3])
    assert np.array_equal(P.mask([0, 2]), [True, True, False, True, True])
    assert not P.mask([]).any()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=8), st.integers(0, 2**31 - 1))
def test_block_norms_sum_to_total(sizes, seed):
    P = partition_from_sizes(sizes)
    v = np.random.default_rng(seed).standard_normal(P.total_dim)
    norms = P.block_sq_norms(v)
    assert norms.shape == (len(sizes),)
    assert np.isclose(norms.sum(), v @ v, rtol=1e-12, atol=1e-14)
    parts = P.split(v)
    assert np.array_equal(P.assemble(parts), v)


def test_block_vector_views():
    P = partition_from_sizes([2, 2])
    bv = BlockVector(np.arange(4.0), P)
    assert np.array_equal(bv[1], [2.0, 3.0])
    bv[0] = [5.0, 5.0]
    assert bv.norm_sq() == 25 + 25 + 4 + 9
    c = bv.copy()
    c[1] = [0.0, 0.0]
    assert bv[1][0] == 2.0


def test_connection_weights_are_reciprocal():
    g = ConnectionGraph(1, 3, [{0, 1, 2}])
    g.set_weight(0, 1, 0, 4.0)
    assert g.weight(0, 1, 0) == 4.0
    assert g.weight(0, 0, 1) == 0.25
    assert g.weight(0, 2, 1) == 1.0
    assert g.reciprocal_defect() == 0.0
    with pytest.raises(StructureError):
        g.set_weight(0, 1, 1, 2.0)
    with pytest.raises(StructureError):
        g.set_weight(0, 1, 2, -1.0)


def test_equal_weighting_counts_simultaneous_blocks():
    g = ConnectionGraph(2, 3, [{0, 1}, {1, 2}], {(0, 0): {0}, (0, 1): {0, 1}})
    assert block_weight_sum(g, 0, 0) == 1.0
    assert block_weight_sum(g, 0, 1) == 2.0
    assert block_weight_sum(g, 1, 2) == 2.0  # default: all neighbors
    assert block_weight_sum(g, 0, 2) == 0.0
    W = g.weight_matrix().toarray()
    assert np.array_equal(W, [[1, 0], [2, 2], [0, 2]])


def test_graph_rejects_inconsistent_sets():
    with pytest.raises(StructureError):
        ConnectionGraph(1, 2, [{0}], {(0, 0): {0, 1}})
    with pytest.raises(StructureError):
        ConnectionGraph(1, 2, [{0, 5}])


def test_probed_graph_matches_declared(quad):
    p = quad.problem
    declared = p.connections
    from dataclasses import replace

    probed = build_connection_graph(replace(p, connections=None), quad.x0)
    assert probed.neighbors == declared.neighbors
    for j in range(p.n_primal_blocks):
        for l in declared.neighbors[j]:
            assert probed.simultaneous(j, l) == declared.simultaneous(j, l)


def test_lambda_filter_drops_blocks(quad):
    p = quad.problem
    filt = np.ones((p.n_dual_blocks, p.n_primal_blocks), dtype=bool)
    filt[0, :] = False
    g = build_connection_graph(p, quad.x0, lambda_filter=filt)
    for j in range(p.n_primal_blocks):
        for l in g.neighbors[j]:
            assert 0 not in g.simultaneous(j, l)
