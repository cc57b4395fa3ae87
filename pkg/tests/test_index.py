import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cacheidx.index import (
    KEYS_PLUS_CHILD_POINTERS,
    MAX_KEY,
    SINGLE_CHILD_POINTER,
    IndexBuildError,
    NodeLayout,
    build_buffered_tree,
    build_nary_tree,
    build_sorted_index,
    partition_index,
    read_snapshot,
    tree_levels,
    tree_shape,
    write_snapshot,
)
from cacheidx.model import reference_shape
from cacheidx.oracle import linear_scan_ranks
from cacheidx.rng import KeyStream
from cacheidx.workload import WorkloadSpec, gen_index_keys

key_sets = st.lists(st.integers(0, MAX_KEY), min_size=1, max_size=600)
layouts = st.sampled_from([
    NodeLayout(), NodeLayout(node_bytes=16), NodeLayout(node_bytes=64),
    NodeLayout(variant=KEYS_PLUS_CHILD_POINTERS), NodeLayout(node_bytes=64, variant=KEYS_PLUS_CHILD_POINTERS),
])


def test_sorted_index_dedups():
    idx = build_sorted_index([5, 1, 3, 3])
    assert idx.keys.tolist() == [1, 3, 5]
    assert idx.duplicates_removed == 1


def test_singleton_index():
    assert build_sorted_index([7]).keys.tolist() == [7]


@pytest.mark.parametrize("bad", [[], [-1], [2**32], [[1, 2]], [1.5]])
def test_sorted_index_rejects(bad):
    with pytest.raises(IndexBuildError):
        build_sorted_index(np.array(bad))


def test_table1_key_count():
    keys = gen_index_keys(WorkloadSpec(seed=5, index_key_count=327_680))
    idx = build_sorted_index(keys)
    assert len(idx) == 327_680 and idx.duplicates_removed == 0


def test_index_keys_are_immutable():
    idx = build_sorted_index([1, 2, 3])
    with pytest.raises(ValueError):
        idx.keys[0] = 9


# --- snapshot ---------------------------------------------------------------

def test_snapshot_round_trip(tmp_path):
    idx = build_sorted_index(KeyStream(1, 0).take(5000))
    path = tmp_path / "i.idx"
    write_snapshot(path, idx)
    data = path.read_bytes()
    assert data[:4] == b"CSIX" and struct.unpack_from("<HQ", data, 4) == (1, len(idx))
    assert read_snapshot(path) == idx


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + struct.pack("<H", 2) + d[6:],
    lambda d: d[:-1],
    lambda d: d[:10],
    lambda d: d[:14] + d[18:22] + d[14:18] + d[22:],
])
def test_snapshot_rejects_corruption(tmp_path, mutate):
    path = tmp_path / "i.idx"
    write_snapshot(path, build_sorted_index([1, 2, 3, 4]))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(IndexBuildError):
        read_snapshot(path)


# --- node layout and tree -----------------------------------------------------

def test_layout_geometry():
    csb = NodeLayout()
    assert (csb.keys_per_node, csb.fanout, csb.leaf_capacity) == (7, 8, 8)
    kpp = NodeLayout(variant=KEYS_PLUS_CHILD_POINTERS)
    assert (kpp.keys_per_node, kpp.fanout, kpp.leaf_capacity) == (3, 4, 4)


@pytest.mark.parametrize("kw", [dict(node_bytes=30), dict(variant="bogus"), dict(node_bytes=0)])
def test_layout_rejects(kw):
    with pytest.raises(IndexBuildError):
        NodeLayout(**kw)


def test_fanout_below_two_rejected():
    with pytest.raises(IndexBuildError):
        build_nary_tree(build_sorted_index([1, 2, 3]), NodeLayout(node_bytes=8, variant=KEYS_PLUS_CHILD_POINTERS))


def test_fifteen_key_tree():
    idx = build_sorted_index(range(1, 16))
    tree = build_nary_tree(idx, NodeLayout(node_bytes=16))
    assert tree.levels == 2
    assert tree.node_keys[0].tolist() == [[5, 9, 13]]
    assert tree.level_sizes == [1, 4]
    assert tree.node_keys[1][-1].tolist() == [13, 14, 15, MAX_KEY]


def test_table1_tree_depth():
    idx = build_sorted_index(gen_index_keys(WorkloadSpec(seed=5, index_key_count=327_680)))
    tree = build_nary_tree(idx)
    assert tree.levels == 7 == tree_levels(327_680, NodeLayout())


def level_filling_depth(m, layout):
    """Pack keys into leaves, then group nodes under parents, literally."""
    level = [list(range(i, min(i + layout.leaf_capacity, m))) for i in range(0, m, layout.leaf_capacity)]
    depth = 1
    while len(level) > 1:
        level = [level[i: i + layout.fanout] for i in range(0, len(level), layout.fanout)]
        depth += 1
    return depth


@pytest.mark.parametrize("m", [1, 7, 8, 9, 64, 65, 513, 1000, 4097])
@pytest.mark.parametrize("layout", [NodeLayout(), NodeLayout(variant=KEYS_PLUS_CHILD_POINTERS)])
def test_depth_matches_level_filling(m, layout):
    tree = build_nary_tree(build_sorted_index(np.arange(m) * 3), layout)
    assert tree.levels == level_filling_depth(m, layout) == tree_levels(m, layout)


@given(key_sets, layouts)
def test_tree_properties(raw, layout):
    idx = build_sorted_index(raw)
    tree = build_nary_tree(idx, layout)
    assert np.array_equal(tree.leaf_keys(), idx.keys)
    assert tree.level_sizes[0] == 1
    # root-to-leaf paths all have T nodes: the tree is level filled
    for upper, lower in zip(tree.level_sizes, tree.level_sizes[1:]):
        assert math.ceil(lower / tree.fanout) == upper
    ranks = tree.search(idx.keys)
    assert ranks.tolist() == list(range(1, len(idx) + 1))


@given(key_sets, layouts, st.lists(st.integers(0, MAX_KEY), min_size=1, max_size=200))
def test_tree_search_matches_linear_scan(raw, layout, queries):
    idx = build_sorted_index(raw)
    tree = build_nary_tree(idx, layout)
    q = np.array(queries + [0, MAX_KEY, idx.min_key, idx.max_key], dtype=np.uint32)
    expected = linear_scan_ranks(idx.keys, q)
    assert np.array_equal(tree.search(q), expected)
    assert [tree.search_one(int(k)) for k in q] == expected.tolist()


def test_round_trip_every_key_100k(index_100k):
    tree = build_nary_tree(index_100k)
    assert np.array_equal(tree.search(index_100k.keys), np.arange(1, len(index_100k) + 1))


# --- buffered decomposition ---------------------------------------------------

def test_budget_below_one_node_rejected():
    tree = build_nary_tree(build_sorted_index(range(100)))
    with pytest.raises(IndexBuildError):
        build_buffered_tree(tree, 16)


def test_tree_that_fits_is_one_subtree():
    tree = build_nary_tree(build_sorted_index(range(100)))
    b = build_buffered_tree(tree, 1 << 20)
    assert b.boundaries == (0,) and b.buffer_count == 0
    assert len(list(b.iter_subtrees())) == 1


@given(st.integers(1, 20_000), st.sampled_from([288, 1024, 4096, 8192, 65536]))
def test_decomposition_invariants(m, budget):
    tree = build_nary_tree(build_sorted_index(np.arange(m, dtype=np.uint32) * 7))
    b = build_buffered_tree(tree, budget)
    sizes = tree.level_sizes
    assert b.boundaries[0] == 0
    for layer in range(b.layer_count):
        for sid in range(b.subtree_count(layer)):
            assert b.subtree_size(layer, sid) <= budget
    # each layer is as deep as the budget allows
    for layer in range(1, b.layer_count):
        start, stop = b.layer_span(layer)
        deeper = sum(min(tree.fanout ** d, sizes[lv]) for d, lv in enumerate(range(start - 1, stop + 1)))
        assert deeper * tree.layout.node_bytes > budget
    # the last layer's subtrees cover every leaf exactly once
    covered = []
    last = b.layer_count - 1
    for sid in range(b.subtree_count(last)):
        covered.extend(b.subtree(last, sid).node_ranges[tree.levels - 1])
    assert covered == list(range(sizes[-1]))
    # leaves of one layer map bijectively onto the roots of the next
    for layer in range(b.layer_count - 1):
        kids = [c for sid in range(b.subtree_count(layer)) for c in b.child_subtrees(layer, sid)]
        assert kids == list(range(b.subtree_count(layer + 1)))
    assert b.buffer_count == sum(b.subtree_count(i) for i in range(1, b.layer_count))


def test_table1_tree_with_l2_budget():
    idx = build_sorted_index(gen_index_keys(WorkloadSpec(seed=5, index_key_count=327_680)))
    b = build_buffered_tree(build_nary_tree(idx), 512 * 1024)
    assert b.layer_count == 2
    root_levels = b.layer_span(0)[1] - b.layer_span(0)[0]
    assert root_levels in (1, 2)
    assert max(b.subtree_size(1, s) for s in range(b.subtree_count(1))) <= 512 * 1024


# --- partitions -----------------------------------------------------------------

def test_three_equal_partitions():
    table, parts = partition_index(build_sorted_index(range(1, 10)), 3)
    assert [p.index.keys.tolist() for p in parts] == [[1, 2, 3], [4, 5, 6], [7, 8, 9]]
    assert table.delimiters[1:-1].tolist() == [4, 7]
    assert table.rank_offsets.tolist() == [0, 3, 6]
    assert table.route_one(4) == 1 and table.route_one(7) == 2 and table.route_one(3) == 0


def test_single_partition_is_identity():
    idx = build_sorted_index([3, 9, 27])
    table, parts = partition_index(idx, 1)
    assert parts[0].index == idx and parts[0].rank_offset == 0
    assert table.route(np.array([0, MAX_KEY])).tolist() == [0, 0]


def test_too_many_partitions():
    with pytest.raises(IndexBuildError):
        partition_index(build_sorted_index([1, 2]), 3)


def test_fractional_delimiters_example():
    # keys spread evenly over the key space, split in thirds: the middle of the space is in the middle part
    keys = (np.arange(300) * (2**32 // 300)).astype(np.uint32)
    table, _ = partition_index(build_sorted_index(keys), 3)
    assert table.route_one(int(0.5 * 2**32)) == 1
    assert table.route_one(int(0.2 * 2**32)) == 0 and table.route_one(int(0.9 * 2**32)) == 2


@given(key_sets, st.integers(1, 16))
def test_partition_properties(raw, parts):
    idx = build_sorted_index(raw)
    parts = min(parts, len(idx))
    table, partitions = partition_index(idx, parts)
    sizes = [len(p.index) for p in partitions]
    assert max(sizes) - min(sizes) <= 1
    assert np.concatenate([p.index.keys for p in partitions]).tobytes() == idx.keys.tobytes()
    d = table.delimiters
    assert d[0] == 0 and d[-1] == 2**32 and np.all(np.diff(d.astype(np.int64)) > 0)
    assert table.rank_offsets[0] == 0
    for p in partitions:
        assert np.all(p.index.keys >= d[p.id]) and np.all(p.index.keys < d[p.id + 1])
        assert np.all(table.route(p.index.keys) == p.id)
        assert p.rank_offset == int(np.searchsorted(idx.keys, p.index.keys[0]))


# --- shape ---------------------------------------------------------------------

def test_perfect_tree_shape():
    tree = build_nary_tree(build_sorted_index(np.arange(8**4)))
    assert tree_shape(tree, 32).lam == (1.0, 8.0, 64.0, 512.0)


@given(st.integers(1, 50_000), st.sampled_from([16, 32, 64, 128]))
def test_shape_covers_tree(m, line):
    tree = build_nary_tree(build_sorted_index(np.arange(m)))
    shape = tree_shape(tree, line)
    assert shape.total_lines * line >= tree.tree_bytes
    assert shape.T == tree.levels


def test_table1_line_count():
    assert reference_shape().total_lines == 104_858
