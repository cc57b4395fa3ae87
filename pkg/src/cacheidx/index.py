"""Immutable index structures: sorted array, n-ary search tree, buffered
subtree decomposition, and the partitioned index with its delimiter table.

The tree is a B+-style tree stored level by level. Keys live in the leaves;
an internal node holds the smallest key of each of its children except the
first, so the child to descend into is the number of separators ``<=`` the
query. All children of a node are adjacent in the next level, which is what
allows the single-child-pointer (CSB+) layout.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import TreeShape

KEY_DTYPE = np.uint32
RANK_DTYPE = np.uint64
MAX_KEY = 0xFFFFFFFF
KEY_SPACE_END = 1 << 32

SINGLE_CHILD_POINTER = "single-child-pointer"
KEYS_PLUS_CHILD_POINTERS = "keys-plus-child-pointers"
LAYOUT_VARIANTS = (SINGLE_CHILD_POINTER, KEYS_PLUS_CHILD_POINTERS)

SNAPSHOT_MAGIC = b"CSIX"
SNAPSHOT_VERSION = 1
_SNAPSHOT_HEADER = struct.Struct("<4sHQ")


class IndexBuildError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SortedIndex:
    keys: np.ndarray
    duplicates_removed: int = 0

    def __len__(self) -> int:
        return len(self.keys)

    def __eq__(self, other):
        if not isinstance(other, SortedIndex):
            return NotImplemented
        return np.array_equal(self.keys, other.keys)

    @property
    def min_key(self) -> int:
        return int(self.keys[0])

    @property
    def max_key(self) -> int:
        return int(self.keys[-1])


def build_sorted_index(raw_keys: Sequence[int] | np.ndarray) -> SortedIndex:
    raw = np.asarray(raw_keys)
    if raw.size == 0:
        raise IndexBuildError("cannot build an index from no keys")
    if raw.ndim != 1:
        raise IndexBuildError("keys must be a flat sequence")
    if raw.dtype.kind not in "ui":
        raise IndexBuildError(f"keys must be integers, got {raw.dtype}")
    if raw.min() < 0 or raw.max() > MAX_KEY:
        raise IndexBuildError("keys must be unsigned 32-bit values")
    keys = np.unique(raw.astype(KEY_DTYPE))
    return SortedIndex(_frozen(keys), duplicates_removed=int(raw.size - keys.size))


def _index_from_sorted(keys: np.ndarray) -> SortedIndex:
    return SortedIndex(_frozen(np.ascontiguousarray(keys, dtype=KEY_DTYPE)))


# --------------------------------------------------------------------------
# Snapshot file


def write_snapshot(path: str | Path, index: SortedIndex) -> None:
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, len(index)))
        fh.write(index.keys.astype("<u4").tobytes())


def read_snapshot(path: str | Path) -> SortedIndex:
    data = Path(path).read_bytes()
    if len(data) < _SNAPSHOT_HEADER.size:
        raise IndexBuildError(f"{path}: truncated snapshot header")
    magic, version, count = _SNAPSHOT_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise IndexBuildError(f"{path}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise IndexBuildError(f"{path}: unsupported version {version}")
    body = data[_SNAPSHOT_HEADER.size:]
    if len(body) != 4 * count:
        raise IndexBuildError(f"{path}: expected {count} keys, found {len(body) / 4:g}")
    keys = np.frombuffer(body, dtype="<u4").astype(KEY_DTYPE)
    if count == 0 or np.any(keys[1:] <= keys[:-1]):
        raise IndexBuildError(f"{path}: keys are not strictly ascending")
    return _index_from_sorted(keys)


# --------------------------------------------------------------------------
# Tree


@dataclass(frozen=True)
class NodeLayout:
    node_bytes: int = 32
    key_bytes: int = 4
    variant: str = SINGLE_CHILD_POINTER
    pointer_bytes: int = 4

    def __post_init__(self):
        if self.variant not in LAYOUT_VARIANTS:
            raise IndexBuildError(f"unknown node layout {self.variant!r}")
        if self.key_bytes <= 0 or self.node_bytes <= 0 or self.node_bytes % self.key_bytes:
            raise IndexBuildError("node_bytes must be a positive multiple of key_bytes")

    @property
    def keys_per_node(self) -> int:
        """Separator keys in an internal node."""
        if self.variant == SINGLE_CHILD_POINTER:
            return (self.node_bytes - self.pointer_bytes) // self.key_bytes
        return (self.node_bytes - self.pointer_bytes) // (self.key_bytes + self.pointer_bytes)

    @property
    def fanout(self) -> int:
        return self.keys_per_node + 1

    @property
    def leaf_capacity(self) -> int:
        # a CSB+ leaf has no child pointer; the other variant pairs each key with a record pointer
        if self.variant == SINGLE_CHILD_POINTER:
            return self.node_bytes // self.key_bytes
        return self.node_bytes // (self.key_bytes + self.pointer_bytes)


def tree_levels(key_count: int, layout: NodeLayout) -> int:
    """Depth of a level-filled tree: ``ceil(log(M / leaf) / log(fanout)) + 1``."""
    nodes = -(-key_count // layout.leaf_capacity)
    levels = 1
    span = 1
    while span < nodes:
        span *= layout.fanout
        levels += 1
    return levels


@dataclass(frozen=True, eq=False)
class NaryTree:
    """Search tree over a :class:`SortedIndex`.

    ``node_keys[l]`` is an ``(nodes, slots)`` array for level ``l`` (root
    first, leaves last), padded with :data:`MAX_KEY`. For the
    single-child-pointer layout ``first_child[l]`` holds one pointer per
    internal node; otherwise ``children[l]`` holds one pointer per slot.
    """

    layout: NodeLayout
    key_count: int
    node_keys: tuple[np.ndarray, ...]
    first_child: tuple[np.ndarray, ...] = ()
    children: tuple[np.ndarray, ...] = ()

    @property
    def levels(self) -> int:
        return len(self.node_keys)

    @property
    def level_sizes(self) -> list[int]:
        return [len(a) for a in self.node_keys]

    @property
    def node_count(self) -> int:
        return sum(self.level_sizes)

    @property
    def tree_bytes(self) -> int:
        return self.node_count * self.layout.node_bytes

    @property
    def fanout(self) -> int:
        return self.layout.fanout

    def leaf_keys(self) -> np.ndarray:
        """Keys in leaf order with padding removed."""
        return self.node_keys[-1].reshape(-1)[: self.key_count]

    def child_index(self, level: int, nodes: np.ndarray, slot: np.ndarray) -> np.ndarray:
        if self.layout.variant == SINGLE_CHILD_POINTER:
            child = self.first_child[level][nodes].astype(np.int64) + slot
            # only the last node of a level is short, and its children end the next level
            return np.minimum(child, len(self.node_keys[level + 1]) - 1)
        return self.children[level][nodes, np.minimum(slot, self.fanout - 1)].astype(np.int64)

    def descend(self, keys: np.ndarray, nodes: np.ndarray, start: int, stop: int) -> np.ndarray:
        """Follow ``keys`` from ``nodes`` at level ``start`` down to level ``stop``."""
        k = keys[:, None]
        for level in range(start, stop):
            slot = np.count_nonzero(self.node_keys[level][nodes] <= k, axis=1)
            nodes = self.child_index(level, nodes, slot)
        return nodes

    def leaf_ranks(self, keys: np.ndarray, leaves: np.ndarray) -> np.ndarray:
        rows = self.node_keys[-1][leaves]
        counts = np.count_nonzero(rows <= keys[:, None], axis=1)
        ranks = leaves.astype(np.int64) * self.layout.leaf_capacity + counts
        return np.minimum(ranks, self.key_count).astype(RANK_DTYPE)

    def search(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=KEY_DTYPE)
        root = np.zeros(len(keys), dtype=np.int64)
        return self.leaf_ranks(keys, self.descend(keys, root, 0, self.levels - 1))

    def search_one(self, key: int) -> int:
        """Scalar root-to-leaf descent, one node per level."""
        node = 0
        last = self.levels - 1
        for level in range(last):
            row = self.node_keys[level][node]
            slot = 0
            for sep in row.tolist():
                if sep > key:
                    break
                slot += 1
            node = int(self.child_index(level, np.array([node]), np.array([slot]))[0])
        count = 0
        for k in self.node_keys[last][node].tolist():
            if k > key:
                break
            count += 1
        return min(node * self.layout.leaf_capacity + count, self.key_count)

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for group in (self.node_keys, self.first_child, self.children):
            for a in group:
                h.update(a.tobytes())
        return h.hexdigest()


def build_nary_tree(index: SortedIndex, layout: NodeLayout = NodeLayout()) -> NaryTree:
    if layout.fanout < 2 or layout.leaf_capacity < 1:
        raise IndexBuildError(f"layout {layout} gives fanout {layout.fanout}; need >= 2")
    keys = index.keys
    m = len(keys)
    cap = layout.leaf_capacity
    n_leaves = -(-m // cap)
    leaves = np.full(n_leaves * cap, MAX_KEY, dtype=KEY_DTYPE)
    leaves[:m] = keys
    levels = [leaves.reshape(n_leaves, cap)]
    # smallest key below each node of the current level
    mins = levels[0][:, 0].copy()
    first_child: list[np.ndarray] = []
    children: list[np.ndarray] = []
    f = layout.fanout
    while len(levels[0]) > 1:
        n_child = len(levels[0])
        n_parent = -(-n_child // f)
        padded = np.full(n_parent * f, MAX_KEY, dtype=KEY_DTYPE)
        padded[:n_child] = mins
        grid = padded.reshape(n_parent, f)
        seps = np.ascontiguousarray(grid[:, 1:])
        base = np.arange(n_parent, dtype=np.int64) * f
        if layout.variant == SINGLE_CHILD_POINTER:
            first_child.insert(0, _frozen(base.astype(np.uint32)))
        else:
            ptr = np.minimum(base[:, None] + np.arange(f), n_child - 1)
            children.insert(0, _frozen(ptr.astype(np.uint32)))
        levels.insert(0, seps)
        mins = grid[:, 0].copy()
    return NaryTree(
        layout=layout,
        key_count=m,
        node_keys=tuple(_frozen(a) for a in levels),
        first_child=tuple(first_child),
        children=tuple(children),
    )


def tree_shape(tree: NaryTree, line_bytes: int, subtree_levels: int | None = None) -> TreeShape:
    """Cache lines per level, each level rounded up to whole lines."""
    lam = tuple(math.ceil(n * tree.layout.node_bytes / line_bytes) for n in tree.level_sizes)
    return TreeShape(
        T=tree.levels,
        L=tree.levels if subtree_levels is None else subtree_levels,
        lam=lam,
        key_bytes=tree.layout.key_bytes,
        tree_bytes=tree.tree_bytes,
    )


# --------------------------------------------------------------------------
# Buffered decomposition


@dataclass(frozen=True)
class Subtree:
    layer: int
    sid: int
    # level -> contiguous node range belonging to this subtree
    node_ranges: dict[int, range]


@dataclass(frozen=True, eq=False)
class BufferedTree:
    """Logical decomposition of a tree into cache-sized subtrees.

    ``boundaries`` lists the level at which each layer's subtrees are
    rooted, root layer first. A layer's subtrees extend down to the next
    boundary, whose nodes are both their leaves and the roots of the
    subtrees below; the last layer extends to the tree leaves.
    """

    tree: NaryTree
    boundaries: tuple[int, ...]
    subtree_bytes: int

    @property
    def layer_count(self) -> int:
        return len(self.boundaries)

    @property
    def subtree_levels(self) -> int:
        """Depth of the bottom layer's subtrees."""
        return self.tree.levels - self.boundaries[-1]

    def layer_span(self, layer: int) -> tuple[int, int]:
        start = self.boundaries[layer]
        stop = self.boundaries[layer + 1] if layer + 1 < self.layer_count else self.tree.levels - 1
        return start, stop

    def subtree_count(self, layer: int) -> int:
        return self.tree.level_sizes[self.boundaries[layer]]

    @property
    def buffer_count(self) -> int:
        """One buffer per non-root subtree."""
        return sum(self.subtree_count(i) for i in range(1, self.layer_count))

    def subtree(self, layer: int, sid: int) -> Subtree:
        start, stop = self.layer_span(layer)
        sizes = self.tree.level_sizes
        f = self.tree.fanout
        ranges = {}
        for depth, level in enumerate(range(start, stop + 1)):
            width = f ** depth
            ranges[level] = range(min(sid * width, sizes[level]), min((sid + 1) * width, sizes[level]))
        return Subtree(layer, sid, ranges)

    def iter_subtrees(self) -> Iterator[Subtree]:
        for layer in range(self.layer_count):
            for sid in range(self.subtree_count(layer)):
                yield self.subtree(layer, sid)

    def subtree_size(self, layer: int, sid: int) -> int:
        nodes = sum(len(r) for r in self.subtree(layer, sid).node_ranges.values())
        return nodes * self.tree.layout.node_bytes

    def child_subtrees(self, layer: int, sid: int) -> range:
        """Subtrees of ``layer + 1`` rooted at this subtree's leaves."""
        if layer + 1 >= self.layer_count:
            return range(0)
        _, stop = self.layer_span(layer)
        return self.subtree(layer, sid).node_ranges[stop]


def _largest_subtree_nodes(sizes: Sequence[int], fanout: int, start: int, stop: int) -> int:
    # the first subtree of a level is never smaller than the others
    return sum(min(fanout ** d, sizes[level]) for d, level in enumerate(range(start, stop + 1)))


def build_buffered_tree(tree: NaryTree, cache_budget_bytes: int) -> BufferedTree:
    """Decompose bottom-up: each layer's subtrees are as deep as the budget allows."""
    node_bytes = tree.layout.node_bytes
    if cache_budget_bytes < node_bytes:
        raise IndexBuildError(f"budget {cache_budget_bytes} B is smaller than one {node_bytes} B node")
    limit = cache_budget_bytes // node_bytes
    sizes = tree.level_sizes
    f = tree.fanout
    stop = tree.levels - 1
    boundaries = []
    while True:
        if _largest_subtree_nodes(sizes, f, 0, stop) <= limit:
            boundaries.append(0)
            break
        start = stop - 1
        if _largest_subtree_nodes(sizes, f, start, stop) > limit:
            raise IndexBuildError(
                f"budget {cache_budget_bytes} B cannot hold a node and its {f} children")
        while start > 0 and _largest_subtree_nodes(sizes, f, start - 1, stop) <= limit:
            start -= 1
        boundaries.append(start)
        stop = start
    return BufferedTree(tree=tree, boundaries=tuple(reversed(boundaries)),
                        subtree_bytes=cache_budget_bytes)


# --------------------------------------------------------------------------
# Partitioned index


@dataclass(frozen=True, eq=False)
class DelimiterTable:
    """``delimiters[i] <= key < delimiters[i + 1]`` routes to partition ``i``.

    The outer sentinels are 0 and 2**32, so every 32-bit key has an owner.
    """

    delimiters: np.ndarray
    rank_offsets: np.ndarray

    @property
    def parts(self) -> int:
        return len(self.delimiters) - 1

    def route(self, keys: np.ndarray) -> np.ndarray:
        internal = self.delimiters[1:-1]
        return np.searchsorted(internal, np.asarray(keys, dtype=np.uint64), side="right")

    def route_one(self, key: int) -> int:
        return int(self.route(np.array([key]))[0])


@dataclass(frozen=True, eq=False)
class Partition:
    id: int
    index: SortedIndex
    rank_offset: int


def partition_index(index: SortedIndex, parts: int) -> tuple[DelimiterTable, list[Partition]]:
    m = len(index)
    if parts < 1:
        raise IndexBuildError("need at least one partition")
    if parts > m:
        raise IndexBuildError(f"{parts} partitions requested for {m} keys")
    base, extra = divmod(m, parts)
    sizes = [base + (1 if i < extra else 0) for i in range(parts)]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(RANK_DTYPE)
    partitions = [
        Partition(id=i, index=_index_from_sorted(index.keys[int(o): int(o) + s]), rank_offset=int(o))
        for i, (o, s) in enumerate(zip(offsets, sizes))
    ]
    delimiters = np.empty(parts + 1, dtype=np.uint64)
    delimiters[0] = 0
    delimiters[-1] = KEY_SPACE_END
    for i in range(1, parts):
        delimiters[i] = partitions[i].index.keys[0]
    return DelimiterTable(_frozen(delimiters), _frozen(offsets)), partitions
