"""Search kernels for the five lookup strategies.

Every kernel answers a key with its rank: the number of index keys less
than or equal to it, plus the engine's ``rank_offset`` when the engine
serves one partition of a larger index.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .index import (
    KEY_DTYPE,
    RANK_DTYPE,
    BufferedTree,
    NaryTree,
    NodeLayout,
    SortedIndex,
    build_buffered_tree,
    build_nary_tree,
)


class EngineKind(str, enum.Enum):
    A = "A"
    B = "B"
    C1 = "C1"
    C2 = "C2"
    C3 = "C3"

    @classmethod
    def parse(cls, text: str) -> "EngineKind":
        t = text.strip().upper().replace("-", "")
        aliases = {"ATREE": "A", "BBUFFERED": "B", "C1TREE": "C1", "C2BUFFEREDL1": "C2", "C3BINARY": "C3"}
        try:
            return cls(aliases.get(t, t))
        except ValueError:
            raise ValueError(f"unknown engine kind {text!r}") from None


ALL_KINDS = tuple(EngineKind)


class EngineError(ValueError):
    """Raised for malformed lookup requests."""


@dataclass(frozen=True, eq=False)
class QueryBatch:
    batch_id: int
    keys: np.ndarray

    def __post_init__(self):
        keys = np.asarray(self.keys)
        if keys.ndim != 1 or keys.size == 0:
            raise EngineError("a query batch needs at least one key")
        object.__setattr__(self, "keys", keys.astype(KEY_DTYPE, copy=False))

    def __len__(self) -> int:
        return len(self.keys)


@dataclass(frozen=True, eq=False)
class ResultBatch:
    batch_id: int
    ranks: np.ndarray

    def __len__(self) -> int:
        return len(self.ranks)

    def __eq__(self, other):
        if not isinstance(other, ResultBatch):
            return NotImplemented
        return self.batch_id == other.batch_id and np.array_equal(self.ranks, other.ranks)


@dataclass(frozen=True)
class CacheGeometry:
    l1_bytes: int = 16 * 1024
    l2_bytes: int = 512 * 1024
    line_bytes: int = 32


@dataclass(frozen=True, eq=False)
class LookupEngine:
    kind: EngineKind
    structure: NaryTree | BufferedTree | SortedIndex
    rank_offset: int = 0

    def __post_init__(self):
        expected = {
            EngineKind.A: NaryTree, EngineKind.C1: NaryTree,
            EngineKind.B: BufferedTree, EngineKind.C2: BufferedTree,
            EngineKind.C3: SortedIndex,
        }[self.kind]
        if not isinstance(self.structure, expected):
            raise EngineError(f"{self.kind.value} engine needs a {expected.__name__}, "
                               f"got {type(self.structure).__name__}")

    @property
    def key_count(self) -> int:
        s = self.structure
        if isinstance(s, SortedIndex):
            return len(s)
        if isinstance(s, BufferedTree):
            return s.tree.key_count
        return s.key_count


def make_engine(kind: EngineKind | str, index: SortedIndex, *, rank_offset: int = 0,
                geometry: CacheGeometry = CacheGeometry(), layout_variant: str | None = None) -> LookupEngine:
    """Build the structure ``kind`` searches.

    Nodes are one cache line. B buffers subtrees sized to L2; C-2 to half
    of L1.
    """
    kind = EngineKind.parse(kind) if isinstance(kind, str) else kind
    if kind is EngineKind.C3:
        return LookupEngine(kind, index, rank_offset)
    layout = NodeLayout(node_bytes=geometry.line_bytes)
    if layout_variant is not None:
        layout = NodeLayout(node_bytes=geometry.line_bytes, variant=layout_variant)
    tree = build_nary_tree(index, layout)
    if kind in (EngineKind.A, EngineKind.C1):
        return LookupEngine(kind, tree, rank_offset)
    budget = geometry.l2_bytes if kind is EngineKind.B else geometry.l1_bytes // 2
    return LookupEngine(kind, build_buffered_tree(tree, budget), rank_offset)


# --------------------------------------------------------------------------
# Kernels


def lookup_binary(index: SortedIndex, key: int) -> int:
    """Count of keys ``<= key`` by bisection over the sorted array."""
    keys = index.keys
    lo, hi = 0, len(keys)
    while lo < hi:
        mid = (lo + hi) // 2
        if keys[mid] <= key:
            lo = mid + 1
        else:
            hi = mid
    return lo


def lookup_one(engine: LookupEngine, key: int) -> int:
    s = engine.structure
    if isinstance(s, SortedIndex):
        local = lookup_binary(s, key)
    elif isinstance(s, BufferedTree):
        local = s.tree.search_one(key)
    else:
        local = s.search_one(key)
    return engine.rank_offset + local


@dataclass
class BufferStats:
    """Per-call trace of a buffered traversal."""

    passes: int = 0
    filled_buffers: int = 0
    spills: int = 0
    keys_buffered: int = 0
    layer_passes: list[int] = field(default_factory=list)


class _SubtreeBuffer:
    """Growable queue of (key, original position) pairs for one subtree."""

    __slots__ = ("keys", "pos", "size")

    def __init__(self, capacity: int):
        self.keys = np.empty(capacity, dtype=KEY_DTYPE)
        self.pos = np.empty(capacity, dtype=np.int64)
        self.size = 0

    def extend(self, keys: np.ndarray, pos: np.ndarray) -> bool:
        need = self.size + len(keys)
        spilled = need > len(self.keys)
        if spilled:
            cap = max(need, 2 * len(self.keys))
            grown_keys = np.empty(cap, dtype=KEY_DTYPE)
            grown_pos = np.empty(cap, dtype=np.int64)
            grown_keys[: self.size] = self.keys[: self.size]
            grown_pos[: self.size] = self.pos[: self.size]
            self.keys, self.pos = grown_keys, grown_pos
        self.keys[self.size: need] = keys
        self.pos[self.size: need] = pos
        self.size = need
        return spilled

    def drain(self) -> tuple[np.ndarray, np.ndarray]:
        out = self.keys[: self.size], self.pos[: self.size]
        self.size = 0
        return out


def lookup_batch_buffered(tree: BufferedTree, batch: QueryBatch, *, rank_offset: int = 0,
                          buffer_capacity: int | None = None,
                          stats: BufferStats | None = None) -> ResultBatch:
    """Batch traversal through per-subtree buffers.

    The root subtree routes every key to the buffer of the subtree rooted at
    the leaf it reaches; each non-empty buffer is then processed as a batch
    of its own, layer by layer. Keys carry their batch position so the
    result comes back in input order.
    """
    stats = stats if stats is not None else BufferStats()
    base = tree.tree
    keys = batch.keys
    n = len(keys)
    out = np.empty(n, dtype=RANK_DTYPE)
    last_layer = tree.layer_count - 1

    if buffer_capacity is None and tree.layer_count > 1:
        buffer_capacity = max(1, n // max(1, tree.subtree_count(last_layer)) * 4)

    # work items: (layer, subtree id, keys, positions)
    pending = [(0, 0, keys, np.arange(n, dtype=np.int64))]
    stats.layer_passes = [0] * tree.layer_count
    while pending:
        layer, sid, k, pos = pending.pop()
        start, stop = tree.layer_span(layer)
        stats.passes += 1
        stats.layer_passes[layer] += 1
        nodes = np.full(len(k), sid, dtype=np.int64)
        reached = base.descend(k, nodes, start, stop)
        if layer == last_layer:
            out[pos] = base.leaf_ranks(k, reached)
            continue
        # route into the buffers of the subtrees rooted at the reached nodes
        order = np.argsort(reached, kind="stable")
        targets, first = np.unique(reached[order], return_index=True)
        bounds = np.append(first, len(order))
        children = []
        for t, lo, hi in zip(targets.tolist(), bounds[:-1].tolist(), bounds[1:].tolist()):
            buf = _SubtreeBuffer(buffer_capacity)
            sel = order[lo:hi]
            if buf.extend(k[sel], pos[sel]):
                stats.spills += 1
            stats.filled_buffers += 1
            stats.keys_buffered += buf.size
            children.append((t, buf))
        for t, buf in reversed(children):
            bk, bp = buf.drain()
            pending.append((layer + 1, t, bk, bp))
    if rank_offset:
        out += np.uint64(rank_offset)
    return ResultBatch(batch.batch_id, out)


def lookup_batch(engine: LookupEngine, batch: QueryBatch, *, stats: BufferStats | None = None) -> ResultBatch:
    if not isinstance(batch, QueryBatch) or len(batch) == 0:
        raise EngineError("lookup_batch needs a non-empty QueryBatch")
    s = engine.structure
    if isinstance(s, BufferedTree):
        return lookup_batch_buffered(s, batch, rank_offset=engine.rank_offset, stats=stats)
    if isinstance(s, SortedIndex):
        ranks = np.searchsorted(s.keys, batch.keys, side="right").astype(RANK_DTYPE)
    else:
        ranks = s.search(batch.keys)
    if engine.rank_offset:
        ranks += np.uint64(engine.rank_offset)
    return ResultBatch(batch.batch_id, ranks)


def structure_checksum(engine: LookupEngine) -> str:
    s = engine.structure
    if isinstance(s, SortedIndex):
        return hashlib.blake2b(s.keys.tobytes(), digest_size=16).hexdigest()
    if isinstance(s, BufferedTree):
        return s.tree.checksum()
    return s.checksum()
