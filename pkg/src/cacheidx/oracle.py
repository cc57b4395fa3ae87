"""Reference rank computations that share no code with the engines."""

from __future__ import annotations

import numpy as np


def linear_scan_ranks(index_keys: np.ndarray, queries: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Brute force: compare every query against every index key. O(M * N)."""
    keys = np.asarray(index_keys, dtype=np.uint32)
    q = np.asarray(queries, dtype=np.uint32)
    out = np.empty(len(q), dtype=np.uint64)
    for start in range(0, len(q), chunk):
        block = q[start: start + chunk]
        out[start: start + len(block)] = (keys[None, :] <= block[:, None]).sum(axis=1)
    return out


def merge_ranks(index_keys: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """One sweep over the sorted union of index keys and queries.

    Index keys sort ahead of equal queries, so the number of index entries
    preceding a query in the union is its rank.
    """
    keys = np.asarray(index_keys, dtype=np.uint64)
    q = np.asarray(queries, dtype=np.uint64)
    # key in the high bits, tag in bit 0: index entries carry 0, queries 1
    tagged = np.concatenate([keys << np.uint64(1), (q << np.uint64(1)) | np.uint64(1)])
    order = np.argsort(tagged, kind="stable")
    is_index = order < len(keys)
    seen = np.cumsum(is_index)
    out = np.empty(len(q), dtype=np.uint64)
    query_slots = ~is_index
    out[order[query_slots] - len(keys)] = seen[query_slots]
    return out
