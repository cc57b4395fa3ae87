"""Counter-based SplitMix64 streams.

The generator is the standard SplitMix64 finalizer applied to
``seed + (i + 1) * GOLDEN_GAMMA``. Being counter based, any element of a
stream can be produced independently, which lets sub-streams be drawn in
vectorized chunks and reproduced bit-for-bit by other implementations.

Sub-streams: stream ``s`` of seed ``x`` starts from ``mix64(x ^ mix64(s + 1))``.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1

INDEX_STREAM = 0
QUERY_STREAM = 1


def mix64(z: int) -> int:
    """SplitMix64 output function on a Python int."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def substream_seed(seed: int, stream: int) -> int:
    return mix64((seed & _MASK64) ^ mix64(stream + 1))


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def uint64_block(state: int, start: int, count: int) -> np.ndarray:
    """Elements ``start .. start+count-1`` of the stream whose base state is ``state``."""
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state & _MASK64) + counters * np.uint64(GOLDEN_GAMMA)
        return _mix64_array(z)


def uint32_block(state: int, start: int, count: int) -> np.ndarray:
    """High 32 bits of each 64-bit output."""
    return (uint64_block(state, start, count) >> np.uint64(32)).astype(np.uint32)


class KeyStream:
    """Sequential reader over one 32-bit sub-stream."""

    def __init__(self, seed: int, stream: int):
        self.state = substream_seed(seed, stream)
        self.position = 0

    def take(self, count: int) -> np.ndarray:
        out = uint32_block(self.state, self.position, count)
        self.position += count
        return out
