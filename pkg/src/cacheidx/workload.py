"""Workload and experiment descriptions plus deterministic key generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engines import ALL_KINDS, EngineKind
from .rng import INDEX_STREAM, QUERY_STREAM, KeyStream

KB = 1024

DESK_QUERY_KEYS = 1 << 20
DESK_INDEX_KEYS = 327_680
DEFAULT_SWEEP = tuple(KB * s for s in (8, 16, 32, 64, 128, 256, 512, 1024))


@dataclass(frozen=True)
class WorkloadSpec:
    seed: int = 1
    key_count: int = DESK_QUERY_KEYS
    index_key_count: int = DESK_INDEX_KEYS
    distribution: str = "uniform"

    def __post_init__(self):
        if not 0 <= self.seed < 1 << 64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")
        if self.key_count < 1:
            raise ValueError("key_count must be at least 1")
        if not 1 <= self.index_key_count < 1 << 32:
            raise ValueError("index_key_count must be between 1 and 2**32 - 1")
        if self.distribution != "uniform":
            raise ValueError(f"only the uniform distribution is supported, got {self.distribution!r}")


@dataclass(frozen=True)
class ExperimentSpec:
    methods: tuple[EngineKind, ...] = ALL_KINDS
    batch_bytes_list: tuple[int, ...] = DEFAULT_SWEEP
    nodes: int = 5
    repetitions: int = 3
    normalize_divisor: int = 11

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(EngineKind.parse(m) if isinstance(m, str) else m
                                                 for m in self.methods))
        sweep = tuple(int(b) for b in self.batch_bytes_list)
        object.__setattr__(self, "batch_bytes_list", sweep)
        if not self.methods:
            raise ValueError("at least one method is required")
        if not sweep:
            raise ValueError("batch_bytes_list must not be empty")
        if any(b >= a for a, b in zip(sweep[1:], sweep)) or sweep[0] < 4:
            raise ValueError(f"batch sizes must be ascending and at least 4 bytes: {sweep}")
        if self.nodes < 2:
            raise ValueError("a distributed run needs a master and at least one slave (nodes >= 2)")
        if self.repetitions < 1 or self.normalize_divisor < 1:
            raise ValueError("repetitions and normalize_divisor must be positive")

    @property
    def slaves(self) -> int:
        return self.nodes - 1


def gen_keys(spec: WorkloadSpec) -> np.ndarray:
    """Query keys: the first ``key_count`` values of the query sub-stream."""
    return KeyStream(spec.seed, QUERY_STREAM).take(spec.key_count)


def gen_index_keys(spec: WorkloadSpec) -> np.ndarray:
    """The first ``index_key_count`` distinct values of the index sub-stream, in stream order."""
    stream = KeyStream(spec.seed, INDEX_STREAM)
    want = spec.index_key_count
    drawn = np.empty(0, dtype=np.uint32)
    while True:
        extra = max(1024, want - len(drawn) + want // 64)
        drawn = np.concatenate([drawn, stream.take(extra)])
        _, first = np.unique(drawn, return_index=True)
        if len(first) >= want:
            first.sort()
            return drawn[first[:want]]
