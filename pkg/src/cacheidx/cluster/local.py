"""Start whole topologies inside one process, over loopback or localhost TCP."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..engines import CacheGeometry, EngineKind, LookupEngine, make_engine
from ..index import DelimiterTable, SortedIndex, partition_index
from .runtime import (
    DEFAULT_WINDOW,
    BatchingPolicy,
    ClusterError,
    CollectSink,
    MasterStats,
    OrderedSink,
    SlaveStats,
    run_master,
    run_replicated,
    run_slave,
)
from .transport import Channel, accept, connect, listen, loopback_pair

TRANSPORTS = ("loopback", "tcp")


@dataclass
class ClusterRun:
    ranks: np.ndarray
    masters: list[MasterStats]
    slaves: list[SlaveStats]
    elapsed_s: float
    per_worker_batches: list[int] = field(default_factory=list)

    @property
    def keys_in(self) -> int:
        return sum(m.keys_in for m in self.masters)

    @property
    def keys_answered(self) -> int:
        return sum(m.keys_answered for m in self.masters)

    @property
    def slave_idle_fraction(self) -> float:
        busy = sum(s.busy_s for s in self.slaves)
        idle = sum(s.idle_s for s in self.slaves)
        return idle / (busy + idle) if busy + idle > 0 else 0.0


@dataclass(frozen=True, eq=False)
class PartitionedEngines:
    table: DelimiterTable
    engines: list[LookupEngine]

    def key_range(self, i: int) -> tuple[int, int]:
        return int(self.table.delimiters[i]), int(self.table.delimiters[i + 1])


def build_partitioned(index: SortedIndex, kind: EngineKind | str, slaves: int,
                      geometry: CacheGeometry = CacheGeometry()) -> PartitionedEngines:
    table, parts = partition_index(index, slaves)
    engines = [make_engine(kind, p.index, rank_offset=p.rank_offset, geometry=geometry) for p in parts]
    return PartitionedEngines(table, engines)


def _chunked(queries: np.ndarray, size: int):
    for start in range(0, len(queries), size):
        yield queries[start: start + size]


class _Workers:
    """Slave threads, each holding one channel per master."""

    def __init__(self, engines: Sequence[LookupEngine], masters: int, transport: str,
                 key_ranges: Sequence[tuple[int, int] | None]):
        if transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}, got {transport!r}")
        n = len(engines)
        self.master_ends: list[list[Channel]] = [[None] * n for _ in range(masters)]
        self.stats: list[SlaveStats | None] = [None] * n
        self.errors: list[BaseException] = []
        self.threads = []
        for s, engine in enumerate(engines):
            if transport == "loopback":
                ends = []
                for m in range(masters):
                    master_end, slave_end = loopback_pair()
                    self.master_ends[m][s] = master_end
                    ends.append(slave_end)
                self._spawn(s, engine, key_ranges[s], ends=ends)
            else:
                server = listen("127.0.0.1", 0)
                port = server.getsockname()[1]
                self._spawn(s, engine, key_ranges[s], server=server, masters=masters)
                for m in range(masters):
                    self.master_ends[m][s] = connect("127.0.0.1", port)

    def _spawn(self, s, engine, key_range, *, ends=None, server=None, masters=0):
        def body():
            try:
                chans = ends
                if server is not None:
                    try:
                        chans = [accept(server, timeout=30.0) for _ in range(masters)]
                    finally:
                        server.close()
                self.stats[s] = run_slave(chans, engine, node_id=s + 1, key_range=key_range)
            except BaseException as exc:
                self.errors.append(exc)

        t = threading.Thread(target=body, daemon=True, name=f"slave-{s + 1}")
        t.start()
        self.threads.append(t)

    def join(self, timeout: float = 60.0) -> list[SlaveStats]:
        for t in self.threads:
            t.join(timeout)
        if self.errors:
            raise ClusterError(f"slave failed: {self.errors[0]}") from self.errors[0]
        if any(t.is_alive() for t in self.threads):
            raise ClusterError("slave did not terminate after SHUTDOWN")
        return list(self.stats)


def _drive(workers: _Workers, masters: int, run_one) -> tuple[np.ndarray, list[MasterStats], float]:
    collect = CollectSink()
    ordered = OrderedSink(collect)
    results: list[MasterStats | None] = [None] * masters
    errors: list[BaseException] = []

    def body(m):
        def sink(seq, ranks):
            ordered(seq * masters + m, ranks)
        try:
            results[m] = run_one(m, workers.master_ends[m], sink)
        except BaseException as exc:
            errors.append(exc)
            for ch in workers.master_ends[m]:
                ch.close()

    t0 = time.perf_counter()
    if masters == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(m,), name=f"master-{m}") for m in range(masters)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    elapsed = time.perf_counter() - t0
    if errors:
        raise errors[0]
    return collect.result(), results, elapsed


def _split_source(queries: np.ndarray, chunk: int, masters: int, m: int):
    for i, keys in enumerate(_chunked(queries, chunk)):
        if i % masters == m:
            yield keys


def run_partitioned(cluster: PartitionedEngines, queries: np.ndarray, *,
                    policy: BatchingPolicy = BatchingPolicy(), transport: str = "loopback",
                    masters: int = 1, window: int = DEFAULT_WINDOW) -> ClusterRun:
    """Method C: ``masters`` masters share every slave; input chunks alternate between masters."""
    if masters < 1:
        raise ValueError("need at least one master")
    queries = np.asarray(queries)
    ranges = [cluster.key_range(i) for i in range(len(cluster.engines))]
    workers = _Workers(cluster.engines, masters, transport, ranges)
    chunk = policy.batch_keys

    def run_one(m, channels, sink):
        return run_master(channels, cluster.table, _split_source(queries, chunk, masters, m), sink,
                          policy=policy, node_id=m, window=window)

    ranks, mstats, elapsed = _drive(workers, masters, run_one)
    return ClusterRun(ranks, mstats, workers.join(), elapsed)


def run_replicated_local(engine: LookupEngine, queries: np.ndarray, *, workers: int = 1,
                         policy: BatchingPolicy = BatchingPolicy(), transport: str = "loopback",
                         window: int = DEFAULT_WINDOW) -> ClusterRun:
    """Methods A/B behind a round-robin balancer; every worker shares one read-only replica."""
    queries = np.asarray(queries)
    pool = _Workers([engine] * workers, 1, transport, [None] * workers)

    def run_one(m, channels, sink):
        return run_replicated(channels, _chunked(queries, policy.batch_keys), sink,
                              policy=policy, node_id=m, window=window)

    ranks, mstats, elapsed = _drive(pool, 1, run_one)
    return ClusterRun(ranks, mstats, pool.join(), elapsed, list(mstats[0].per_peer_batches))
