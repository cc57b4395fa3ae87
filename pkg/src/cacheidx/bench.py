"""Experiment driver: batch-size sweeps across methods, timing and CSV output."""

from __future__ import annotations

import csv
import gc
import io
import logging
import statistics
import time
from dataclasses import dataclass, fields
from decimal import Decimal
from typing import Callable, Iterable, Sequence

import numpy as np

from .cluster.local import ClusterRun, build_partitioned, run_partitioned, run_replicated_local
from .cluster.runtime import BatchingPolicy
from .config import Settings
from .engines import EngineKind, LookupEngine, QueryBatch, lookup_batch, make_engine
from .index import SortedIndex, build_sorted_index
from .oracle import merge_ranks
from .workload import ExperimentSpec, WorkloadSpec, gen_index_keys, gen_keys

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "batch_bytes", "total_keys", "elapsed_ns", "normalized_s",
               "throughput_keys_per_s", "slave_idle_fraction")
ORACLE_SAMPLE = 10_000
LOCAL_METHODS = (EngineKind.A, EngineKind.B)


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class MeasurementRow:
    method: str
    batch_bytes: int
    total_keys: int
    elapsed_ns: int
    normalized_s: float
    throughput_keys_per_s: float
    slave_idle_fraction: float

    def __post_init__(self):
        if self.elapsed_ns <= 0:
            raise ValueError("elapsed_ns must be positive")

    @classmethod
    def measured(cls, method: str, batch_bytes: int, total_keys: int, elapsed_ns: int,
                 divisor: int, idle: float) -> "MeasurementRow":
        seconds = elapsed_ns / 1e9
        return cls(method, batch_bytes, total_keys, elapsed_ns, seconds / divisor,
                   total_keys / seconds, idle)


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(Decimal(repr(value)), "f")
    return str(value)


def emit_csv(rows: Iterable[MeasurementRow]) -> bytes:
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(getattr(r, c)) for c in CSV_COLUMNS))
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_csv(data: bytes | str) -> list[MeasurementRow]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {header}")
    types = {f.name: f.type for f in fields(MeasurementRow)}
    rows = []
    for rec in reader:
        if not rec:
            continue
        values = {}
        for name, raw in zip(CSV_COLUMNS, rec, strict=True):
            t = types[name]
            values[name] = raw if t in (str, "str") else int(raw) if t in (int, "int") else float(raw)
        rows.append(MeasurementRow(**values))
    return rows


def emit_answers(queries: np.ndarray, ranks: np.ndarray) -> bytes:
    """``key,rank`` per query, in stream order."""
    buf = io.StringIO()
    buf.write("key,rank\n")
    np.savetxt(buf, np.column_stack([np.asarray(queries, dtype=np.uint64), ranks.astype(np.uint64)]),
               fmt="%d", delimiter=",")
    return buf.getvalue().encode("utf-8")


@dataclass
class Workload:
    index: SortedIndex
    queries: np.ndarray

    @classmethod
    def generate(cls, spec: WorkloadSpec) -> "Workload":
        return cls(build_sorted_index(gen_index_keys(spec)), gen_keys(spec))


def run_local(engine: LookupEngine, queries: np.ndarray, batch_keys: int) -> np.ndarray:
    """One node looks up the whole workload, ``batch_keys`` at a time."""
    out = np.empty(len(queries), dtype=np.uint64)
    for start in range(0, len(queries), batch_keys):
        stop = min(start + batch_keys, len(queries))
        out[start:stop] = lookup_batch(engine, QueryBatch(start, queries[start:stop])).ranks
    return out


@dataclass
class _Pass:
    ranks: np.ndarray
    elapsed_ns: int
    idle: float


def _check_run(run: ClusterRun, n: int, label: str) -> None:
    if run.keys_in != n or run.keys_answered != n:
        raise ExperimentError(f"{label}: conservation broken ({run.keys_in} in, {run.keys_answered} answered)")


def run_experiment(spec: ExperimentSpec, workload: WorkloadSpec | Workload, settings: Settings = Settings(), *,
                   replicate_local: bool = False, full_check: bool = False,
                   progress: Callable[[MeasurementRow], None] | None = None) -> list[MeasurementRow]:
    """Measure every (method, batch size) pair of ``spec``.

    A and B run on one node and are divided by ``normalize_divisor``; with
    ``replicate_local`` they run behind the round-robin balancer instead,
    with ``spec.slaves`` workers. C methods run as one master plus
    ``spec.slaves`` slaves over ``settings.transport``. ``full_check``
    compares the whole answer stream with the oracle instead of a sample.
    """
    wl = workload if isinstance(workload, Workload) else Workload.generate(workload)
    queries = wl.queries
    n = len(queries)
    if full_check:
        sample = np.arange(n)
    else:
        sample = np.linspace(0, n - 1, min(ORACLE_SAMPLE, n)).astype(np.int64)
    expected = merge_ranks(wl.index.keys, queries[sample])
    rows = []
    for method in spec.methods:
        local = method in LOCAL_METHODS
        if local:
            engine = make_engine(method, wl.index, geometry=settings.geometry)
        else:
            cluster = build_partitioned(wl.index, method, spec.slaves, settings.geometry)
        for batch_bytes in spec.batch_bytes_list:
            label = f"method {method.value} at {batch_bytes}-byte batches"
            policy = BatchingPolicy(batch_bytes, settings.policy.flush_timeout)

            def one_pass() -> _Pass:
                gc.collect()
                if local and not replicate_local:
                    t0 = time.perf_counter_ns()
                    ranks = run_local(engine, queries, policy.batch_keys)
                    return _Pass(ranks, time.perf_counter_ns() - t0, 0.0)
                t0 = time.perf_counter_ns()
                if local:
                    run = run_replicated_local(engine, queries, workers=spec.slaves, policy=policy,
                                               transport=settings.transport, window=settings.window)
                else:
                    run = run_partitioned(cluster, queries, policy=policy, transport=settings.transport,
                                          masters=settings.masters, window=settings.window)
                elapsed = time.perf_counter_ns() - t0
                _check_run(run, n, label)
                return _Pass(run.ranks, elapsed, run.slave_idle_fraction)

            warm = one_pass()
            if not np.array_equal(warm.ranks[sample], expected):
                bad = int(np.count_nonzero(warm.ranks[sample] != expected))
                raise ExperimentError(f"{label}: {bad} of {len(sample)} sampled answers disagree with the oracle")
            passes = []
            for _ in range(spec.repetitions):
                p = one_pass()
                if not np.array_equal(p.ranks, warm.ranks):
                    raise ExperimentError(f"{label}: answers changed between repetitions")
                passes.append(p)
            elapsed = int(statistics.median_low(sorted(p.elapsed_ns for p in passes)))
            idle = next(p.idle for p in passes if p.elapsed_ns == elapsed)
            divisor = spec.normalize_divisor if local else 1
            row = MeasurementRow.measured(method.value, batch_bytes, n, elapsed, divisor, idle)
            log.info("%s: %.3f s", label, elapsed / 1e9)
            if progress:
                progress(row)
            rows.append(row)
    return rows


def verify_engines(workload: WorkloadSpec | Workload, *, slaves: int = 4, batch_bytes: int = 128 * 1024,
                   transport: str = "loopback", methods: Sequence[EngineKind] | None = None) -> dict[str, bool]:
    """Run every method once and compare the full answer stream with the merge oracle."""
    wl = workload if isinstance(workload, Workload) else Workload.generate(workload)
    expected = merge_ranks(wl.index.keys, wl.queries)
    policy = BatchingPolicy(batch_bytes)
    outcome = {}
    for method in methods or tuple(EngineKind):
        if method in LOCAL_METHODS:
            ranks = run_local(make_engine(method, wl.index), wl.queries, policy.batch_keys)
        else:
            run = run_partitioned(build_partitioned(wl.index, method, slaves), wl.queries,
                                  policy=policy, transport=transport)
            ranks = run.ranks if run.keys_in == run.keys_answered == len(wl.queries) else None
        outcome[method.value] = ranks is not None and np.array_equal(ranks, expected)
    return outcome
