"""Acceptance criteria, one test each.

Every test records a one-line verdict that the terminal summary prints as
``criterion N: PASS|FAIL ...`` and then asserts it.
"""

import math
import subprocess
import sys
import time

import numba
import numpy as np
import pytest
from scipy.optimize import brentq

from cacheidx.bench import Workload, emit_answers, run_experiment, run_local
from cacheidx.cluster.local import build_partitioned, run_partitioned
from cacheidx.cluster.runtime import BatchingPolicy
from cacheidx.cluster.wire import FrameError, FrameType, Frame, decode_frame, encode_frame
from cacheidx.config import Settings
from cacheidx.engines import EngineKind, make_engine
from cacheidx.index import build_sorted_index, write_snapshot
from cacheidx.model import (
    MB,
    ScalingAssumptions,
    evaluate,
    pentium3_profile,
    project,
    reference_shape,
    solve_q0,
    touched_lines,
    xd,
)
from cacheidx.oracle import linear_scan_ranks, merge_ranks
from cacheidx.workload import ExperimentSpec, WorkloadSpec, gen_index_keys, gen_keys
from conftest import ACCEPTANCE_RESULTS


def verdict(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((number, bool(passed), detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


# --------------------------------------------------------------------------
# 1. every method agrees with the oracle


def test_criterion_1_oracle_equivalence():
    t0 = time.perf_counter()
    failures = []
    for seed in range(10):
        spec = WorkloadSpec(seed=seed, key_count=100_000, index_key_count=100_000)
        index = build_sorted_index(gen_index_keys(spec))
        queries = gen_keys(spec)
        expected = merge_ranks(index.keys, queries)
        # brute force on a sample ties the fast oracle to the definition of rank
        sample = np.random.default_rng(seed).choice(len(queries), 2000, replace=False)
        if not np.array_equal(linear_scan_ranks(index.keys, queries[sample]), expected[sample]):
            failures.append(f"seed {seed}: oracles disagree")
        policy = BatchingPolicy()
        for kind in EngineKind:
            if kind in (EngineKind.A, EngineKind.B):
                got = run_local(make_engine(kind, index), queries, policy.batch_keys)
            else:
                run = run_partitioned(build_partitioned(index, kind, 4), queries, policy=policy)
                got = run.ranks
            if not np.array_equal(got, expected):
                failures.append(f"seed {seed} method {kind.value}")
    elapsed = time.perf_counter() - t0
    verdict(1, not failures and elapsed < 60,
            f"10 seeds x 5 methods exact, {elapsed:.1f} s" + (f"; mismatches {failures}" if failures else ""))


# --------------------------------------------------------------------------
# 2. loopback and TCP give the same answers


def _start_slave(snapshot, partition, parts, workload_args):
    proc = subprocess.Popen(
        [sys.executable, "-m", "cacheidx", "serve", "--role", "slave", "--snapshot", str(snapshot),
         "--kind", "C3", "--parts", str(parts), "--partition", str(partition),
         "--listen", "127.0.0.1:0", *workload_args],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline().strip()
    if not line.startswith("LISTENING "):
        proc.kill()
        raise RuntimeError(f"slave {partition} did not start: {line!r} {proc.stderr.read()}")
    return proc, line.split()[1]


def test_criterion_2_transport_agreement(tmp_path):
    t0 = time.perf_counter()
    spec = WorkloadSpec(seed=7, key_count=1 << 18, index_key_count=100_000)
    workload_args = ["--seed", "7", "--keys", str(spec.key_count), "--index-keys", str(spec.index_key_count)]
    index = build_sorted_index(gen_index_keys(spec))
    queries = gen_keys(spec)
    loop = run_partitioned(build_partitioned(index, EngineKind.C3, 4), queries, transport="loopback")
    loop_csv = emit_answers(queries, loop.ranks)

    snapshot = tmp_path / "index.csix"
    write_snapshot(snapshot, index)
    slaves = [_start_slave(snapshot, i, 4, workload_args) for i in range(4)]
    answers = tmp_path / "tcp.csv"
    try:
        master = subprocess.run(
            [sys.executable, "-m", "cacheidx", "serve", "--role", "master", "--snapshot", str(snapshot),
             "--peers", ",".join(ep for _, ep in slaves), "--answers", str(answers), *workload_args],
            capture_output=True, text=True, timeout=110)
        codes = [p.wait(timeout=30) for p, _ in slaves]
    finally:
        for p, _ in slaves:
            if p.poll() is None:
                p.kill()
    elapsed = time.perf_counter() - t0
    same = master.returncode == 0 and answers.is_file() and answers.read_bytes() == loop_csv
    verdict(2, same and codes == [0] * 4 and elapsed < 120,
            f"5 processes over TCP, {len(loop_csv)} answer bytes identical={same}, "
            f"exit codes master={master.returncode} slaves={codes}, {elapsed:.1f} s")


# --------------------------------------------------------------------------
# 3. distinct-line expectation against simulation


@numba.njit(cache=True)
def _occupancy_trials(lam, q, trials, seed):
    # xorshift64* draws, mapped to [0, lam) by a multiply-shift on the top 32 bits
    state = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) | np.uint64(1)
    mult = np.uint64(0x2545F4914F6CDD1D)
    s12, s25, s27, s32 = np.uint64(12), np.uint64(25), np.uint64(27), np.uint64(32)
    n = np.uint64(lam)
    stamp = np.zeros(lam, dtype=np.int64)
    total = 0
    for t in range(1, trials + 1):
        distinct = 0
        for _ in range(q):
            state ^= state >> s12
            state ^= state << s25
            state ^= state >> s27
            j = (((state * mult) >> s32) * n) >> s32
            if stamp[j] != t:
                stamp[j] = t
                distinct += 1
        total += distinct
    return total / trials


def _occupancy_variance(lam, q):
    # variance of the number of untouched lines, which equals that of the touched count
    a = (1.0 - 1.0 / lam) ** q
    b = (1.0 - 2.0 / lam) ** q
    return max(lam * a + lam * (lam - 1) * b - (lam * a) ** 2, 0.0)


def test_criterion_3_xd_law():
    t0 = time.perf_counter()
    trials = 100_000
    worst = 0.0
    failures = []
    for lam in (2, 16, 256, 4096):
        for q in sorted({1, 10, lam, 10 * lam}):
            mean = _occupancy_trials(lam, q, trials, lam * 7919 + q)
            sigma = math.sqrt(_occupancy_variance(lam, q) / trials)
            predicted = xd(lam, q)
            if sigma == 0.0:
                ok = mean == predicted
                z = 0.0 if ok else math.inf
            else:
                z = abs(mean - predicted) / sigma
                ok = z <= 3.0
            worst = max(worst, z)
            if not ok:
                failures.append((lam, q, mean, predicted))
    exact = all(xd(lam, 1) == 1.0 for lam in (1, 2, 16, 256, 4096, 1e9)) and \
        all(xd(1, q) == 1.0 for q in (1, 1.5, 10, 1e6))
    elapsed = time.perf_counter() - t0
    verdict(3, not failures and exact and elapsed < 60,
            f"16 cases within 3 sigma (worst {worst:.2f}), exact identities={exact}, {elapsed:.1f} s"
            + (f"; off {failures}" if failures else ""))


# --------------------------------------------------------------------------
# 4. q0 residual


def test_criterion_4_q0_solve():
    t0 = time.perf_counter()
    shape = reference_shape()
    C2, B2 = 512 * 1024, 32
    q0 = solve_q0(shape, C2, B2)
    target = C2 / B2
    residual = abs(touched_lines(shape.lam, q0) - target) / target
    elapsed = time.perf_counter() - t0
    verdict(4, residual <= 1e-9 and elapsed < 1,
            f"q0 = {q0:.6f}, relative residual {residual:.2e}, {elapsed * 1e3:.1f} ms")


# --------------------------------------------------------------------------
# 5. cost model totals


def _hand_transcription():
    """The per-key formulas written out again with plain loops, the power
    form of the distinct-line law and a generic root finder."""
    comp, W1, W1_random = 30e-9, 647e6, 48e6
    C2, B2 = 512 * 1024, 32
    B2_pen, B1_pen = 110e-9, 16.25e-9
    slaves, masters = 10, 1
    T, L = 7, 6
    keys, batch_bytes, divisor = 2 ** 23, 128 * 1024, 11

    lam = [8.0 ** i for i in range(T - 1)]
    lam.append(math.ceil(3.2 * MB / 32) - sum(lam))

    def distinct(lines, q):
        return lines * (1.0 - (1.0 - 1.0 / lines) ** q)

    def footprint(q):
        total = 0.0
        for x in lam:
            total += distinct(x, q)
        return total

    lines = C2 / B2
    q0 = brentq(lambda q: footprint(q) - lines, 1.0, 1e9, xtol=1e-14, rtol=1e-15)
    misses = min(max(footprint(q0 + 1) - lines, 0.0), T)
    a = T * comp + 8 / W1_random + misses * B2_pen

    # two layers: the root level on top, six levels of subtrees under it
    layers = math.ceil(T / L)
    top = T - (layers - 1) * L
    batch_keys = batch_bytes / 4
    m = 0.0
    for levels in (range(0, top), range(top, T)):
        n_sub = lam[levels[0]]
        q = batch_keys / n_sub
        touched = 0.0
        for i in levels:
            touched += distinct(lam[i] / n_sub, q)
        m += touched / q
    b = (T * comp + m * B2_pen + (T - m) * B1_pen
         + 4 / W1 * layers + B2_pen * 4 / B2 * (layers - 1))

    dispatch = math.ceil(math.log2(slaves + 1)) * comp / (B2 // 4)
    master = (dispatch + 8 / W1) / masters
    slave = (L * (comp + B1_pen) + 8 / W1) / slaves
    c3 = max(master, slave)
    return {"A": a * keys / divisor, "B": b * keys / divisor, "C3": c3 * keys}


def test_criterion_5_table3_model():
    t0 = time.perf_counter()
    rows = evaluate(pentium3_profile(), reference_shape(), total_keys=2 ** 23,
                    batch_bytes=128 * 1024, normalize=11)
    got = {r.method: r.normalized_s for r in rows}
    hand = _hand_transcription()
    rel = max(abs(got[m] - hand[m]) / hand[m] for m in hand)
    ordered = got["C3"] < got["B"] < got["A"]
    published = {"A": 0.45, "B": 0.38, "C3": 0.28}
    within = {m: abs(got[m] - published[m]) / published[m] <= 0.30 for m in published}
    elapsed = time.perf_counter() - t0
    verdict(5, rel <= 1e-9 and ordered and all(within.values()) and elapsed < 1,
            f"(a) max rel diff {rel:.1e} (b) C3<B<A={ordered} (c) "
            + ", ".join(f"{m} {got[m]:.3f}s vs {published[m]}" for m in published)
            + f", {elapsed * 1e3:.0f} ms")


# --------------------------------------------------------------------------
# 6. projection


def test_criterion_6_future_projection():
    t0 = time.perf_counter()
    rows = project(pentium3_profile(), reference_shape(), years=5, scaling=ScalingAssumptions())
    ratio = [r.ratio_b_over_c3 for r in rows if r.method == "C3"]
    monotone = all(b >= a for a, b in zip(ratio, ratio[1:]))
    start_ok = 1.5 <= ratio[0] <= 3.0
    end_ok = ratio[-1] >= 5.0
    elapsed = time.perf_counter() - t0
    verdict(6, monotone and start_ok and end_ok and elapsed < 1,
            f"B/C3 by year {[round(r, 3) for r in ratio]}: non-decreasing={monotone}, "
            f"start in [1.5, 3]={start_ok}, year 5 >= 5={end_ok}")


# --------------------------------------------------------------------------
# 7. batch-size sweep shape

NOISE = 0.20


@pytest.mark.slow
def test_criterion_7_sweep_shape():
    t0 = time.perf_counter()
    spec = ExperimentSpec(methods=(EngineKind.C3,), nodes=5, repetitions=3)
    workload = Workload.generate(WorkloadSpec(seed=1))
    assert len(workload.queries) == 2 ** 20
    # run_experiment raises on any conservation, ordering or oracle failure
    rows = run_experiment(spec, workload, Settings(), full_check=True)
    tput = [r.throughput_keys_per_s for r in rows]
    running = np.maximum.accumulate(tput)
    no_drop = all(t >= (1 - NOISE) * m for t, m in zip(tput, running))
    growth = tput[-1] >= tput[0]
    flat_tail = abs(tput[-1] - tput[-2]) <= NOISE * max(tput[-1], tput[-2])
    elapsed = time.perf_counter() - t0
    verdict(7, no_drop and growth and flat_tail and elapsed < 300,
            "C3 Mkeys/s " + ", ".join(f"{r.batch_bytes // 1024}K:{r.throughput_keys_per_s / 1e6:.2f}"
                                     for r in rows)
            + f"; no drop >{NOISE:.0%}={no_drop}, grows={growth}, flat tail={flat_tail}, {elapsed:.0f} s")


# --------------------------------------------------------------------------
# 8. wire fuzz


def _random_frame(rng):
    ftype = FrameType(int(rng.choice([int(t) for t in FrameType])))
    node, batch = int(rng.integers(0, 1 << 16)), int(rng.integers(0, 1 << 32))
    if ftype == FrameType.QUERY_BATCH:
        payload = rng.integers(0, 1 << 32, int(rng.integers(0, 64)), dtype=np.uint64).astype(np.uint32)
    elif ftype == FrameType.RESULT_BATCH:
        payload = rng.integers(0, np.iinfo(np.uint64).max, int(rng.integers(0, 64)), dtype=np.uint64,
                               endpoint=True)
    else:
        payload = np.empty(0, dtype=np.uint32)
    return Frame(ftype, node, batch, payload)


def _mutate(data: bytes, rng) -> bytes:
    b = bytearray(data)
    op = int(rng.integers(0, 4))
    if op == 0 and b:
        for _ in range(int(rng.integers(1, 4))):
            b[int(rng.integers(0, len(b)))] ^= 1 << int(rng.integers(0, 8))
    elif op == 1:
        del b[int(rng.integers(0, len(b) + 1)):]
    elif op == 2:
        b += bytes(rng.integers(0, 256, int(rng.integers(1, 16)), dtype=np.uint8))
    else:
        start = int(rng.integers(0, 14))
        b[start:start + 4] = bytes(rng.integers(0, 256, 4, dtype=np.uint8))
    return bytes(b)


def test_criterion_8_wire_fuzz():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    round_trips = 0
    for _ in range(10_000):
        frame = _random_frame(rng)
        if decode_frame(encode_frame(frame)) == frame:
            round_trips += 1
    rejected = accepted = 0
    crashes = []
    for _ in range(10_000):
        data = _mutate(encode_frame(_random_frame(rng)), rng)
        try:
            decode_frame(data)
            accepted += 1
        except FrameError:
            rejected += 1
        except Exception as exc:  # anything but FrameError is a decoder crash
            crashes.append(repr(exc))
    elapsed = time.perf_counter() - t0
    verdict(8, round_trips == 10_000 and not crashes and elapsed < 60,
            f"{round_trips}/10000 round trips, mutated: {rejected} rejected, {accepted} still valid, "
            f"{len(crashes)} crashes, {elapsed:.1f} s")
