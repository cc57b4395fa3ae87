"""Master, slave and replicated-balancer roles.

The master keeps one outgoing buffer per slave. A buffer is sent once it
holds ``batch_keys`` keys, when its oldest key is older than the flush
timeout, or at end of stream. Each sent frame remembers which input chunk
and which positions its keys came from, so replies can be scattered back
without any ordering assumption between slaves. Up to ``window`` frames
per slave are in flight at once; replies are drained while new batches
are still being built.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..engines import EngineError, LookupEngine, QueryBatch, lookup_batch
from ..index import KEY_DTYPE, RANK_DTYPE, DelimiterTable
from .transport import Channel, ChannelClosed
from .wire import Frame, FrameError, FrameType, query_frame, result_frame

log = logging.getLogger(__name__)

MASTER_NODE_ID = 0
DEFAULT_WINDOW = 4
MIN_WINDOW = 2

Sink = Callable[[int, np.ndarray], None]


class ClusterError(RuntimeError):
    pass


@dataclass(frozen=True)
class BatchingPolicy:
    batch_bytes: int = 128 * 1024
    flush_timeout: float = 0.010
    key_bytes: int = 4

    def __post_init__(self):
        if self.batch_bytes < self.key_bytes:
            raise ValueError(f"batch_bytes must hold at least one key, got {self.batch_bytes}")
        if not self.flush_timeout > 0:
            raise ValueError(f"flush_timeout must be positive, got {self.flush_timeout}")

    @property
    def batch_keys(self) -> int:
        return self.batch_bytes // self.key_bytes


@dataclass(frozen=True, eq=False)
class DispatchRecord:
    batch_id: int
    sub_batches: list[np.ndarray]
    positions: list[np.ndarray]

    @property
    def permutation(self) -> np.ndarray:
        """Original batch position of every key, in dispatched order."""
        if not self.positions:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(self.positions)


def dispatch(table: DelimiterTable, batch: QueryBatch) -> DispatchRecord:
    """Split ``batch`` by owning partition, keeping input order within each slave."""
    owner = table.route(batch.keys)
    if table.parts <= 1 << 16:
        # small integer ids let the stable sort run as a radix sort
        owner = owner.astype(np.uint16)
    order = np.argsort(owner, kind="stable")
    cuts = np.searchsorted(owner[order], np.arange(1, table.parts))
    positions = np.split(order, cuts)
    subs = [batch.keys[p] for p in positions]
    return DispatchRecord(batch.batch_id, subs, positions)


class OrderedSink:
    """Reorders (seq, ranks) deliveries from several masters into one stream."""

    def __init__(self, downstream: Sink):
        self._downstream = downstream
        self._next = 0
        self._held: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def __call__(self, seq: int, ranks: np.ndarray) -> None:
        with self._lock:
            self._held[seq] = ranks
            while self._next in self._held:
                self._downstream(self._next, self._held.pop(self._next))
                self._next += 1

    @property
    def pending(self) -> int:
        return len(self._held)


class CollectSink:
    def __init__(self):
        self.chunks: list[np.ndarray] = []
        self.expected_seq = 0

    def __call__(self, seq: int, ranks: np.ndarray) -> None:
        if seq != self.expected_seq:
            raise ClusterError(f"result chunk {seq} delivered out of order (expected {self.expected_seq})")
        self.expected_seq += 1
        self.chunks.append(ranks)

    def result(self) -> np.ndarray:
        if not self.chunks:
            return np.empty(0, dtype=RANK_DTYPE)
        return np.concatenate(self.chunks)


@dataclass
class MasterStats:
    node_id: int
    peers: int
    keys_in: int = 0
    keys_answered: int = 0
    input_chunks: int = 0
    batches_sent: int = 0
    batches_received: int = 0
    per_peer_batches: list[int] = field(default_factory=list)
    per_peer_keys: list[int] = field(default_factory=list)
    flushes_full: int = 0
    flushes_timeout: int = 0
    flushes_close: int = 0
    max_in_flight: int = 0
    elapsed_s: float = 0.0

    def __post_init__(self):
        if not self.per_peer_batches:
            self.per_peer_batches = [0] * self.peers
        if not self.per_peer_keys:
            self.per_peer_keys = [0] * self.peers


class _OutBuffer:
    """Pending keys for one slave, as pieces of input chunks."""

    __slots__ = ("pieces", "count", "since")

    def __init__(self):
        self.pieces: list[tuple[int, np.ndarray, np.ndarray]] = []
        self.count = 0
        self.since = 0.0

    def add(self, seq: int, keys: np.ndarray, pos: np.ndarray, now: float) -> None:
        if not self.count:
            self.since = now
        self.pieces.append((seq, keys, pos))
        self.count += len(keys)

    def take(self, n: int) -> tuple[np.ndarray, list[tuple[int, np.ndarray]]]:
        keys, segments = [], []
        while n:
            seq, k, p = self.pieces[0]
            if len(k) <= n:
                self.pieces.pop(0)
            else:
                self.pieces[0] = (seq, k[n:], p[n:])
                k, p = k[:n], p[:n]
            keys.append(k)
            segments.append((seq, p))
            n -= len(k)
            self.count -= len(k)
        return np.concatenate(keys), segments


class _Coordinator:
    """Send/receive bookkeeping shared by the master and the balancer."""

    def __init__(self, channels: Sequence[Channel], sink: Sink | None, *, node_id: int,
                 window: int, reply_timeout: float, names: Sequence[str] | None):
        if not channels:
            raise ClusterError("no peers to send to")
        if window < MIN_WINDOW:
            raise ValueError(f"window must be at least {MIN_WINDOW}, got {window}")
        self.channels = list(channels)
        self.names = list(names) if names else [f"slave {i}" for i in range(len(channels))]
        self.sink = sink
        self.node_id = node_id
        self.window = window
        self.reply_timeout = reply_timeout
        self.stats = MasterStats(node_id=node_id, peers=len(channels))
        self.inbox: queue.Queue = queue.Queue()
        self.in_flight = [0] * len(channels)
        self.registry: dict[int, tuple[int, int, list[tuple[int, np.ndarray]]]] = {}
        self.registry_lock = threading.Lock()
        self.inputs: dict[int, list] = {}
        self.finished: dict[int, np.ndarray] = {}
        self.next_deliver = 0
        self.next_batch_id = 0
        self.shutting_down = False
        self.readers = [threading.Thread(target=self._read, args=(i, ch), daemon=True,
                                         name=f"master{node_id}-recv{i}")
                        for i, ch in enumerate(self.channels)]
        for t in self.readers:
            t.start()

    def _read(self, peer: int, channel: Channel) -> None:
        try:
            while True:
                self.inbox.put((peer, channel.recv()))
        except Exception as exc:  # handed to the coordinating thread
            self.inbox.put((peer, exc))

    def _fail(self, peer: int, what: str) -> ClusterError:
        return ClusterError(f"{self.names[peer]}: {what}")

    def wait_ready(self, timeout: float) -> None:
        waiting = set(range(len(self.channels)))
        deadline = time.monotonic() + timeout
        while waiting:
            try:
                peer, item = self.inbox.get(timeout=max(0.0, deadline - time.monotonic()))
            except queue.Empty:
                names = ", ".join(self.names[i] for i in sorted(waiting))
                raise ClusterError(f"no READY from {names} within {timeout:g} s") from None
            if isinstance(item, Exception):
                raise self._fail(peer, f"lost before READY ({item})")
            if item.type is not FrameType.READY:
                raise self._fail(peer, f"expected READY, got {item.type.name}")
            waiting.discard(peer)

    def register_input(self, seq: int, keys: np.ndarray) -> None:
        n = len(keys)
        self.stats.keys_in += n
        self.stats.input_chunks += 1
        self.inputs[seq] = [np.empty(n, dtype=RANK_DTYPE), n]
        if n == 0:
            self._complete(seq)

    def send(self, peer: int, keys: np.ndarray, segments: list[tuple[int, np.ndarray]]) -> None:
        while self.in_flight[peer] >= self.window:
            self.pump(block=True)
        bid = self.next_batch_id
        self.next_batch_id = (bid + 1) & 0xFFFFFFFF
        with self.registry_lock:
            if bid in self.registry:
                raise ClusterError(f"batch id {bid} wrapped while still in flight")
            self.registry[bid] = (peer, len(keys), segments)
        try:
            self.channels[peer].send(query_frame(self.node_id, bid, keys))
        except ChannelClosed as exc:
            raise self._fail(peer, f"disconnected ({exc})") from exc
        self.in_flight[peer] += 1
        st = self.stats
        st.batches_sent += 1
        st.per_peer_batches[peer] += 1
        st.per_peer_keys[peer] += len(keys)
        st.max_in_flight = max(st.max_in_flight, self.in_flight[peer])

    def pump(self, block: bool) -> bool:
        try:
            peer, item = self.inbox.get(block=block, timeout=self.reply_timeout if block else None)
        except queue.Empty:
            if block:
                raise ClusterError(f"no reply within {self.reply_timeout:g} s "
                                   f"({len(self.registry)} batches outstanding)") from None
            return False
        self._handle(peer, item)
        return True

    def drain(self) -> None:
        while self.pump(block=False):
            pass

    def _handle(self, peer: int, item) -> None:
        if isinstance(item, Exception):
            if self.shutting_down and isinstance(item, ChannelClosed):
                return
            if isinstance(item, FrameError):
                raise self._fail(peer, f"undecodable frame ({item})")
            raise self._fail(peer, f"disconnected ({item})")
        if item.type is not FrameType.RESULT_BATCH:
            raise self._fail(peer, f"unexpected {item.type.name} frame")
        with self.registry_lock:
            entry = self.registry.pop(item.batch_id, None)
        if entry is None or entry[0] != peer:
            raise self._fail(peer, f"reply for unknown batch id {item.batch_id}")
        _, count, segments = entry
        ranks = item.payload
        if len(ranks) != count:
            raise self._fail(peer, f"batch {item.batch_id} sent {count} keys, got {len(ranks)} ranks")
        self.in_flight[peer] -= 1
        self.stats.batches_received += 1
        offset = 0
        for seq, pos in segments:
            slot = self.inputs[seq]
            n = len(pos)
            slot[0][pos] = ranks[offset: offset + n]
            slot[1] -= n
            offset += n
            if slot[1] == 0:
                self._complete(seq)

    def _complete(self, seq: int) -> None:
        self.finished[seq] = self.inputs.pop(seq)[0]
        while self.next_deliver in self.finished:
            ranks = self.finished.pop(self.next_deliver)
            self.stats.keys_answered += len(ranks)
            if self.sink is not None:
                self.sink(self.next_deliver, ranks)
            self.next_deliver += 1

    def finish(self) -> None:
        while self.inputs or self.registry:
            self.pump(block=True)
        self.shutting_down = True
        for peer, ch in enumerate(self.channels):
            try:
                ch.send(Frame(FrameType.SHUTDOWN, self.node_id, 0))
            except ChannelClosed as exc:
                raise self._fail(peer, f"disconnected before SHUTDOWN ({exc})") from exc
        for ch in self.channels:
            ch.close()
        if self.stats.keys_in != self.stats.keys_answered:
            raise ClusterError(f"lost keys: {self.stats.keys_in} in, {self.stats.keys_answered} answered")


def _chunks(source: Iterable[np.ndarray]):
    for seq, keys in enumerate(source):
        yield seq, np.ascontiguousarray(keys, dtype=KEY_DTYPE)


def run_master(channels: Sequence[Channel], table: DelimiterTable, source: Iterable[np.ndarray],
               sink: Sink | None = None, *, policy: BatchingPolicy = BatchingPolicy(),
               node_id: int = MASTER_NODE_ID, window: int = DEFAULT_WINDOW,
               ready_timeout: float = 30.0, reply_timeout: float = 60.0,
               names: Sequence[str] | None = None) -> MasterStats:
    """Route every key of ``source`` to its partition's slave and deliver ranks in order.

    ``channels[i]`` must reach the slave serving partition ``i``. ``sink`` is
    called as ``sink(chunk_number, ranks)`` once per source chunk, in order.
    """
    if len(channels) != table.parts:
        raise ClusterError(f"{table.parts} partitions but {len(channels)} slave channels")
    co = _Coordinator(channels, sink, node_id=node_id, window=window,
                      reply_timeout=reply_timeout, names=names)
    co.wait_ready(ready_timeout)
    t0 = time.perf_counter()
    bk = policy.batch_keys
    buffers = [_OutBuffer() for _ in channels]
    st = co.stats

    def flush(peer: int, n: int) -> None:
        keys, segments = buffers[peer].take(n)
        co.send(peer, keys, segments)

    for seq, keys in _chunks(source):
        co.register_input(seq, keys)
        if len(keys):
            rec = dispatch(table, QueryBatch(seq, keys))
            now = time.monotonic()
            for peer, (sub, pos) in enumerate(zip(rec.sub_batches, rec.positions)):
                if not len(sub):
                    continue
                buf = buffers[peer]
                buf.add(seq, sub, pos, now)
                while buf.count >= bk:
                    flush(peer, bk)
                    st.flushes_full += 1
        now = time.monotonic()
        for peer, buf in enumerate(buffers):
            if buf.count and now - buf.since >= policy.flush_timeout:
                flush(peer, buf.count)
                st.flushes_timeout += 1
        co.drain()
    for peer, buf in enumerate(buffers):
        if buf.count:
            flush(peer, buf.count)
            st.flushes_close += 1
    co.finish()
    st.elapsed_s = time.perf_counter() - t0
    return st


def run_replicated(channels: Sequence[Channel], source: Iterable[np.ndarray], sink: Sink | None = None, *,
                   policy: BatchingPolicy = BatchingPolicy(), node_id: int = MASTER_NODE_ID,
                   window: int = DEFAULT_WINDOW, ready_timeout: float = 30.0,
                   reply_timeout: float = 60.0, names: Sequence[str] | None = None) -> MasterStats:
    """Round-robin balancer: whole batches of ``batch_keys`` go to successive workers."""
    names = names or [f"worker {i}" for i in range(len(channels))]
    co = _Coordinator(channels, sink, node_id=node_id, window=window,
                      reply_timeout=reply_timeout, names=names)
    co.wait_ready(ready_timeout)
    t0 = time.perf_counter()
    bk = policy.batch_keys
    turn = 0
    for seq, keys in _chunks(source):
        co.register_input(seq, keys)
        for start in range(0, len(keys), bk):
            stop = min(start + bk, len(keys))
            co.send(turn, keys[start:stop], [(seq, np.arange(start, stop))])
            co.stats.flushes_full += 1
            turn = (turn + 1) % len(channels)
        co.drain()
    co.finish()
    co.stats.elapsed_s = time.perf_counter() - t0
    return co.stats


@dataclass
class SlaveStats:
    node_id: int
    batches: int = 0
    keys: int = 0
    busy_s: float = 0.0
    idle_s: float = 0.0
    routing_anomalies: int = 0
    masters: int = 0

    @property
    def idle_fraction(self) -> float:
        total = self.busy_s + self.idle_s
        return self.idle_s / total if total > 0 else 0.0


def run_slave(channels: Sequence[Channel] | Channel, engine: LookupEngine, *, node_id: int = 1,
              key_range: tuple[int, int] | None = None) -> SlaveStats:
    """Answer QUERY_BATCH frames until every connected master has sent SHUTDOWN.

    ``key_range`` is the half-open key interval this slave owns; keys outside
    it are still answered but counted as routing anomalies.
    """
    if isinstance(channels, Channel):
        channels = [channels]
    channels = list(channels)
    stats = SlaveStats(node_id=node_id, masters=len(channels))
    inbox: queue.Queue = queue.Queue()

    def read(i: int, ch: Channel) -> None:
        try:
            while True:
                frame = ch.recv()
                inbox.put((i, frame))
                if frame.type is FrameType.SHUTDOWN:
                    return
        except Exception as exc:
            inbox.put((i, exc))

    for i, ch in enumerate(channels):
        ch.send(Frame(FrameType.READY, node_id, 0))
    readers = [threading.Thread(target=read, args=(i, ch), daemon=True, name=f"slave{node_id}-recv{i}")
               for i, ch in enumerate(channels)]
    for t in readers:
        t.start()

    open_masters = set(range(len(channels)))
    try:
        while open_masters:
            t_wait = time.perf_counter()
            i, item = inbox.get()
            t_got = time.perf_counter()
            stats.idle_s += t_got - t_wait
            if isinstance(item, Exception):
                raise ClusterError(f"slave {node_id}: master link {i} failed ({item})")
            if item.type is FrameType.SHUTDOWN:
                open_masters.discard(i)
                continue
            if item.type is not FrameType.QUERY_BATCH:
                raise ClusterError(f"slave {node_id}: unexpected {item.type.name} frame")
            keys = item.payload
            if len(keys):
                ranks = lookup_batch(engine, QueryBatch(item.batch_id, keys)).ranks
            else:
                ranks = np.empty(0, dtype=RANK_DTYPE)
            if key_range is not None and len(keys):
                lo, hi = key_range
                stats.routing_anomalies += int(np.count_nonzero((keys < lo) | (keys.astype(np.uint64) >= hi)))
            channels[i].send(result_frame(node_id, item.batch_id, ranks))
            stats.batches += 1
            stats.keys += len(keys)
            stats.busy_s += time.perf_counter() - t_got
    except EngineError as exc:
        raise ClusterError(f"slave {node_id}: {exc}") from exc
    finally:
        for ch in channels:
            ch.close()
    return stats
