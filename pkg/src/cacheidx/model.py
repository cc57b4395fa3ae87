"""Analytical cache and network cost model for the five lookup methods.

All times are in seconds, sizes in bytes, bandwidths in bytes per second.
The model charges per search key:

* Method A (one key at a time): computation over ``T`` levels, sequential
  buffer traffic, and the steady-state L2 misses once the touched part of
  the tree has filled the cache.
* Method B (buffered batches): computation, L2 loads of each subtree
  amortized over the keys routed to it, L1 traffic for the rest of the
  path, and buffer reads/writes per subtree layer.
* Method C (master/slave): the larger of the master's dispatch cost and the
  slaves' in-cache search cost, each divided by the number of workers.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

KB = 1024
MB = 1024 * 1024

FITS_IN_CACHE = math.inf
"""Returned by :func:`solve_q0` when the whole tree fits in L2."""


class ModelError(ValueError):
    pass


class ModelAssumptionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MachineProfile:
    W1: float
    W2: float
    C2: int
    C1: int
    B2: int
    B1: int
    B2_miss_penalty: float
    B1_miss_penalty: float
    comp_cost_node: float
    num_masters: int = 1
    num_slaves: int = 10
    # None -> default_dispatch_cost(num_slaves)
    dispatch_cost: float | None = None
    # Bandwidth seen by the unbuffered lookup's buffer traffic; None -> W1.
    W1_random: float | None = None
    overlap_communication: bool = True
    key_bytes: int = 4

    def __post_init__(self):
        for name in ("W1", "W2", "C2", "C1", "B2", "B1", "B2_miss_penalty",
                     "B1_miss_penalty", "comp_cost_node", "num_masters", "num_slaves"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be strictly positive")
        if self.B2 > self.C2 or self.B1 > self.C1:
            raise ModelError("cache line larger than its cache")
        if self.dispatch_cost is not None and self.dispatch_cost < 0:
            raise ModelError("dispatch_cost must be non-negative")
        if self.W1_random is not None and not self.W1_random > 0:
            raise ModelError("W1_random must be strictly positive")

    @property
    def cache_lines(self) -> float:
        return self.C2 / self.B2

    @property
    def effective_dispatch_cost(self) -> float:
        if self.dispatch_cost is not None:
            return self.dispatch_cost
        return default_dispatch_cost(self.num_slaves, self.comp_cost_node,
                                     self.B2 // self.key_bytes)

    @property
    def effective_W1_random(self) -> float:
        return self.W1 if self.W1_random is None else self.W1_random

    def replace(self, **changes) -> "MachineProfile":
        return dataclasses.replace(self, **changes)


def default_dispatch_cost(num_slaves: int, comp_cost_node: float, keys_per_node: int = 8) -> float:
    """Binary search over ``num_slaves + 1`` delimiters.

    Each comparison is charged ``comp_cost_node / keys_per_node``, the
    per-key share of searching one cache-line node.
    """
    comparisons = math.ceil(math.log2(num_slaves + 1))
    return comparisons * comp_cost_node / keys_per_node


@dataclass(frozen=True)
class TreeShape:
    """Per-level cache-line counts of a tree.

    ``L`` is the depth of one subtree layer (the part a slave, or one
    buffered subtree, holds). Subtrees of a layer are rooted at the lines of
    the layer's top level, one line per subtree root.
    """

    T: int
    L: int
    lam: tuple[float, ...]
    key_bytes: int = 4
    tree_bytes: float = 0.0

    def __post_init__(self):
        lam = tuple(float(x) for x in self.lam)
        object.__setattr__(self, "lam", lam)
        if len(lam) != self.T:
            raise ModelError(f"lambda has {len(lam)} levels, T = {self.T}")
        if not 1 <= self.L <= self.T:
            raise ModelError("need 1 <= L <= T")
        if any(x <= 0 for x in lam):
            raise ModelError("lambda must be strictly positive")
        if any(b < a for a, b in zip(lam, lam[1:])):
            raise ModelError("lambda must be non-decreasing")

    @property
    def total_lines(self) -> float:
        return sum(self.lam)

    @property
    def layers(self) -> list[range]:
        """Level ranges of the subtree layers, root layer first."""
        count = math.ceil(self.T / self.L)
        top = self.T - (count - 1) * self.L
        out = [range(0, top)]
        for start in range(top, self.T, self.L):
            out.append(range(start, start + self.L))
        return out

    @classmethod
    def from_footprint(cls, tree_bytes: float, levels: int, fanout: int,
                       line_bytes: int, subtree_levels: int, key_bytes: int = 4) -> "TreeShape":
        """Geometric levels from a single root line; the leaf level takes
        whatever is left of ``tree_bytes``."""
        total = math.ceil(tree_bytes / line_bytes)
        upper = [fanout ** i for i in range(levels - 1)]
        leaf = total - sum(upper)
        if leaf < (upper[-1] if upper else 1):
            raise ModelError("tree_bytes too small for the requested levels and fanout")
        return cls(T=levels, L=subtree_levels, lam=tuple(upper + [leaf]),
                   key_bytes=key_bytes, tree_bytes=tree_bytes)


@dataclass(frozen=True)
class ScalingAssumptions:
    cpu_doubling_months: float = 18.0
    network_doubling_months: float = 36.0
    memory_bw_growth_per_year: float = 0.20
    # yearly fractional reduction of memory latency
    memory_latency_growth: float = 0.0
    # treat the L2->L1 transfer as on-chip latency that speeds up with the CPU
    l1_penalty_tracks_cpu: bool = False

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, bool) and v < 0:
                raise ModelError(f"{f.name} must be >= 0")


# --------------------------------------------------------------------------
# Distinct-line expectation and the steady-state regime


def xd(lambda_i: float, q: float) -> float:
    """Expected number of distinct lines touched by ``q`` uniform accesses
    over ``lambda_i`` lines: ``lambda_i * (1 - (1 - 1/lambda_i) ** q)``."""
    if lambda_i < 1:
        raise ModelError(f"lambda_i must be >= 1, got {lambda_i}")
    if q < 0:
        raise ModelError(f"q must be >= 0, got {q}")
    if q == 0:
        return 0.0
    if q == 1 or lambda_i == 1:
        return 1.0
    return -lambda_i * math.expm1(q * math.log1p(-1.0 / lambda_i))


def touched_lines(lam: Sequence[float], q: float) -> float:
    return math.fsum(xd(x, q) for x in lam)


def solve_q0(shape: TreeShape, C2: float, B2: float) -> float:
    """Number of lookups after which the touched tree footprint equals the
    cache size. Returns :data:`FITS_IN_CACHE` when the tree never fills it.

    Bisects until the bracket on ``q0`` is a few ulps wide: the footprint
    is flat near the root, so a small residual alone leaves ``q0`` loose.
    """
    target = C2 / B2
    if shape.total_lines <= target:
        return FITS_IN_CACHE
    lo, hi = 0.0, 1.0
    while touched_lines(shape.lam, hi) < target:
        lo, hi = hi, hi * 2.0
    # touched_lines is strictly increasing in q, so the root is unique
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        value = touched_lines(shape.lam, mid)
        if value == target:
            return mid
        if value < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def steady_misses_per_lookup(shape: TreeShape, C2: float, B2: float, q0: float | None = None) -> float:
    """L2 lines loaded by each lookup once the cache is in its full state."""
    if q0 is None:
        q0 = solve_q0(shape, C2, B2)
    if math.isinf(q0):
        return 0.0
    misses = touched_lines(shape.lam, q0 + 1.0) - C2 / B2
    return min(max(misses, 0.0), float(shape.T))


def buffered_misses_per_key(shape: TreeShape, q_per_subtree: float) -> float:
    """Average L2 lines loaded per key when each bottom-layer subtree is
    visited by ``q_per_subtree`` keys at once.

    Upper layers see the same batch spread over fewer subtrees.
    """
    if q_per_subtree <= 0:
        raise ModelError("q_per_subtree must be positive")
    layers = shape.layers
    batch_keys = q_per_subtree * shape.lam[layers[-1].start]
    total = 0.0
    for layer in layers:
        n_sub = shape.lam[layer.start]
        q = batch_keys / n_sub
        total += touched_lines([shape.lam[i] / n_sub for i in layer], q) / q
    return total


def subtree_batch_keys(shape: TreeShape, batch_bytes: int) -> float:
    """Keys reaching one bottom-layer subtree from a batch of ``batch_bytes``."""
    return batch_bytes / shape.key_bytes / shape.lam[shape.layers[-1].start]


# --------------------------------------------------------------------------
# Per-key cost of each method


def cost_method_a(profile: MachineProfile, shape: TreeShape) -> float:
    misses = steady_misses_per_lookup(shape, profile.C2, profile.B2)
    return (shape.T * profile.comp_cost_node
            + 8.0 / profile.effective_W1_random
            + misses * profile.B2_miss_penalty)


@dataclass(frozen=True)
class BufferedTerms:
    compute: float
    theta1: float
    theta2: float
    buffer_read: float
    buffer_write: float
    layers: int

    @property
    def total(self) -> float:
        return self.compute + self.theta1 + self.theta2 + self.buffer_read + self.buffer_write


def cost_method_b_terms(profile: MachineProfile, shape: TreeShape, q_per_subtree: float) -> BufferedTerms:
    m = buffered_misses_per_key(shape, q_per_subtree)
    s = len(shape.layers)
    return BufferedTerms(
        compute=shape.T * profile.comp_cost_node,
        theta1=m * profile.B2_miss_penalty,
        theta2=(shape.T - m) * profile.B1_miss_penalty,
        buffer_read=4.0 / profile.W1 * s,
        buffer_write=profile.B2_miss_penalty * 4.0 / profile.B2 * (s - 1),
        layers=s,
    )


def cost_method_b(profile: MachineProfile, shape: TreeShape, q_per_subtree: float) -> float:
    return cost_method_b_terms(profile, shape, q_per_subtree).total


@dataclass(frozen=True)
class DistributedTerms:
    master: float
    slave: float
    two_node_assumption: bool

    @property
    def total(self) -> float:
        return max(self.master, self.slave)


def cost_method_c_terms(profile: MachineProfile, shape: TreeShape) -> DistributedTerms:
    net = 0.0 if profile.overlap_communication else 4.0 / profile.W2
    buf = 8.0 / profile.W1
    master = (profile.effective_dispatch_cost + buf + net) / profile.num_masters
    slave = (shape.L * (profile.comp_cost_node + profile.B1_miss_penalty) + buf + net) / profile.num_slaves
    return DistributedTerms(master=master, slave=slave, two_node_assumption=shape.T < 2 * shape.L)


def cost_method_c(profile: MachineProfile, shape: TreeShape) -> float:
    terms = cost_method_c_terms(profile, shape)
    if not terms.two_node_assumption:
        warnings.warn(f"T={shape.T} >= 2L={2 * shape.L}: a search spans more than two nodes",
                      ModelAssumptionWarning, stacklevel=2)
    return terms.total


# --------------------------------------------------------------------------
# Totals and technology projection


@dataclass(frozen=True)
class ModelRow:
    year: int
    method: str
    per_key_ns: float
    total_s: float
    normalized_s: float
    ratio_b_over_c3: float


def evaluate(profile: MachineProfile, shape: TreeShape, *, total_keys: int = 1 << 23,
             batch_bytes: int = 128 * KB, normalize: float = 11, year: int = 0) -> list[ModelRow]:
    """Per-key and whole-workload times of methods A, B and C-3.

    A and B run replicated, so their totals are divided by ``normalize``.
    """
    q = subtree_batch_keys(shape, batch_bytes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ModelAssumptionWarning)
        per_key = {
            "A": cost_method_a(profile, shape),
            "B": cost_method_b(profile, shape, q),
            "C3": cost_method_c(profile, shape),
        }
    divisor = {"A": normalize, "B": normalize, "C3": 1.0}
    normalized = {m: per_key[m] * total_keys / divisor[m] for m in per_key}
    ratio = normalized["B"] / normalized["C3"]
    return [ModelRow(year, m, per_key[m] * 1e9, per_key[m] * total_keys, normalized[m], ratio)
            for m in per_key]


def scaled_profile(profile: MachineProfile, years: float, scaling: ScalingAssumptions) -> MachineProfile:
    cpu = 2.0 ** (-12.0 * years / scaling.cpu_doubling_months)
    net = 2.0 ** (12.0 * years / scaling.network_doubling_months)
    mem_bw = (1.0 + scaling.memory_bw_growth_per_year) ** years
    latency = (1.0 - scaling.memory_latency_growth) ** years
    l1 = cpu if scaling.l1_penalty_tracks_cpu else latency
    return profile.replace(
        comp_cost_node=profile.comp_cost_node * cpu,
        dispatch_cost=None if profile.dispatch_cost is None else profile.dispatch_cost * cpu,
        W2=profile.W2 * net,
        W1=profile.W1 * mem_bw,
        W1_random=None if profile.W1_random is None else profile.W1_random / latency,
        B2_miss_penalty=profile.B2_miss_penalty * latency,
        B1_miss_penalty=profile.B1_miss_penalty * l1,
    )


def project(profile: MachineProfile, shape: TreeShape, years: int | Sequence[int] = 5,
            scaling: ScalingAssumptions = ScalingAssumptions(), **kwargs) -> list[ModelRow]:
    """Evaluate the three methods for each year under the scaling assumptions."""
    if isinstance(years, int):
        years = range(years + 1)
    rows: list[ModelRow] = []
    for y in years:
        if y < 0:
            raise ModelError("years must be >= 0")
        rows.extend(evaluate(scaled_profile(profile, y, scaling), shape, year=y, **kwargs))
    return rows


# --------------------------------------------------------------------------
# Reference machine and tree used in the cluster measurements


def pentium3_profile(**overrides) -> MachineProfile:
    values = dict(
        W1=647e6, W2=138e6, C2=512 * KB, C1=16 * KB, B2=32, B1=32,
        B2_miss_penalty=110e-9, B1_miss_penalty=16.25e-9, comp_cost_node=30e-9,
        num_masters=1, num_slaves=10, W1_random=48e6, overlap_communication=True,
    )
    values.update(overrides)
    return MachineProfile(**values)


def reference_shape() -> TreeShape:
    """7 levels of 32-byte nodes, fanout 8, 3.2 MiB in total, 6-level subtrees."""
    return TreeShape.from_footprint(tree_bytes=3.2 * MB, levels=7, fanout=8,
                                    line_bytes=32, subtree_levels=6)


PROFILE_FIELDS = {f.name: f for f in dataclasses.fields(MachineProfile)}
