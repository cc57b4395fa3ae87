"""Frame codec shared by every transport.

Layout (little-endian)::

    offset  size  field
    0       2     magic "CS"
    2       1     type: 0 QUERY_BATCH, 1 RESULT_BATCH, 2 SHUTDOWN, 3 READY
    3       1     reserved, must be 0
    4       2     node_id
    6       4     batch_id
    10      4     count
    14      ...   count u32 keys (QUERY_BATCH) or count u64 ranks (RESULT_BATCH)

SHUTDOWN and READY carry no payload and must have ``count == 0``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CS"
HEADER = struct.Struct("<2sBBHII")
HEADER_SIZE = HEADER.size
MAX_COUNT = 1 << 28


class FrameType(enum.IntEnum):
    QUERY_BATCH = 0
    RESULT_BATCH = 1
    SHUTDOWN = 2
    READY = 3


_ITEM = {FrameType.QUERY_BATCH: np.dtype("<u4"), FrameType.RESULT_BATCH: np.dtype("<u8")}


class FrameError(ValueError):
    def __init__(self, field_name: str, detail: str):
        super().__init__(f"bad frame {field_name}: {detail}")
        self.field = field_name


@dataclass(frozen=True, eq=False)
class Frame:
    type: FrameType
    node_id: int = 0
    batch_id: int = 0
    payload: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.uint32))

    def __post_init__(self):
        object.__setattr__(self, "type", FrameType(self.type))
        dtype = _ITEM.get(self.type)
        payload = np.asarray(self.payload)
        if dtype is None:
            if payload.size:
                raise FrameError("count", f"{self.type.name} has no payload")
            payload = np.empty(0, dtype=np.uint32)
        else:
            payload = payload.astype(dtype.newbyteorder("="), copy=False)
        object.__setattr__(self, "payload", payload)
        if not 0 <= self.node_id < 1 << 16:
            raise FrameError("node_id", f"{self.node_id} does not fit u16")
        if not 0 <= self.batch_id < 1 << 32:
            raise FrameError("batch_id", f"{self.batch_id} does not fit u32")

    @property
    def count(self) -> int:
        return len(self.payload)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.type == other.type and self.node_id == other.node_id
                and self.batch_id == other.batch_id
                and np.array_equal(self.payload, other.payload))

    def __repr__(self):
        return (f"Frame({self.type.name}, node={self.node_id}, batch={self.batch_id}, "
                f"count={self.count})")


def query_frame(node_id: int, batch_id: int, keys: np.ndarray) -> Frame:
    return Frame(FrameType.QUERY_BATCH, node_id, batch_id, keys)


def result_frame(node_id: int, batch_id: int, ranks: np.ndarray) -> Frame:
    return Frame(FrameType.RESULT_BATCH, node_id, batch_id, ranks)


def encode_frame(frame: Frame) -> bytes:
    header = HEADER.pack(MAGIC, int(frame.type), 0, frame.node_id, frame.batch_id, frame.count)
    dtype = _ITEM.get(frame.type)
    if dtype is None:
        return header
    return header + frame.payload.astype(dtype, copy=False).tobytes()


def payload_size(frame_type: int, count: int) -> int:
    dtype = _ITEM.get(FrameType(frame_type))
    return 0 if dtype is None else count * dtype.itemsize


def decode_header(data: bytes) -> tuple[FrameType, int, int, int]:
    """Validate a header; return (type, node_id, batch_id, count)."""
    if len(data) < HEADER_SIZE:
        raise FrameError("length", f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, ftype, reserved, node_id, batch_id, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FrameError("magic", f"{magic!r}")
    try:
        ftype = FrameType(ftype)
    except ValueError:
        raise FrameError("type", f"unknown frame type {ftype}") from None
    if reserved != 0:
        raise FrameError("reserved", f"expected 0, got {reserved}")
    if ftype not in _ITEM and count != 0:
        raise FrameError("count", f"{ftype.name} must have count 0, got {count}")
    if count > MAX_COUNT:
        raise FrameError("count", f"{count} exceeds {MAX_COUNT}")
    return ftype, node_id, batch_id, count


def decode_frame(data: bytes) -> Frame:
    ftype, node_id, batch_id, count = decode_header(data)
    expected = HEADER_SIZE + payload_size(ftype, count)
    if len(data) != expected:
        raise FrameError("length", f"count {count} needs {expected} bytes, got {len(data)}")
    dtype = _ITEM.get(ftype)
    if dtype is None:
        return Frame(ftype, node_id, batch_id)
    payload = np.frombuffer(data, dtype=dtype, offset=HEADER_SIZE, count=count)
    return Frame(ftype, node_id, batch_id, payload)
