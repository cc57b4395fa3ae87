"""Distributed roles, wire format and transports."""

from .local import ClusterRun, PartitionedEngines, build_partitioned, run_partitioned, run_replicated_local
from .runtime import (
    BatchingPolicy,
    ClusterError,
    DispatchRecord,
    MasterStats,
    SlaveStats,
    dispatch,
    run_master,
    run_replicated,
    run_slave,
)
from .transport import ChannelClosed, loopback_pair
from .wire import Frame, FrameError, FrameType, decode_frame, encode_frame

__all__ = [
    "BatchingPolicy", "ChannelClosed", "ClusterError", "ClusterRun", "DispatchRecord", "Frame",
    "FrameError", "FrameType", "MasterStats", "PartitionedEngines", "SlaveStats", "build_partitioned",
    "decode_frame", "dispatch", "encode_frame", "loopback_pair", "run_master", "run_partitioned",
    "run_replicated", "run_replicated_local", "run_slave",
]
