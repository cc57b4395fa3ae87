"""Reliable, ordered frame channels: in-process loopback and TCP."""

from __future__ import annotations

import queue
import socket
import threading
import time

from .wire import HEADER_SIZE, Frame, FrameError, decode_frame, decode_header, encode_frame, payload_size


class ChannelClosed(ConnectionError):
    pass


class Channel:
    """One end of a bidirectional frame stream to a single peer."""

    kind = "abstract"

    def send(self, frame: Frame) -> None:
        raise NotImplementedError

    def recv(self) -> Frame:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


_EOF = object()


class LoopbackChannel(Channel):
    """Frames cross as encoded bytes so the codec is exercised exactly as on TCP."""

    kind = "loopback"

    def __init__(self, inbound: queue.Queue, outbound: queue.Queue):
        self._in = inbound
        self._out = outbound
        self._closed = False

    def send(self, frame: Frame) -> None:
        if self._closed:
            raise ChannelClosed("send on closed channel")
        self._out.put(encode_frame(frame))

    def recv(self) -> Frame:
        data = self._in.get()
        if data is _EOF:
            self._in.put(_EOF)
            raise ChannelClosed("peer closed")
        return decode_frame(data)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._out.put(_EOF)


def loopback_pair() -> tuple[LoopbackChannel, LoopbackChannel]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return LoopbackChannel(b_to_a, a_to_b), LoopbackChannel(a_to_b, b_to_a)


class TcpChannel(Channel):
    kind = "tcp"

    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._closed = False

    def _recv_exact(self, n: int, *, at_boundary: bool) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(min(remaining, 1 << 20))
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc
            if not chunk:
                if at_boundary and remaining == n:
                    raise ChannelClosed("peer closed")
                raise ChannelClosed(f"stream ended {remaining} bytes into a frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def send(self, frame: Frame) -> None:
        data = encode_frame(frame)
        with self._send_lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc

    def recv(self) -> Frame:
        header = self._recv_exact(HEADER_SIZE, at_boundary=True)
        ftype, _, _, count = decode_header(header)
        body = self._recv_exact(payload_size(ftype, count), at_boundary=False) if count else b""
        return decode_frame(header + body)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return host, int(port)


def listen(host: str = "127.0.0.1", port: int = 0, backlog: int = 16) -> socket.socket:
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, port))
    server.listen(backlog)
    return server


def accept(server: socket.socket, timeout: float | None = None) -> TcpChannel:
    server.settimeout(timeout)
    sock, _ = server.accept()
    sock.settimeout(None)
    return TcpChannel(sock)


def connect(host: str, port: int, timeout: float = 10.0) -> TcpChannel:
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            return TcpChannel(sock)
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.05)


__all__ = [
    "Channel", "ChannelClosed", "FrameError", "LoopbackChannel", "TcpChannel",
    "accept", "connect", "listen", "loopback_pair", "parse_endpoint",
]
