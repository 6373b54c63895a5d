"""Message channels: an in-process queue pair and a TCP byte stream.

Both variants move encoded frames, never Python objects, so every message
crossing a collaborator boundary goes through the same codec whichever
transport is used.
"""

from __future__ import annotations

import queue
import socket
import threading
import time

from ..errors import (
    BadMagicError,
    ChannelClosed,
    ChannelError,
    ChannelTimeout,
    LengthMismatchError,
    ProtocolError,
    TruncatedFrameError,
)
from .codec import HEADER, HEADER_SIZE, MAGIC, MAX_PAYLOAD, MessageEnvelope, decode, encode

DEFAULT_TIMEOUT = 60.0

_CLOSED = object()


class Endpoint:
    """One side of a bidirectional FIFO message channel.

    Safe for one sending thread plus one receiving thread.
    """

    def send(self, msg: MessageEnvelope) -> None:
        self.send_bytes(encode(msg))

    def recv(self, timeout: float | None = DEFAULT_TIMEOUT) -> MessageEnvelope:
        return decode(self.recv_bytes(timeout))

    def send_bytes(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv_bytes(self, timeout: float | None = DEFAULT_TIMEOUT) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InprocEndpoint(Endpoint):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send_bytes(self, frame: bytes) -> None:
        if self._closed:
            raise ChannelClosed("endpoint is closed")
        self._outbox.put(bytes(frame))

    def recv_bytes(self, timeout=DEFAULT_TIMEOUT) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ChannelTimeout(f"no message within {timeout} s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)  # keep reporting closure to later calls
            raise ChannelClosed("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def open_inproc_pair() -> tuple[InprocEndpoint, InprocEndpoint]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return InprocEndpoint(b_to_a, a_to_b), InprocEndpoint(a_to_b, b_to_a)


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = str(address).rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) < 65536:
        raise ChannelError(f"address must look like host:port, got {address!r}")
    return host, int(port)


class SocketEndpoint(Endpoint):
    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._buf = bytearray()
        self._closed = False

    def send_bytes(self, frame: bytes) -> None:
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise ChannelClosed(f"send failed: {exc}") from exc

    def _fill(self, n: int, timeout) -> None:
        self._sock.settimeout(timeout)
        while len(self._buf) < n:
            try:
                chunk = self._sock.recv(max(65536, n - len(self._buf)))
            except socket.timeout:
                raise ChannelTimeout(f"no complete message within {timeout} s") from None
            except OSError as exc:
                raise ChannelClosed(f"receive failed: {exc}") from exc
            if not chunk:
                if self._buf:
                    raise TruncatedFrameError("peer closed mid-frame")
                raise ChannelClosed("peer closed the connection")
            self._buf.extend(chunk)

    def recv_bytes(self, timeout=DEFAULT_TIMEOUT) -> bytes:
        # Only magic and length are checked here so that a frame with an
        # unsupported version is still consumed whole and rejected by decode.
        self._fill(HEADER_SIZE, timeout)
        head = bytes(self._buf[:HEADER_SIZE])
        if head[:4] != MAGIC:
            raise BadMagicError(f"bad magic {head[:4]!r}; stream is out of sync")
        total = HEADER_SIZE + int.from_bytes(head[12:16], "little")
        if total - HEADER_SIZE > MAX_PAYLOAD:
            raise LengthMismatchError("payload length exceeds limit")
        self._fill(total, timeout)
        frame = bytes(self._buf[:total])
        del self._buf[:total]
        return frame

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class Listener:
    """Bound TCP socket accepting framed connections."""

    def __init__(self, address: str):
        host, port = parse_address(address)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as exc:
            self._sock.close()
            raise ChannelError(f"cannot bind {address}: {exc}") from exc
        self._sock.listen()

    @property
    def address(self) -> str:
        host, port = self._sock.getsockname()[:2]
        return f"{host}:{port}"

    def accept(self, timeout: float | None = DEFAULT_TIMEOUT) -> SocketEndpoint:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except socket.timeout:
            raise ChannelTimeout(f"no connection within {timeout} s") from None
        conn.settimeout(None)
        return SocketEndpoint(conn)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def listen(address: str) -> Listener:
    return Listener(address)


def dial(address: str, timeout: float = DEFAULT_TIMEOUT, retry_interval: float = 0.05) -> SocketEndpoint:
    """Connect to a listener, retrying refused connections until ``timeout``."""
    host, port = parse_address(address)
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            return SocketEndpoint(sock)
        except ConnectionRefusedError as exc:
            if time.monotonic() >= deadline:
                raise ChannelError(f"connection to {address} refused") from exc
            time.sleep(retry_interval)
        except OSError as exc:
            raise ChannelError(f"cannot connect to {address}: {exc}") from exc


class PrefetchedEndpoint(Endpoint):
    """Endpoint whose first inbound frame was already read (to learn the sender)."""

    def __init__(self, inner: Endpoint, first_frame: bytes):
        self._inner = inner
        self._pending = first_frame

    def send_bytes(self, frame: bytes) -> None:
        self._inner.send_bytes(frame)

    def recv_bytes(self, timeout=DEFAULT_TIMEOUT) -> bytes:
        if self._pending is not None:
            frame, self._pending = self._pending, None
            return frame
        return self._inner.recv_bytes(timeout)

    def close(self) -> None:
        self._inner.close()


def accept_by_sender(listener: Listener, expected_ids, timeout: float = DEFAULT_TIMEOUT) -> dict:
    """Accept one connection per expected id, keyed by the sender of its first frame.

    Peers may connect in any order; the first frame (normally a JoinRequest)
    is kept and handed back by the first ``recv`` on the returned endpoint.
    """
    expected = set(expected_ids)
    out = {}
    deadline = time.monotonic() + timeout
    while len(out) < len(expected):
        ep = listener.accept(max(0.0, deadline - time.monotonic()))
        try:
            frame = ep.recv_bytes(max(0.0, deadline - time.monotonic()))
            # header layout is fixed across versions; read the sender even from a frame
            # whose version we will reject, so the rejection reaches the right peer
            sender = HEADER.unpack_from(frame)[3]
        except Exception:
            ep.close()
            raise
        if sender not in expected or sender in out:
            ep.close()
            raise ProtocolError(f"unexpected or duplicate peer id {sender}; expected {sorted(expected)}")
        out[sender] = PrefetchedEndpoint(ep, frame)
    return dict(sorted(out.items()))
