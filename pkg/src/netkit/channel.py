"""Byte channels the session layer runs over.

A channel is a bidirectional byte stream with ``send``, ``recv`` (``b""`` on
EOF, ``TimeoutError`` on timeout) and ``close``. ``initiator`` records which
end opened the underlying connection, so call-home role reversal can be
checked after the fact.
"""

from __future__ import annotations

import collections
import dataclasses
import logging
import queue
import select
import socket
import threading

from .clock import SystemClock

log = logging.getLogger(__name__)


class ChannelClosed(ConnectionError):
    pass


class SocketChannel:
    def __init__(self, sock: socket.socket, initiator: bool, peer=None):
        self.sock = sock
        self.initiator = initiator
        self.peer = peer
        self.clock = SystemClock()
        self._closed = False

    def send(self, data: bytes) -> None:
        if self._closed:
            raise ChannelClosed("channel closed")
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def recv(self, bufsize: int = 65536, timeout: float | None = None) -> bytes:
        if self._closed:
            return b""
        try:
            # select keeps the socket blocking for concurrent senders
            ready, _, _ = select.select([self.sock], [], [], timeout)
            if not ready:
                raise TimeoutError("recv timed out")
            return self.sock.recv(bufsize)
        except (OSError, ValueError) as exc:
            if isinstance(exc, TimeoutError):
                raise
            return b""

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    @property
    def closed(self) -> bool:
        return self._closed


@dataclasses.dataclass
class Faults:
    """Fault injection for one direction of a loopback pair.

    reorder: swap each pair of consecutive writes (message granularity,
        since the session layer writes one framed message per send).
    truncate_after: deliver only this many bytes in total, then EOF.
    delay: seconds (on the pair's clock) before written bytes become readable.
    """

    reorder: bool = False
    truncate_after: int | None = None
    delay: float = 0.0


class _Pipe:
    def __init__(self, clock, faults: Faults):
        self.clock = clock
        self.faults = faults
        self.cond = threading.Condition()
        self.items: collections.deque = collections.deque()  # (ready_at, bytes)
        self.held: bytes | None = None
        self.delivered = 0
        self.eof = False
        self.recorder: list[bytes] | None = None

    def write(self, data: bytes) -> None:
        with self.cond:
            if self.eof:
                raise ChannelClosed("peer closed")
            if self.recorder is not None:
                self.recorder.append(bytes(data))
            if self.faults.reorder:
                if self.held is None:
                    self.held = bytes(data)
                    return
                self._push(data)
                self._push(self.held)
                self.held = None
            else:
                self._push(data)

    def _push(self, data: bytes) -> None:
        limit = self.faults.truncate_after
        if limit is not None:
            room = max(0, limit - self.delivered)
            if len(data) >= room:
                data = data[:room]
                self.eof = True
        self.delivered += len(data)
        if data:
            self.items.append((self.clock.monotonic() + self.faults.delay, bytes(data)))
        self.cond.notify_all()

    def close(self) -> None:
        with self.cond:
            if self.held is not None:
                held, self.held = self.held, None
                self._push(held)
            self.eof = True
            self.cond.notify_all()

    def read(self, bufsize: int, timeout: float | None) -> bytes:
        deadline = None if timeout is None else self.clock.monotonic() + timeout
        with self.cond:
            while True:
                now = self.clock.monotonic()
                if self.items and self.items[0][0] <= now:
                    ready_at, data = self.items.popleft()
                    if len(data) > bufsize:
                        self.items.appendleft((ready_at, data[bufsize:]))
                        data = data[:bufsize]
                    return data
                if self.eof and not self.items:
                    return b""
                if deadline is not None and now >= deadline:
                    raise TimeoutError("recv timed out")
                wake = deadline
                if self.items:
                    wake = self.items[0][0] if wake is None else min(wake, self.items[0][0])
                self.clock.wait(self.cond, wake)


class LoopbackChannel:
    def __init__(self, inbound: _Pipe, outbound: _Pipe, initiator: bool, peer=None):
        self._in = inbound
        self._out = outbound
        self.initiator = initiator
        self.peer = peer
        self.clock = inbound.clock
        self._closed = False

    @property
    def faults(self) -> Faults:
        """Faults applied to bytes this end sends."""
        return self._out.faults

    def record(self) -> list[bytes]:
        """Start capturing every block this end sends; returns the live list."""
        self._out.recorder = []
        return self._out.recorder

    def send(self, data: bytes) -> None:
        if self._closed:
            raise ChannelClosed("channel closed")
        self._out.write(data)

    def recv(self, bufsize: int = 65536, timeout: float | None = None) -> bytes:
        if self._closed:
            return b""
        return self._in.read(bufsize, timeout)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._out.close()
        self._in.close()

    @property
    def closed(self) -> bool:
        return self._closed


def loopback_pair(clock=None, faults_ab: Faults | None = None, faults_ba: Faults | None = None):
    """Two connected in-memory channels; ``a`` counts as the initiator."""
    clock = clock or SystemClock()
    ab = _Pipe(clock, faults_ab or Faults())
    ba = _Pipe(clock, faults_ba or Faults())
    a = LoopbackChannel(ba, ab, initiator=True)
    b = LoopbackChannel(ab, ba, initiator=False)
    return a, b


class TcpNetwork:
    """Real sockets."""

    def connect(self, host: str, port: int, timeout: float | None = 10.0) -> SocketChannel:
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketChannel(sock, initiator=True, peer=(host, port))

    def listen(self, host: str, port: int) -> "TcpListener":
        return TcpListener(host, port)


class TcpListener:
    def __init__(self, host: str, port: int):
        self.sock = socket.create_server((host, port), reuse_port=False)
        self.sock.settimeout(0.2)
        self.address = self.sock.getsockname()[:2]
        self._closed = threading.Event()

    def accept(self) -> SocketChannel | None:
        """Next inbound connection, or None once closed."""
        while not self._closed.is_set():
            try:
                conn, addr = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return SocketChannel(conn, initiator=False, peer=addr)
        return None

    def close(self) -> None:
        self._closed.set()
        self.sock.close()


class LoopbackNetwork:
    """In-memory network: named hosts, listeners, and nothing else.

    A host with no listener refuses every inbound connection, which is how
    the NAT simulation keeps the agent unreachable.
    """

    def __init__(self, clock=None):
        self.clock = clock or SystemClock()
        self._listeners: dict[tuple[str, int], LoopbackListener] = {}
        self._lock = threading.Lock()
        self.refused: list[tuple[str, int]] = []
        self.faults_for: dict[tuple[str, int], Faults] = {}

    def listen(self, host: str, port: int) -> "LoopbackListener":
        with self._lock:
            if (host, port) in self._listeners:
                raise OSError(f"address in use: {host}:{port}")
            listener = LoopbackListener(self, host, port)
            self._listeners[(host, port)] = listener
            return listener

    def _unlisten(self, host, port):
        with self._lock:
            self._listeners.pop((host, port), None)

    def connect(self, host: str, port: int, timeout: float | None = None) -> LoopbackChannel:
        with self._lock:
            listener = self._listeners.get((host, port))
        if listener is None:
            self.refused.append((host, port))
            raise ConnectionRefusedError(f"connection refused: {host}:{port}")
        faults = self.faults_for.get((host, port))
        ours, theirs = loopback_pair(self.clock, faults_ab=dataclasses.replace(faults) if faults else None)
        ours.peer = (host, port)
        listener._queue.put(theirs)
        return ours


class LoopbackListener:
    def __init__(self, network: LoopbackNetwork, host: str, port: int):
        self.network = network
        self.address = (host, port)
        self._queue: queue.Queue = queue.Queue()
        self._closed = threading.Event()

    def accept(self) -> LoopbackChannel | None:
        while not self._closed.is_set():
            try:
                return self._queue.get(timeout=0.05)
            except queue.Empty:
                continue
        return None

    def close(self) -> None:
        self._closed.set()
        self.network._unlisten(*self.address)
