"""Reliable, ordered worker-to-worker byte-message delivery.

Two bindings: an in-process mesh of queues (workers as threads) and TCP
sockets (workers as processes, on one host or across a cluster).
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time

from .wire import FrameError

_LEN = struct.Struct("<I")
MAX_FRAME = 1 << 30


class PeerTimeout(TimeoutError):
    def __init__(self, worker: int, peer: int, waited: float):
        super().__init__(
            f"worker {worker} received nothing from worker {peer} within {waited:.1f} s; "
            f"the peer is stalled, crashed or missing from the exchange plan")
        self.worker = worker
        self.peer = peer


class Aborted(RuntimeError):
    """Another worker failed; this one stops waiting."""


class InProcTransport:
    """Queue mesh shared by worker threads of one process."""

    def __init__(self, n_workers: int, timeout: float = 60.0):
        self.n_workers = n_workers
        self.timeout = timeout
        self.abort = threading.Event()
        self._queues = {(s, r): queue.SimpleQueue()
                        for s in range(n_workers) for r in range(n_workers) if s != r}

    def channel(self, worker: int) -> "InProcChannel":
        return InProcChannel(self, worker)


class InProcChannel:
    def __init__(self, transport: InProcTransport, worker: int):
        self.t = transport
        self.worker = worker
        self.offsets: dict[int, int] = {}

    def send(self, peer: int, data: bytes) -> None:
        self.t._queues[(self.worker, peer)].put(data)

    def recv(self, peer: int) -> bytes:
        q = self.t._queues[(peer, self.worker)]
        deadline = time.monotonic() + self.t.timeout
        while True:
            if self.t.abort.is_set():
                raise Aborted(f"worker {self.worker} aborted")
            try:
                data = q.get(timeout=0.05)
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise PeerTimeout(self.worker, peer, self.t.timeout) from None
                continue
            self.offsets[peer] = self.offsets.get(peer, 0) + len(data)
            return data

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


class TcpChannel:
    """Length-prefixed frames over one socket per peer.

    Lower worker ids connect to higher ones and announce themselves with a
    4-byte id. Sends are queued to a writer thread so two peers pushing large
    frames at each other cannot deadlock on full socket buffers.
    """

    def __init__(self, worker: int, addresses: dict[int, tuple[str, int]],
                 peers: set[int], timeout: float = 60.0):
        self.worker = worker
        self.timeout = timeout
        self.socks: dict[int, socket.socket] = {}
        self.offsets: dict[int, int] = {}
        self._outbox: queue.SimpleQueue = queue.SimpleQueue()
        self._error: BaseException | None = None
        host, port = addresses[worker]
        listener = socket.create_server((host, port), reuse_port=False, backlog=len(peers) + 1)
        listener.settimeout(timeout)
        try:
            self._connect(addresses, sorted(p for p in peers if p > worker))
            self._accept(listener, {p for p in peers if p < worker})
        finally:
            listener.close()
        for s in self.socks.values():
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.settimeout(timeout)
        self._writer = threading.Thread(target=self._write_loop, daemon=True)
        self._writer.start()

    def _connect(self, addresses, higher):
        deadline = time.monotonic() + self.timeout
        for peer in higher:
            while True:
                try:
                    s = socket.create_connection(addresses[peer], timeout=self.timeout)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise PeerTimeout(self.worker, peer, self.timeout) from None
                    time.sleep(0.05)
            s.sendall(_LEN.pack(self.worker))
            self.socks[peer] = s
            self.offsets[peer] = 0

    def _accept(self, listener, lower):
        while lower - self.socks.keys():
            try:
                s, _ = listener.accept()
            except socket.timeout:
                missing = min(lower - self.socks.keys())
                raise PeerTimeout(self.worker, missing, self.timeout) from None
            s.settimeout(self.timeout)
            (peer,) = _LEN.unpack(_recv_exact(s, _LEN.size))
            if peer not in lower:
                s.close()
                raise FrameError(peer, 0, f"unexpected hello from worker {peer}")
            self.socks[peer] = s
            self.offsets[peer] = 0

    def _write_loop(self):
        while True:
            item = self._outbox.get()
            if item is None:
                return
            peer, data = item
            try:
                self.socks[peer].sendall(_LEN.pack(len(data)) + data)
            except BaseException as exc:
                self._error = exc
                return

    def send(self, peer: int, data: bytes) -> None:
        if self._error is not None:
            raise ConnectionError(f"send to worker {peer} failed: {self._error}")
        self._outbox.put((peer, data))

    def recv(self, peer: int) -> bytes:
        s = self.socks[peer]
        try:
            (n,) = _LEN.unpack(_recv_exact(s, _LEN.size))
            if n > MAX_FRAME:
                raise FrameError(peer, self.offsets[peer], f"frame length {n} exceeds limit")
            data = _recv_exact(s, n)
        except socket.timeout:
            raise PeerTimeout(self.worker, peer, self.timeout) from None
        self.offsets[peer] += _LEN.size + n
        return data

    def close(self) -> None:
        self._outbox.put(None)
        self._writer.join(timeout=self.timeout)
        for s in self.socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


def free_local_addresses(n: int, host: str = "127.0.0.1") -> dict[int, tuple[str, int]]:
    """Pick ``n`` currently unused ports on ``host``."""
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
        return {i: (host, s.getsockname()[1]) for i, s in enumerate(socks)}
    finally:
        for s in socks:
            s.close()
