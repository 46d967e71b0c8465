"""Node-to-node transports: a deterministic simulated network and plain TCP.

Both deliver ``(Frame, delivery_time)`` pairs into a per-node inbound queue
that the node's envoy drains. ``delivery_time`` is the simulated arrival
instant, or ``None`` on real sockets.
"""
from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

from .protocol import Frame, MsgType, ProtocolError, decode_frame, encode_frame, read_frame

log = logging.getLogger(__name__)

CLOSED = None  # sentinel pushed into an inbound queue when the endpoint closes


class TransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransportParams:
    latency: float = 1e-3
    bandwidth: float = 1.25e9

    def __post_init__(self):
        if self.latency < 0 or self.bandwidth <= 0:
            raise ValueError("latency must be >= 0 and bandwidth > 0")


def simulated_send(nbytes: int, params: TransportParams, now: float = 0.0) -> float:
    """Arrival time of ``nbytes`` sent at ``now`` over an idle link."""
    return now + params.latency + nbytes / params.bandwidth


@dataclass
class LinkStats:
    messages: int = 0
    bytes: int = 0


@dataclass
class _Link:
    busy_until: float = 0.0


class SimNetwork:
    """In-process network with per-sender serialized links.

    A frame leaves when the sender's link is free, occupies it for
    ``bytes / bandwidth`` and arrives ``latency`` later.
    """

    simulated = True

    def __init__(self, n_nodes: int, params: TransportParams = TransportParams()):
        self.params = params
        self.n_nodes = n_nodes
        self._lock = threading.Lock()
        self._links = [_Link() for _ in range(n_nodes)]
        self.stats = [LinkStats() for _ in range(n_nodes)]
        self.endpoints = [SimEndpoint(self, i) for i in range(n_nodes)]

    def _deliver(self, src: int, dst: int, frame: Frame, now: float) -> float:
        if not 0 <= dst < self.n_nodes or dst == src:
            raise TransportError(f"node {src} cannot send to {dst}")
        data = encode_frame(frame)
        with self._lock:
            link = self._links[src]
            start = max(now, link.busy_until)
            link.busy_until = start + len(data) / self.params.bandwidth
            arrival = link.busy_until + self.params.latency
            self.stats[src].messages += 1
            self.stats[src].bytes += len(data)
        # round-trip through bytes so the simulated path exercises the wire format
        self.endpoints[dst].inbound.put((src, decode_frame(data), arrival))
        return arrival

    def close(self) -> None:
        for ep in self.endpoints:
            ep.close()


class SimEndpoint:
    def __init__(self, network: SimNetwork, node_id: int):
        self.network = network
        self.node_id = node_id
        self.inbound: queue.Queue = queue.Queue()
        self._closed = False

    @property
    def simulated(self) -> bool:
        return True

    def start(self) -> None:
        pass

    def send(self, dst: int, frame: Frame, now: float = 0.0) -> float:
        return self.network._deliver(self.node_id, dst, frame, now)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self.inbound.put(CLOSED)


def _recv_exactly(sock: socket.socket, n: int) -> bytes:
    chunks, remaining = [], n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise EOFError("connection closed")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class TcpEndpoint:
    """One node's sockets: a listener for inbound peers and one outbound stream per peer."""

    simulated = False

    def __init__(self, node_id: int, roster: list[tuple[str, int]], connect_timeout: float = 10.0):
        self.node_id = node_id
        self.roster = roster
        self.connect_timeout = connect_timeout
        self.inbound: queue.Queue = queue.Queue()
        self.stats = LinkStats()
        self._out: dict[int, socket.socket] = {}
        self._send_locks: dict[int, threading.Lock] = {}
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._closed = threading.Event()

    def start(self) -> None:
        host, port = self.roster[self.node_id]
        self._listener = socket.create_server((host, port), reuse_port=False)
        self._listener.settimeout(0.2)
        t = threading.Thread(target=self._accept_loop, name=f"node{self.node_id}-accept", daemon=True)
        t.start()
        self._threads.append(t)

    def connect(self) -> None:
        deadline = time.monotonic() + self.connect_timeout
        for peer, (host, port) in enumerate(self.roster):
            if peer == self.node_id:
                continue
            while True:
                try:
                    sock = socket.create_connection((host, port), timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise TransportError(f"node {self.node_id}: cannot reach node {peer} at {host}:{port}")
                    time.sleep(0.05)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._out[peer] = sock
            self._send_locks[peer] = threading.Lock()
            self.send(peer, Frame(MsgType.HELLO, node_id=self.node_id))

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            t = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _read_loop(self, conn: socket.socket) -> None:
        peer = None
        try:
            while True:
                frame = read_frame(lambda n: _recv_exactly(conn, n))
                if peer is None:
                    if frame.msg_type != MsgType.HELLO:
                        raise ProtocolError("first frame on a connection must be HELLO")
                    peer = frame.node_id
                self.inbound.put((peer, frame, None))
                if frame.msg_type == MsgType.SHUTDOWN:
                    break
        except (EOFError, OSError) as exc:
            if not self._closed.is_set():
                self.inbound.put((peer, exc, None))
        except ProtocolError as exc:
            self.inbound.put((peer, exc, None))
        finally:
            conn.close()

    def send(self, dst: int, frame: Frame, now: float = 0.0) -> None:
        data = encode_frame(frame)
        try:
            sock = self._out[dst]
        except KeyError:
            raise TransportError(f"node {self.node_id} has no connection to node {dst}") from None
        with self._send_locks[dst]:
            sock.sendall(data)
        self.stats.messages += 1
        self.stats.bytes += len(data)

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        for sock in self._out.values():
            try:
                sock.close()
            except OSError:
                pass
        if self._listener is not None:
            self._listener.close()
        self.inbound.put(CLOSED)


def free_local_roster(n_nodes: int, host: str = "127.0.0.1") -> list[tuple[str, int]]:
    """Pick ``n_nodes`` currently unused localhost ports."""
    socks, roster = [], []
    for _ in range(n_nodes):
        s = socket.socket()
        s.bind((host, 0))
        socks.append(s)
        roster.append((host, s.getsockname()[1]))
    for s in socks:
        s.close()
    return roster
