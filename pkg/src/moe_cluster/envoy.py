"""Per-node message dispatcher.

The envoy thread drains the transport's inbound queue into per-(sender, type)
mailboxes so that frame reception never waits on expert compute. The compute
side pulls frames by sender and type, which keeps results independent of
the order in which different peers' frames arrive.
"""
from __future__ import annotations

import collections
import queue
import threading
import time

from .protocol import Frame, MsgType
from .transport import CLOSED


class ClusterError(RuntimeError):
    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message)
        self.node_id = node_id


class Envoy:
    def __init__(self, node_id: int, inbound: queue.Queue):
        self.node_id = node_id
        self._inbound = inbound
        self._cv = threading.Condition()
        self._boxes: dict[tuple[int, MsgType], collections.deque] = collections.defaultdict(collections.deque)
        self._errors: dict[int | None, BaseException] = {}
        self.shutdown_from: set[int] = set()
        self.hello_from: set[int] = set()
        self.received = 0
        self.ack_times: list[float] = []  # wall-clock instant each frame was taken off the wire
        self._closed = False
        self._thread = threading.Thread(target=self._run, name=f"envoy{node_id}", daemon=True)

    def start(self) -> Envoy:
        self._thread.start()
        return self

    def _run(self) -> None:
        while True:
            item = self._inbound.get()
            with self._cv:
                if item is CLOSED:
                    self._closed = True
                    self._cv.notify_all()
                    return
                src, frame, arrival = item
                self.received += 1
                self.ack_times.append(time.monotonic())
                if isinstance(frame, BaseException):
                    self._errors[src] = frame
                elif frame.msg_type == MsgType.HELLO:
                    self.hello_from.add(src)
                elif frame.msg_type == MsgType.SHUTDOWN:
                    self.shutdown_from.add(src)
                else:
                    self._boxes[(src, frame.msg_type)].append((frame, arrival))
                self._cv.notify_all()

    def pending(self, src: int, msg_type: MsgType) -> int:
        with self._cv:
            return len(self._boxes[(src, msg_type)])

    def take(
        self,
        src: int,
        msg_type: MsgType | tuple[MsgType, ...],
        timeout: float = 30.0,
    ) -> tuple[Frame, float | None]:
        """Oldest frame from ``src`` of one of the given types (blocks up to ``timeout``)."""
        types = (msg_type,) if isinstance(msg_type, MsgType) else tuple(msg_type)
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                candidates = [(self._boxes[(src, t)][0][0].seq, t) for t in types if self._boxes[(src, t)]]
                if candidates:
                    _, t = min(candidates)  # per-sender seq restores send order across types
                    return self._boxes[(src, t)].popleft()
                if src in self._errors:
                    raise ClusterError(f"node {src} failed: {self._errors[src]}", src)
                if src in self.shutdown_from or self._closed:
                    raise ClusterError(f"node {src} shut down while node {self.node_id} waited for {types}", src)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ClusterError(
                        f"node {self.node_id} timed out waiting for {[t.name for t in types]} from node {src}", src
                    )
                self._cv.wait(remaining)

    def wait_for_hellos(self, peers: set[int], timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        with self._cv:
            while not peers <= self.hello_from:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = sorted(peers - self.hello_from)
                    raise ClusterError(f"node {self.node_id} never heard from nodes {missing}", missing[0])
                self._cv.wait(remaining)

    def wait_for_shutdowns(self, peers: set[int], timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        with self._cv:
            while not peers <= self.shutdown_from and not self._closed:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cv.wait(remaining)

    def join(self, timeout: float | None = None) -> None:
        self._thread.join(timeout)
