"""Memory-residency ("wiring") simulator.

Arrays must be wired before a kernel may read them. Wiring costs a fixed
latency plus bytes over the wiring bandwidth; any wired array left untouched
for longer than the inactivity threshold is unwired again and pays the full
cost on its next use.
"""
from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

from .weightfile import PRESTACKED, UNSTACKED, ResidentArray

SIMULATED = "simulated"
WALL = "wall"


class WiringError(KeyError):
    pass


@dataclass(frozen=True)
class WiringParams:
    wire_bandwidth: float = 40e9
    wire_base_latency: float = 1e-4
    inactivity_threshold: float = 0.400
    clock_mode: Literal["simulated", "wall"] = SIMULATED

    def __post_init__(self):
        if self.wire_bandwidth <= 0 or self.wire_base_latency < 0 or self.inactivity_threshold <= 0:
            raise ValueError("wiring parameters must be positive")
        if self.clock_mode not in (SIMULATED, WALL):
            raise ValueError(f"unknown clock mode {self.clock_mode!r}")

    def wire_cost(self, nbytes: int) -> float:
        return self.wire_base_latency + nbytes / self.wire_bandwidth


@dataclass
class ArrayRecord:
    array_id: str
    nbytes: int
    wired: bool = False
    last_touch: float = 0.0


@dataclass(frozen=True)
class TimelineEvent:
    kind: str  # "wire", "compute" or "idle"
    label: str
    start: float
    duration: float


@dataclass
class WiringState:
    params: WiringParams = field(default_factory=WiringParams)
    records: dict[str, ArrayRecord] = field(default_factory=dict)
    now: float = 0.0
    wire_events: int = 0
    wire_time: float = 0.0
    unwire_events: int = 0
    record_timeline: bool = False
    timeline: list[TimelineEvent] = field(default_factory=list)
    _wall_origin: float = field(default=0.0, repr=False)
    # (last_touch, array_id) of wired arrays; stale entries are skipped lazily
    _expiry: list[tuple[float, str]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.params.clock_mode == WALL:
            self._wall_origin = time.monotonic()

    def register(self, arrays: Iterable[ResidentArray]) -> None:
        for arr in arrays:
            if arr.array_id in self.records:
                raise ValueError(f"array {arr.array_id!r} registered twice")
            self.records[arr.array_id] = ArrayRecord(arr.array_id, arr.nbytes, last_touch=self.now)

    @property
    def wired(self) -> set[str]:
        return {a for a, r in self.records.items() if r.wired}

    def _log(self, kind: str, label: str, start: float, duration: float) -> None:
        if self.record_timeline and duration > 0:
            self.timeline.append(TimelineEvent(kind, label, start, duration))

    def _move_clock(self, dt: float) -> None:
        if self.params.clock_mode == WALL:
            if dt > 0:
                time.sleep(dt)
            self.now = max(self.now, time.monotonic() - self._wall_origin)
        else:
            self.now += dt

    def _mark_wired(self, rec: ArrayRecord) -> None:
        rec.wired = True
        rec.last_touch = self.now
        heapq.heappush(self._expiry, (rec.last_touch, rec.array_id))

    def sweep_unwire(self) -> list[str]:
        theta = self.params.inactivity_threshold
        dropped = []
        heap = self._expiry
        while heap and self.now - heap[0][0] > theta:
            touched, array_id = heapq.heappop(heap)
            rec = self.records[array_id]
            if rec.wired and rec.last_touch == touched:
                rec.wired = False
                dropped.append(array_id)
        self.unwire_events += len(dropped)
        return sorted(dropped)

    def advance(self, dt: float, kind: str = "idle", label: str = "") -> None:
        if dt < 0:
            raise ValueError(f"cannot move the clock backwards (dt={dt})")
        if dt == 0:
            return
        self._log(kind, label, self.now, dt)
        self._move_clock(dt)
        self.sweep_unwire()

    def advance_to(self, t: float) -> None:
        if t > self.now:
            self.advance(t - self.now)

    def touch(self, array_id: str) -> float:
        """Make ``array_id`` resident; returns the wiring time charged (0 if already wired)."""
        try:
            rec = self.records[array_id]
        except KeyError:
            raise WiringError(f"unknown array {array_id!r}") from None
        cost = 0.0
        if not rec.wired:
            cost = self.params.wire_cost(rec.nbytes)
            self.advance(cost, "wire", array_id)
            self.wire_events += 1
            self.wire_time += cost
        self._mark_wired(rec)
        return cost

    def wire_batch(self, array_ids: Iterable[str] | None = None) -> float:
        """Wire a set of arrays as one residency commit; all count as touched when it completes."""
        ids = list(self.records) if array_ids is None else list(array_ids)
        try:
            recs = [self.records[a] for a in ids]
        except KeyError as exc:
            raise WiringError(f"unknown array {exc.args[0]!r}") from None
        pending = [r for r in recs if not r.wired]
        cost = sum(self.params.wire_cost(r.nbytes) for r in pending)
        if cost > 0:
            self._log("wire", f"batch of {len(pending)}", self.now, cost)
            self._move_clock(cost)
        for r in recs:
            self._mark_wired(r)
        self.wire_events += len(pending)
        self.wire_time += cost
        self.sweep_unwire()
        return cost

    def compute(self, seconds: float, label: str = "") -> None:
        self.advance(seconds, "compute", label)


# -- packing benchmark -------------------------------------------------------

DEFAULT_T_WAITS_MS = (0,) + tuple(2**i for i in range(12))


@dataclass(frozen=True)
class PackingSample:
    strategy: str
    t_wait_ms: float
    mean_sample_time_ms: float
    wire_time_per_sample_ms: float


def _packing_arrays(strategy: str, n_layers: int, n_mpl: int, matrix_bytes: int):
    if strategy == UNSTACKED:
        arrays = [ResidentArray(f"B[{i},{j}]", matrix_bytes) for i in range(n_layers) for j in range(n_mpl)]
        return arrays, lambda i, j: f"B[{i},{j}]"
    if strategy == PRESTACKED:
        return [ResidentArray("B", matrix_bytes * n_layers * n_mpl)], lambda i, j: "B"
    raise ValueError(f"unknown packing strategy {strategy!r}")


def bench_packing(
    strategy: str,
    t_waits_ms: Sequence[float] = DEFAULT_T_WAITS_MS,
    n_layers: int = 40,
    n_mpl: int = 3,
    n: int = 8192,
    n_samples: int = 5,
    params: WiringParams | None = None,
    effective_flops: float = 1e12,
    precision_bytes: int = 2,
    state: WiringState | None = None,
) -> list[PackingSample]:
    """Replay the matmul packing benchmark on the residency simulator.

    For each wait time: a warmup wires every weight and runs one pass, then ``n_samples``
    passes over all layers sleep ``T_wait`` after each layer. The reported
    sample time excludes the sleeps themselves.
    """
    params = params or WiringParams()
    state = state or WiringState(params)
    arrays, array_of = _packing_arrays(strategy, n_layers, n_mpl, n * n * precision_bytes)
    state.register(arrays)
    matmul_s = 2.0 * n * n / effective_flops

    def one_pass(t_wait_s: float) -> None:
        for i in range(n_layers):
            for j in range(n_mpl):
                state.touch(array_of(i, j))
                state.compute(matmul_s, f"matmul[{i},{j}]")
            state.advance(t_wait_s)

    results = []
    for t_wait_ms in t_waits_ms:
        t_wait_s = t_wait_ms / 1e3
        state.wire_batch()  # warmup: wire down every weight first
        one_pass(0.0)
        t_start, wire_start = state.now, state.wire_time
        for _ in range(n_samples):
            one_pass(t_wait_s)
        elapsed = state.now - t_start
        t_sample = elapsed / n_samples - t_wait_s * n_layers
        results.append(
            PackingSample(
                strategy,
                t_wait_ms,
                t_sample * 1e3,
                (state.wire_time - wire_start) / n_samples * 1e3,
            )
        )
    return results


def knee_estimate(theta: float, n_layers: int, granularity: str) -> float:
    """Wait time beyond which an array goes idle longer than ``theta`` between uses."""
    if granularity == UNSTACKED:
        return theta / n_layers
    if granularity == PRESTACKED:
        return theta
    raise ValueError(granularity)

