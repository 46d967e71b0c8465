"""Expert-parallel execution engine.

Two dataflows per decoder layer:

* centralized: node 0 runs attention and the router, ships each worker its
  input and selected experts, and sums the returned outputs (two message
  hops per layer);
* decentralized: every node replicates attention, router and the weighted
  sum, so the only exchange is the all-reduce of expert outputs (one hop).

On the simulated transport every node keeps a logical clock (its wiring
simulator's clock). Compute is charged from a cost profile, frames carry
their simulated arrival time, and waiting for a frame moves the receiver's
clock forward. On TCP the breakdown is measured wall time instead.
"""
from __future__ import annotations

import hashlib
import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .envoy import ClusterError, Envoy
from .model import (
    MATRIX_NAMES,
    KVCache,
    ModelConfig,
    ModelWeights,
    attention_block,
    embed,
    expert_forward,
    gated_contribution,
    init_weights,
    next_token,
    route,
)
from .numerics import F32, ShapeError, rms_norm
from .perfmodel import PerfParams
from .placement import (
    BUSY_FULL,
    NAIVE,
    ROUTER_AIDED,
    LruState,
    ScheduleDecision,
    Scheduler,
    ShardPlan,
    build_shard_plan,
    standby_keepalive,
)
from .protocol import (
    Frame,
    MsgType,
    pack_expert_input,
    pack_max_announce,
    pack_token_sync,
    pack_vector,
    unpack_expert_input,
    unpack_max_announce,
    unpack_token_sync,
    unpack_vector,
)
from .transport import SimNetwork, TcpEndpoint, TransportParams, free_local_roster
from .weightfile import PRESTACKED, UNSTACKED, ResidentArray, residency_layout
from .wiring import WiringParams, WiringState

log = logging.getLogger(__name__)

CENTRALIZED = "centralized"
DECENTRALIZED = "decentralized"
MODES = (CENTRALIZED, DECENTRALIZED)
SIM = "sim"
TCP = "tcp"

DEFAULT_PACKING = {NAIVE: UNSTACKED, BUSY_FULL: PRESTACKED, ROUTER_AIDED: PRESTACKED}
# startup wiring of every local array plus standby keepalive between requests
DEFAULT_WARMUP = {NAIVE: False, BUSY_FULL: True, ROUTER_AIDED: True}
STANDBY_GUARD = 0.75  # fraction of the inactivity threshold after which a standby pass fires


class DeterminismError(ClusterError):
    pass


def all_reduce(partials: Mapping[int, np.ndarray] | Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum of the partials in ascending key (node or expert id) order."""
    items = sorted(partials.items()) if isinstance(partials, Mapping) else list(enumerate(partials))
    if not items:
        raise ShapeError("all_reduce needs at least one partial")
    shape = items[0][1].shape
    acc = np.zeros(shape, dtype=F32)
    for key, part in items:
        if part.shape != shape:
            raise ShapeError(f"all_reduce: partial {key} has shape {part.shape}, expected {shape}")
        acc = (acc + part).astype(F32)
    return acc


def checksum(x: np.ndarray) -> int:
    return int.from_bytes(hashlib.blake2b(np.ascontiguousarray(x, dtype="<f4").tobytes(), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class CostProfile:
    """Simulated hardware charges per decoder layer.

    Defaults are the published full-size per-node hardware and model-size
    variables divided by the full model's depth, so each desk-scale layer is
    timed like one full-size layer (a 40-layer desk model is timed like the
    full model).
    """

    perf: PerfParams = PerfParams()
    misc_overhead_s: float = 1e-4  # router + weighted sum + dispatch, per layer

    @property
    def expert_layer_s(self) -> float:
        p = self.perf
        return max(p.params_per_expert / p.n_layers / p.mem_bandwidth, p.flops_per_expert / p.n_layers / p.gpu_flops)

    @property
    def attention_layer_s(self) -> float:
        p = self.perf
        return max(p.params_sa / p.n_layers / p.mem_bandwidth, p.flops_sa / p.n_layers / p.gpu_flops) + self.misc_overhead_s

    @property
    def matrix_bytes(self) -> int:
        return int(round(self.perf.params_per_expert / (self.perf.n_layers * 3)))

    def arrays(self, packing: str, experts: Sequence[int], n_layers: int) -> list[ResidentArray]:
        return residency_layout(packing, list(experts), n_layers, self.matrix_bytes)

    @staticmethod
    def arrays_for(packing: str, expert: int, layer: int) -> list[str]:
        if packing == PRESTACKED:
            return [f"expert{expert}"]
        return [f"expert{expert}.layer{layer}.{m}" for m in MATRIX_NAMES]


@dataclass(frozen=True)
class ClusterConfig:
    model: ModelConfig = ModelConfig()
    seed: int = 0
    n_nodes: int = 2
    mode: str = DECENTRALIZED
    strategy: str = ROUTER_AIDED
    packing: str | None = None  # defaults per strategy
    warmup: bool | None = None  # defaults per strategy
    replication: int = 1
    transport: str = SIM
    transport_params: TransportParams = TransportParams()
    wiring: WiringParams = WiringParams()
    costs: CostProfile = CostProfile()
    roster: tuple[tuple[str, int], ...] = ()
    idle_before_s: float = 0.0
    keepalive_period_s: float | None = None
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.strategy not in DEFAULT_PACKING:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.transport not in (SIM, TCP):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.n_nodes < 1:
            raise ValueError("need at least one node")
        if self.roster and len(self.roster) != self.n_nodes:
            raise ValueError(f"roster lists {len(self.roster)} nodes but n_nodes is {self.n_nodes}")

    @property
    def resolved_packing(self) -> str:
        return self.packing or DEFAULT_PACKING[self.strategy]

    @property
    def resolved_warmup(self) -> bool:
        return DEFAULT_WARMUP[self.strategy] if self.warmup is None else self.warmup

    @property
    def resolved_keepalive_period(self) -> float:
        return self.keepalive_period_s or self.wiring.inactivity_threshold / 2


@dataclass
class StepRecord:
    """Time spent on one decoding step (the step that emits generated token ``index``)."""

    index: int
    token: int
    moe_s: float
    comm_s: float
    misc_s: float
    comm_latency_s: float
    rounds: int
    max_executions: list[int]

    @property
    def total_s(self) -> float:
        return self.moe_s + self.comm_s + self.misc_s


class _SimTimer:
    simulated = True

    def __init__(self, wiring: WiringState):
        self.wiring = wiring
        self.acc = {"moe": 0.0, "comm": 0.0, "misc": 0.0}

    @property
    def now(self) -> float:
        return self.wiring.now

    def reset(self) -> None:
        self.acc = dict.fromkeys(self.acc, 0.0)

    def charge(self, kind: str, seconds: float, label: str = "") -> None:
        self.wiring.compute(seconds, label)
        self.acc[kind] += seconds

    def touch(self, array_id: str) -> None:
        self.acc["moe"] += self.wiring.touch(array_id)

    def wait_until(self, t: float | None) -> None:
        if t is None:
            return
        before = self.wiring.now
        self.wiring.advance_to(t)
        self.acc["comm"] += self.wiring.now - before

    @contextmanager
    def span(self, kind: str):
        yield


class _WallTimer(_SimTimer):
    simulated = False

    def charge(self, kind: str, seconds: float, label: str = "") -> None:
        pass

    def touch(self, array_id: str) -> None:
        pass

    def wait_until(self, t: float | None) -> None:
        pass

    @contextmanager
    def span(self, kind: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.acc[kind] += time.perf_counter() - t0


@dataclass
class NodeResult:
    node_id: int
    tokens: list[int] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    checksums: list[list[int]] = field(default_factory=list)
    frames_sent: int = 0
    standby_touches: int = 0
    wire_events: int = 0
    wire_time: float = 0.0
    error: BaseException | None = None


class Node:
    def __init__(
        self,
        node_id: int,
        cfg: ClusterConfig,
        plan: ShardPlan,
        weights: ModelWeights,
        endpoint,
    ):
        self.id = node_id
        self.cfg = cfg
        self.plan = plan
        self.model = cfg.model
        self.weights = weights
        self.endpoint = endpoint
        self.peers = [n for n in range(cfg.n_nodes) if n != node_id]
        self.local = plan.local_experts(node_id)
        self.packing = cfg.resolved_packing
        self.wiring = WiringState(cfg.wiring)
        self.wiring.register(cfg.costs.arrays(self.packing, self.local, self.model.n_layers))
        self.timer = _SimTimer(self.wiring) if endpoint.simulated else _WallTimer(self.wiring)
        self.scheduler = Scheduler(cfg.strategy, plan)
        self.envoy = Envoy(node_id, endpoint.inbound)
        self.result = NodeResult(node_id)
        self._seq = 0
        self._expert_s = cfg.costs.expert_layer_s
        self._attn_s = cfg.costs.attention_layer_s

    # -- plumbing -----------------------------------------------------------

    def _send(self, dst: int, msg_type: MsgType, layer: int, payload: bytes = b"") -> float | None:
        self._seq += 1
        self.result.frames_sent += 1
        frame = Frame(msg_type, layer, self.id, self._seq, payload)
        return self.endpoint.send(dst, frame, self.timer.now)

    def _take(self, src: int, msg_type, layer: int | None = None) -> Frame:
        with self.timer.span("comm"):
            frame, arrival = self.envoy.take(src, msg_type, timeout=self.cfg.timeout_s)
        self.timer.wait_until(arrival)
        if layer is not None and frame.layer != layer:
            raise ClusterError(
                f"node {self.id} expected layer {layer} from node {src}, got layer {frame.layer}", src
            )
        return frame

    def warmup(self) -> None:
        """Startup residency: warm strategies wire every local array in one commit."""
        if self.timer.simulated and self.cfg.resolved_warmup:
            self.wiring.wire_batch()

    def idle_until(self, t: float) -> None:
        """Wait for the request; warm strategies keep their arrays wired with standby passes."""
        if not self.timer.simulated or t <= self.wiring.now:
            return
        if self.cfg.resolved_warmup:
            standby_keepalive([self.wiring], t - self.wiring.now, self.cfg.resolved_keepalive_period)
        else:
            self.wiring.advance_to(t)

    def _standby_guard(self) -> None:
        """Standby pass over any local array idle for a keepalive period (warm strategies only)."""
        if not (self.timer.simulated and self.cfg.resolved_warmup):
            return
        limit = self.cfg.wiring.inactivity_threshold * STANDBY_GUARD
        for rec in list(self.wiring.records.values()):
            if self.wiring.now - rec.last_touch >= limit:
                self.timer.touch(rec.array_id)
                self.timer.charge("moe", rec.nbytes / self.cfg.costs.perf.mem_bandwidth, f"standby.{rec.array_id}")
                self.result.standby_touches += 1

    def _execute(self, schedule_entries, h: np.ndarray | None, gates: Mapping[int, float], layer: int):
        """Run this node's share of a layer; returns gated outputs of the router-selected experts."""
        out = {}
        for expert, is_real in schedule_entries:
            for array_id in CostProfile.arrays_for(self.packing, expert, layer):
                self.timer.touch(array_id)
            self.timer.charge("moe", self._expert_s, f"expert{expert}.layer{layer}")
            if is_real:
                with self.timer.span("moe"):
                    y = expert_forward(h, self.weights.experts[expert], layer)
                    out[expert] = gated_contribution(gates[expert], y)
        self._standby_guard()
        return out

    def _send_partials(self, dst: int, layer: int, contributions: Mapping[int, np.ndarray]) -> None:
        # one frame per selected expert, ascending id; an empty share still sends one zero frame
        if not contributions:
            self._send(dst, MsgType.EXPERT_PARTIAL, layer, pack_vector(np.zeros(self.model.d_embed, F32)))
            return
        for expert in sorted(contributions):
            self._send(dst, MsgType.EXPERT_PARTIAL, layer, pack_vector(contributions[expert]))

    def _collect_partials(self, src: int, layer: int, experts: list[int]) -> dict[int, np.ndarray]:
        got = {}
        for expert in experts or [None]:
            frame = self._take(src, MsgType.EXPERT_PARTIAL, layer)
            if expert is not None:
                got[expert] = unpack_vector(frame.payload, self.model.d_embed)
        return got

    def _attention_and_route(self, x: np.ndarray, layer: int, cache: KVCache):
        with self.timer.span("misc"):
            x = attention_block(x, self.weights.layers[layer], cache, layer)
            h = rms_norm(x)
            decision = route(h, self.weights.layers[layer], self.model.top_k, layer)
        self.timer.charge("misc", self._attn_s, f"attention.layer{layer}")
        return x, h, decision

    # -- decentralized ------------------------------------------------------

    def _layer_decentralized(self, x: np.ndarray, layer: int, cache: KVCache):
        x, h, decision = self._attention_and_route(x, layer, cache)
        schedule = self.scheduler(decision)
        gates = dict(zip(decision.expert_indices, decision.gates.tolist()))
        mine = self._execute(schedule.per_node[self.id], h, gates, layer)
        for peer in self.peers:
            self._send_partials(peer, layer, mine)
        contributions = dict(mine)
        for peer in self.peers:
            contributions.update(self._collect_partials(peer, layer, schedule.real(peer)))
        with self.timer.span("misc"):
            moe = all_reduce(contributions)
            x = (x + moe).astype(F32)
        return x, schedule

    def run_decentralized(self, prompt: list[int], n_out: int) -> NodeResult:
        cache = KVCache.empty(self.model.n_layers)
        pending, step_index = list(prompt), 0
        sync_backlog: list[tuple[int, list[int]]] = []
        while len(self.result.tokens) < n_out:
            for pos, token_in in enumerate(pending):
                self.timer.reset()
                x = embed(self.weights, token_in)
                sums, max_exec = [], []
                for layer in range(self.model.n_layers):
                    x, schedule = self._layer_decentralized(x, layer, cache)
                    sums.append(checksum(x))
                    max_exec.append(schedule.max_executions)
                    if layer == 0 and sync_backlog:
                        self._verify_sync(sync_backlog.pop(0))
                self.result.checksums.append(sums)
                if pos != len(pending) - 1:
                    continue
                token = next_token(self.weights, x)
                self.result.tokens.append(token)
                self._record_step(step_index, token, 1 if self.peers else 0, max_exec)
                step_index += 1
                for peer in self.peers:
                    self._send(peer, MsgType.TOKEN_SYNC, 0, pack_token_sync(token, sums))
                sync_backlog.append((token, sums))
            pending = [self.result.tokens[-1]]
        while sync_backlog:
            self._verify_sync(sync_backlog.pop(0))
        return self.result

    def _verify_sync(self, mine: tuple[int, list[int]]) -> None:
        for peer in self.peers:
            frame, _ = self.envoy.take(peer, MsgType.TOKEN_SYNC, timeout=self.cfg.timeout_s)
            token, sums = unpack_token_sync(frame.payload)
            if (token, sums) != mine:
                raise DeterminismError(
                    f"node {self.id} and node {peer} diverged (token {mine[0]} vs {token})", peer
                )

    # -- centralized --------------------------------------------------------

    def run_coordinator(self, prompt: list[int], n_out: int) -> NodeResult:
        cache = KVCache.empty(self.model.n_layers)
        pending, step_index = list(prompt), 0
        while len(self.result.tokens) < n_out:
            for pos, token_in in enumerate(pending):
                self.timer.reset()
                x = embed(self.weights, token_in)
                sums, max_exec = [], []
                for layer in range(self.model.n_layers):
                    x, h, decision = self._attention_and_route(x, layer, cache)
                    schedule = self.scheduler(decision)
                    gates = dict(zip(decision.expert_indices, decision.gates.tolist()))
                    m = max(len(schedule.real(n)) for n in range(self.cfg.n_nodes))
                    for w in self.peers:
                        real = schedule.real(w)
                        if real:
                            entries = [(e, gates[e]) for e in real]
                            self._send(w, MsgType.EXPERT_INPUT, layer, pack_expert_input(h, m, entries))
                        else:
                            self._send(w, MsgType.MAX_ANNOUNCE, layer, pack_max_announce(m))
                    contributions = self._execute(schedule.per_node[self.id], h, gates, layer)
                    for w in self.peers:
                        contributions.update(self._collect_partials(w, layer, schedule.real(w)))
                    with self.timer.span("misc"):
                        x = (x + all_reduce(contributions)).astype(F32)
                    sums.append(checksum(x))
                    max_exec.append(schedule.max_executions)
                self.result.checksums.append(sums)
                if pos != len(pending) - 1:
                    continue
                token = next_token(self.weights, x)
                self.result.tokens.append(token)
                self._record_step(step_index, token, 2 if self.peers else 0, max_exec)
                step_index += 1
            pending = [self.result.tokens[-1]]
        return self.result

    def _worker_schedule(self, real: list[int], m: int) -> list[tuple[int, bool]]:
        lru: LruState = self.scheduler.lru
        if self.cfg.strategy == NAIVE:
            entries = [(e, True) for e in real]
        elif self.cfg.strategy == BUSY_FULL:
            entries = [(e, e in real) for e in self.local]
        else:
            pad = lru.least_recent(self.id, set(real), m - len(real))
            entries = [(e, True) for e in real] + [(e, False) for e in pad]
            lru.mark(self.id, [e for e, _ in entries])
        return entries

    def run_worker(self) -> NodeResult:
        while True:
            try:
                frame = self._take(0, (MsgType.EXPERT_INPUT, MsgType.MAX_ANNOUNCE))
            except ClusterError:
                if 0 in self.envoy.shutdown_from:
                    return self.result
                raise
            if frame.msg_type == MsgType.EXPERT_INPUT:
                h, m, entries = unpack_expert_input(frame.payload)
            else:
                h, m, entries = None, unpack_max_announce(frame.payload), []
            gates = dict(entries)
            schedule = self._worker_schedule(sorted(gates), m)
            out = self._execute(schedule, h, gates, frame.layer)
            self._send_partials(0, frame.layer, out)

    # -- bookkeeping --------------------------------------------------------

    def _record_step(self, index: int, token: int, rounds: int, max_exec: list[int]) -> None:
        acc = self.timer.acc
        per_layer_rounds = rounds * self.model.n_layers
        self.result.steps.append(
            StepRecord(
                index=index,
                token=token,
                moe_s=acc["moe"],
                comm_s=acc["comm"],
                misc_s=acc["misc"],
                comm_latency_s=per_layer_rounds * self.cfg.transport_params.latency,
                rounds=per_layer_rounds,
                max_executions=max_exec,
            )
        )

    def run(self, prompt: list[int], n_out: int, start_at: float = 0.0) -> NodeResult:
        try:
            self.idle_until(start_at)
            if self.cfg.mode == DECENTRALIZED:
                self.run_decentralized(prompt, n_out)
            elif self.id == 0:
                self.run_coordinator(prompt, n_out)
            else:
                self.run_worker()
        except BaseException as exc:  # surfaced by the cluster runner
            self.result.error = exc
        finally:
            for peer in self.peers:
                try:
                    self._send(peer, MsgType.SHUTDOWN, 0)
                except Exception:
                    pass
            self.result.wire_events = self.wiring.wire_events
            self.result.wire_time = self.wiring.wire_time
        return self.result


@dataclass
class ClusterResult:
    config: ClusterConfig
    tokens: list[int]
    steps: list[StepRecord]
    nodes: list[NodeResult]
    bytes_sent: list[int]

    @property
    def mean_step_s(self) -> float:
        return sum(s.total_s for s in self.steps) / len(self.steps) if self.steps else 0.0

    @property
    def mean_comm_share(self) -> float:
        total = sum(s.total_s for s in self.steps)
        return sum(s.comm_s for s in self.steps) / total if total else 0.0

    @property
    def mean_max_executions(self) -> float:
        counts = [c for s in self.steps for c in s.max_executions]
        return sum(counts) / len(counts) if counts else 0.0

    def breakdown_rows(self) -> list[dict[str, object]]:
        return [
            {"token": s.index, "moe_s": s.moe_s, "comm_s": s.comm_s, "misc_s": s.misc_s}
            for s in self.steps
        ]


def run_cluster(
    cfg: ClusterConfig,
    prompt: list[int],
    n_out: int,
    weights: ModelWeights | None = None,
) -> ClusterResult:
    """Start ``cfg.n_nodes`` nodes in this process, generate ``n_out`` tokens and shut down."""
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    weights = weights or init_weights(cfg.model, cfg.seed)
    plan = build_shard_plan(cfg.model.n_experts, cfg.n_nodes, cfg.replication)
    if cfg.transport == SIM:
        network = SimNetwork(cfg.n_nodes, cfg.transport_params)
        endpoints = network.endpoints
    else:
        network = None
        roster = list(cfg.roster) or free_local_roster(cfg.n_nodes)
        endpoints = [TcpEndpoint(i, roster) for i in range(cfg.n_nodes)]
    nodes = []
    for i, ep in enumerate(endpoints):
        local = {e: weights.experts[e] for e in plan.local_experts(i)}
        nodes.append(Node(i, cfg, plan, replace(weights, experts=local), ep))
    for node in nodes:
        node.envoy.start()
    try:
        if cfg.transport == TCP:
            for ep in endpoints:
                ep.start()
            for ep in endpoints:
                ep.connect()
            for node in nodes:
                node.envoy.wait_for_hellos(set(node.peers))
        for node in nodes:
            node.warmup()
        # the request reaches every node at the same instant, after all have started up
        start_at = max(node.wiring.now for node in nodes) + cfg.idle_before_s
        threads = [
            threading.Thread(target=node.run, args=(prompt, n_out, start_at), name=f"node{node.id}", daemon=True)
            for node in nodes
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join(cfg.timeout_s * 4)
            if t.is_alive():
                raise ClusterError(f"{t.name} did not finish")
        for node in nodes:
            node.envoy.wait_for_shutdowns(set(node.peers), timeout=5.0)
    finally:
        for ep in endpoints:
            ep.close()
        for node in nodes:
            node.envoy.join(timeout=5.0)
    errors = [n.result.error for n in nodes if n.result.error is not None]
    if errors:
        primary = next((e for e in errors if not isinstance(e, ClusterError)), None)
        primary = primary or next((e for e in errors if isinstance(e, DeterminismError)), errors[0])
        raise primary
    lead = nodes[0].result
    if network is not None:
        sent = [s.bytes for s in network.stats]
    else:
        sent = [ep.stats.bytes for ep in endpoints]
    return ClusterResult(cfg, lead.tokens, lead.steps, [n.result for n in nodes], sent)


def matched_perf_params(result: ClusterResult) -> PerfParams:
    """Performance-model inputs that mirror a simulated run (for the lower-bound check)."""
    cfg = result.config
    base = cfg.costs.perf
    depth = cfg.model.n_layers / base.n_layers  # simulated layers are full-size layers
    frame_bytes = 4 + 17 + 4 * cfg.model.d_embed
    return replace(
        base,
        params_sa=base.params_sa * depth,
        params_per_expert=base.params_per_expert * depth,
        flops_sa=base.flops_sa * depth,
        flops_per_expert=base.flops_per_expert * depth,
        n_layers=cfg.model.n_layers,
        comm_latency=cfg.transport_params.latency if cfg.n_nodes > 1 else 0.0,
        comm_bandwidth=cfg.transport_params.bandwidth,
        comm_data=frame_bytes * cfg.model.n_layers if cfg.n_nodes > 1 else 0.0,
        expected_experts=result.mean_max_executions,
    )
