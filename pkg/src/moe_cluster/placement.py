"""Expert placement across nodes and per-layer execution schedules.

Three schedulers decide which experts each node runs in a layer:

* ``naive``        only the router-selected experts, on their owning node
* ``busy-full``    every local expert, every layer; unselected outputs are dropped
* ``router-aided`` every node runs the cluster-wide maximum number of selected
  experts, topping up with its least recently used local experts
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .model import RouterDecision
from .wiring import WiringState

NAIVE = "naive"
BUSY_FULL = "busy-full"
ROUTER_AIDED = "router-aided"
STRATEGIES = (NAIVE, BUSY_FULL, ROUTER_AIDED)

MAX_ENUMERATION_EXPERTS = 20


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class ShardPlan:
    n_nodes: int
    n_experts: int
    replicas: tuple[tuple[int, ...], ...]  # per expert, the nodes holding it (primary first)

    def local_experts(self, node: int) -> list[int]:
        return [e for e, nodes in enumerate(self.replicas) if node in nodes]

    def assign_owners(self, selected: Iterable[int]) -> dict[int, int]:
        """Owning node of each selected expert.

        Replicated experts go to the holder with the fewest selected experts
        so far in this layer (ties to the lowest node id), visiting experts
        in ascending id.
        """
        load = [0] * self.n_nodes
        owners = {}
        for e in sorted(selected):
            node = min(self.replicas[e], key=lambda n: (load[n], n))
            owners[e] = node
            load[node] += 1
        return owners

    def selected_counts(self, selected: Iterable[int]) -> list[int]:
        counts = [0] * self.n_nodes
        for node in self.assign_owners(selected).values():
            counts[node] += 1
        return counts


def build_shard_plan(n_experts: int, n_nodes: int, replication_factor: int = 1) -> ShardPlan:
    if n_nodes < 1 or n_experts < 1:
        raise PlacementError("need at least one node and one expert")
    if replication_factor < 1:
        raise PlacementError("replication factor must be at least 1")
    if replication_factor > n_nodes:
        raise PlacementError(
            f"replication factor {replication_factor} exceeds the number of nodes ({n_nodes})"
        )
    replicas = tuple(
        tuple((e * n_nodes // n_experts + i) % n_nodes for i in range(replication_factor))
        for e in range(n_experts)
    )
    plan = ShardPlan(n_nodes, n_experts, replicas)
    empty = [n for n in range(n_nodes) if not plan.local_experts(n)]
    if empty:
        raise PlacementError(f"nodes {empty} would hold no experts; use fewer nodes")
    return plan


@dataclass(frozen=True)
class ScheduleDecision:
    layer: int
    per_node: tuple[tuple[tuple[int, bool], ...], ...]  # node -> ((expert, is_real), ...)
    owners: dict[int, int]

    def executed(self, node: int) -> list[int]:
        return [e for e, _ in self.per_node[node]]

    def real(self, node: int) -> list[int]:
        return [e for e, is_real in self.per_node[node] if is_real]

    @property
    def max_executions(self) -> int:
        return max(len(p) for p in self.per_node)


@dataclass
class LruState:
    """Per node, the logical time each local expert last ran (-1 = never)."""

    last_used: list[dict[int, int]]
    clock: list[int]

    @classmethod
    def for_plan(cls, plan: ShardPlan) -> LruState:
        return cls(
            [{e: -1 for e in plan.local_experts(n)} for n in range(plan.n_nodes)],
            [0] * plan.n_nodes,
        )

    def least_recent(self, node: int, exclude: set[int], count: int) -> list[int]:
        pool = [e for e in self.last_used[node] if e not in exclude]
        pool.sort(key=lambda e: (self.last_used[node][e], e))
        return pool[:count]

    def mark(self, node: int, experts: Sequence[int]) -> None:
        self.clock[node] += 1
        for e in experts:
            self.last_used[node][e] = self.clock[node]


def _check(decision: RouterDecision, plan: ShardPlan) -> dict[int, int]:
    for e in decision.expert_indices:
        if not 0 <= e < plan.n_experts:
            raise PlacementError(f"router selected unknown expert {e}")
    return plan.assign_owners(decision.expert_indices)


def schedule_naive(decision: RouterDecision, plan: ShardPlan) -> ScheduleDecision:
    owners = _check(decision, plan)
    per_node = tuple(
        tuple((e, True) for e in sorted(owners) if owners[e] == n) for n in range(plan.n_nodes)
    )
    return ScheduleDecision(decision.layer, per_node, owners)


def schedule_busy_full(decision: RouterDecision, plan: ShardPlan) -> ScheduleDecision:
    owners = _check(decision, plan)
    per_node = tuple(
        tuple((e, owners.get(e) == n) for e in plan.local_experts(n)) for n in range(plan.n_nodes)
    )
    return ScheduleDecision(decision.layer, per_node, owners)


def schedule_router_aided(decision: RouterDecision, plan: ShardPlan, lru: LruState) -> ScheduleDecision:
    owners = _check(decision, plan)
    mine = [[e for e in sorted(owners) if owners[e] == n] for n in range(plan.n_nodes)]
    m = max(len(s) for s in mine)
    per_node = []
    for n in range(plan.n_nodes):
        padding = lru.least_recent(n, set(mine[n]), m - len(mine[n]))
        entries = [(e, True) for e in mine[n]] + [(e, False) for e in padding]
        lru.mark(n, [e for e, _ in entries])
        per_node.append(tuple(entries))
    return ScheduleDecision(decision.layer, tuple(per_node), owners)


@dataclass
class Scheduler:
    """Stateful front end over the three scheduling functions."""

    strategy: str
    plan: ShardPlan
    lru: LruState = field(init=False)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise PlacementError(f"unknown strategy {self.strategy!r}; pick one of {STRATEGIES}")
        self.lru = LruState.for_plan(self.plan)

    def __call__(self, decision: RouterDecision) -> ScheduleDecision:
        if self.strategy == NAIVE:
            return schedule_naive(decision, self.plan)
        if self.strategy == BUSY_FULL:
            return schedule_busy_full(decision, self.plan)
        return schedule_router_aided(decision, self.plan, self.lru)


def expected_executed_experts(
    n_nodes: int, n_experts: int, top_k: int, plan: ShardPlan | None = None
) -> Fraction:
    """Exact E[max over nodes of selected experts] under a uniform top-k router."""
    if n_experts > MAX_ENUMERATION_EXPERTS:
        raise PlacementError(
            f"enumerating C({n_experts},{top_k}) selections is limited to {MAX_ENUMERATION_EXPERTS} experts"
        )
    if not 1 <= top_k <= n_experts:
        raise PlacementError(f"top_k must lie in 1..{n_experts}")
    plan = plan or build_shard_plan(n_experts, n_nodes)
    if plan.n_nodes != n_nodes or plan.n_experts != n_experts:
        raise PlacementError("plan does not match the requested node/expert counts")
    total = 0
    for sel in itertools.combinations(range(n_experts), top_k):
        total += max(plan.selected_counts(sel))
    return Fraction(total, math.comb(n_experts, top_k))


def standby_keepalive(
    states: Sequence[WiringState], idle: float, period: float, touch_cost: float = 0.0
) -> int:
    """Idle every node for ``idle`` seconds, touching all its arrays every ``period``.

    Returns the number of arrays that got unwired during the idle window.
    """
    if period <= 0:
        raise ValueError("keepalive period must be positive")
    unwired = 0
    for state in states:
        if period >= state.params.inactivity_threshold:
            raise ValueError("keepalive period must be shorter than the inactivity threshold")
        before = state.unwire_events
        end = state.now + idle
        while state.now < end:
            step = min(period, end - state.now)
            state.advance(step)
            for array_id in list(state.records):
                state.touch(array_id)
                if touch_cost:
                    state.compute(touch_cost, "keepalive")
        unwired += state.unwire_events - before
    return unwired


def idle_without_keepalive(states: Sequence[WiringState], idle: float) -> int:
    unwired = 0
    for state in states:
        before = state.unwire_events
        state.advance(idle)
        unwired += state.unwire_events - before
    return unwired
