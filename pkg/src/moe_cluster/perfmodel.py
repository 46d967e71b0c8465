"""Closed-form per-token lower bound for expert-parallel decoding, and cost efficiency.

    time = max(GPU load, GPU compute) + comm latency * layers + comm data / comm bandwidth

where the GPU terms charge the self-attention weights plus ``E`` experts,
``E`` being the mean number of experts a node executes per layer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from typing import Iterable, Mapping

from .model import ModelConfig


@dataclass(frozen=True)
class PerfParams:
    params_sa: float = 7e9
    params_per_expert: float = 16e9
    flops_sa: float = 14e9
    flops_per_expert: float = 16e9
    n_layers: int = 40
    mem_bandwidth: float = 800e9
    gpu_flops: float = 54e12
    comm_latency: float = 1e-3
    comm_bandwidth: float = 1.25e9
    comm_data: float = 2e6
    expected_experts: float = 2.65

    def __post_init__(self):
        for name in ("params_sa", "params_per_expert", "flops_sa", "flops_per_expert", "comm_data", "expected_experts"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("mem_bandwidth", "gpu_flops", "comm_bandwidth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.comm_latency < 0 or self.n_layers < 1:
            raise ValueError("comm_latency must be >= 0 and n_layers >= 1")

    def with_nic(self, nic: Nic) -> PerfParams:
        return replace(self, comm_latency=nic.latency_s, comm_bandwidth=nic.bandwidth_Bps)


@dataclass(frozen=True)
class PerfEstimate:
    gpu_load_s: float
    gpu_compute_s: float
    comm_latency_s: float
    transfer_s: float
    total_s: float
    throughput_tps: float


def estimate(p: PerfParams) -> PerfEstimate:
    load = (p.params_sa + p.params_per_expert * p.expected_experts) / p.mem_bandwidth
    compute = (p.flops_sa + p.flops_per_expert * p.expected_experts) / p.gpu_flops
    latency = p.comm_latency * p.n_layers
    transfer = p.comm_data / p.comm_bandwidth
    total = max(load, compute) + latency + transfer
    return PerfEstimate(load, compute, latency, transfer, total, 1.0 / total if total > 0 else math.inf)


@dataclass(frozen=True)
class DerivedParams:
    params_sa: int
    params_per_expert: int
    flops_sa: int
    flops_per_expert: int
    comm_data: int


def derive_params(config: ModelConfig) -> DerivedParams:
    return DerivedParams(
        params_sa=config.bytes_self_attention,
        params_per_expert=config.bytes_per_expert,
        flops_sa=config.flops_self_attention,
        flops_per_expert=config.flops_per_expert,
        comm_data=config.comm_bytes,
    )


DBRX = ModelConfig(
    n_layers=40, d_embed=6144, d_ffn=10752, d_qkv_hidden=8192, n_experts=16, top_k=4, vocab_size=100352
)


def params_from_config(config: ModelConfig, **hardware) -> PerfParams:
    d = derive_params(config)
    return PerfParams(
        params_sa=d.params_sa,
        params_per_expert=d.params_per_expert,
        flops_sa=d.flops_sa,
        flops_per_expert=d.flops_per_expert,
        comm_data=d.comm_data,
        n_layers=config.n_layers,
        **hardware,
    )


# -- cost efficiency ---------------------------------------------------------


@dataclass(frozen=True)
class CostSpec:
    n_nodes: int
    price_per_node: float
    throughput: float
    label: str = ""

    def __post_init__(self):
        if self.n_nodes < 1 or self.price_per_node <= 0 or self.throughput < 0:
            raise ValueError("cost spec needs n_nodes >= 1, a positive price and throughput >= 0")


def cost_efficiency(c: CostSpec) -> float:
    """Tokens per second per USD of hardware."""
    return c.throughput / (c.n_nodes * c.price_per_node)


def load_cost_specs(path=None) -> list[CostSpec]:
    if path is None:
        text = resources.files("moe_cluster.data").joinpath("cost_table5.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    rows = json.loads(text)
    return [
        CostSpec(int(r["n_nodes"]), float(r["price_per_node"]), float(r["throughput"]), r.get("solution", ""))
        for r in rows
    ]


# -- sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class Nic:
    name: str
    latency_s: float
    bandwidth_Bps: float
    price_usd: float


def load_nics() -> dict[str, Nic]:
    raw = json.loads(resources.files("moe_cluster.data").joinpath("nics.json").read_text())
    return {
        name: Nic(name, float(v["latency_s"]), float(v["bandwidth_Bps"]), float(v["price_usd"]))
        for name, v in raw.items()
    }


def recover_expected_experts(load_s: float, p: PerfParams = PerfParams()) -> float:
    """Invert the GPU-load term for E."""
    return (load_s * p.mem_bandwidth - p.params_sa) / p.params_per_expert


def default_expected_experts() -> dict[int, float]:
    raw = json.loads(resources.files("moe_cluster.data").joinpath("expected_experts.json").read_text())
    table = {int(n): float(e) for n, e in raw["measured"].items()}
    for n, load in raw["load_s_for_reconstruction"].items():
        table[int(n)] = recover_expected_experts(float(load))
    return dict(sorted(table.items()))


@dataclass(frozen=True)
class SweepRow:
    n_nodes: int
    nic: str
    expected_experts: float
    estimate: PerfEstimate


def sweep_nodes(
    nodes: Iterable[int],
    expected: Mapping[int, float] | None = None,
    base: PerfParams = PerfParams(),
    nic: Nic | None = None,
) -> list[SweepRow]:
    expected = default_expected_experts() if expected is None else expected
    rows = []
    for n in nodes:
        if n not in expected:
            raise KeyError(f"no expected-experts value for {n} nodes")
        p = replace(base, expected_experts=expected[n])
        if nic is not None:
            p = p.with_nic(nic)
        rows.append(SweepRow(n, nic.name if nic else "custom", expected[n], estimate(p)))
    return rows


def sweep_nic(
    nics: Iterable[Nic],
    nodes: Iterable[int] = (2, 3, 4, 6, 8),
    expected: Mapping[int, float] | None = None,
    base: PerfParams = PerfParams(),
) -> list[SweepRow]:
    nodes = list(nodes)
    rows = []
    for nic in nics:
        rows.extend(sweep_nodes(nodes, expected, base, nic))
    return rows


TABLE_COLUMNS = ("nodes", "nic", "E", "load_s", "compute_s", "latency_s", "transfer_s", "total_s", "tp_tokens_per_s")


def table_row(row: SweepRow) -> dict[str, object]:
    est = row.estimate
    return {
        "nodes": row.n_nodes,
        "nic": row.nic,
        "E": round(row.expected_experts, 4),
        "load_s": round(est.gpu_load_s, 4),
        "compute_s": round(est.gpu_compute_s, 4),
        "latency_s": round(est.comm_latency_s, 6),
        "transfer_s": round(est.transfer_s, 6),
        "total_s": round(est.total_s, 3),
        "tp_tokens_per_s": round(est.throughput_tps, 1),
    }
