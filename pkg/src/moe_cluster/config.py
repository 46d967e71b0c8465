"""Run configuration files (JSON) and the roster environment override.

Example::

    {
      "seed": 7,
      "model": {"n_layers": 4, "d_embed": 64, "n_experts": 16, "top_k": 4},
      "cluster": {"n_nodes": 2, "mode": "decentralized", "strategy": "router-aided",
                  "transport": "sim", "replication": 1,
                  "roster": ["127.0.0.1:7100", "127.0.0.1:7101"]},
      "transport": {"latency": 0.001, "bandwidth": 1.25e9},
      "wiring": {"wire_bandwidth": 4e10, "wire_base_latency": 0.0001, "inactivity_threshold": 0.4},
      "tokens": {"prompt": [1, 2, 3], "gen_tokens": 8}
    }

Every section and key is optional; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .model import ModelConfig
from .runtime import ClusterConfig
from .transport import TransportParams
from .wiring import WiringParams

ROSTER_ENV = "MOE_CLUSTER_ROSTER"

_CLUSTER_KEYS = {
    "n_nodes", "mode", "strategy", "packing", "warmup", "replication",
    "transport", "roster", "idle_before_s", "keepalive_period_s", "timeout_s",
}
_SECTIONS = {"seed", "model", "cluster", "transport", "wiring", "tokens"}


class ConfigError(ValueError):
    pass


def parse_roster(text: str | list) -> tuple[tuple[str, int], ...]:
    """``"host:port,host:port"`` (or a list of such strings) to ``((host, port), ...)``."""
    items = text.split(",") if isinstance(text, str) else list(text)
    roster = []
    for item in items:
        item = item.strip()
        host, sep, port = item.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ConfigError(f"roster entry {item!r} is not host:port")
        roster.append((host, int(port)))
    return tuple(roster)


def _build(cls, values: Mapping[str, Any], section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}; allowed: {sorted(names)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    seed: int = 0
    cluster: Mapping[str, Any] = field(default_factory=dict)
    transport: TransportParams = TransportParams()
    wiring: WiringParams = WiringParams()
    prompt: tuple[int, ...] = (1, 2, 3)
    gen_tokens: int = 8

    def cluster_config(self, **overrides) -> ClusterConfig:
        """Merge file values with command-line overrides (``None`` means not given)."""
        values = dict(self.cluster)
        values.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(values) - _CLUSTER_KEYS
        if unknown:
            raise ConfigError(f"unknown key(s) in [cluster]: {sorted(unknown)}; allowed: {sorted(_CLUSTER_KEYS)}")
        if "roster" in values:
            values["roster"] = parse_roster(values["roster"]) if values["roster"] else ()
        env = os.environ.get(ROSTER_ENV)
        if env:
            values["roster"] = parse_roster(env)
        if values.get("roster") and "n_nodes" not in overrides and "n_nodes" not in self.cluster:
            values["n_nodes"] = len(values["roster"])
        try:
            return ClusterConfig(
                model=self.model,
                seed=self.seed,
                transport_params=self.transport,
                wiring=self.wiring,
                **values,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid cluster settings: {exc}") from None


def parse_config(raw: Mapping[str, Any]) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config file must contain a JSON object")
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}; allowed: {sorted(_SECTIONS)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    model = _build(ModelConfig, raw.get("model", {}), "model")
    cluster = dict(raw.get("cluster", {}))
    unknown = set(cluster) - _CLUSTER_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) in [cluster]: {sorted(unknown)}; allowed: {sorted(_CLUSTER_KEYS)}")
    transport = _build(TransportParams, raw.get("transport", {}), "transport")
    wiring = _build(WiringParams, raw.get("wiring", {}), "wiring")
    tokens = dict(raw.get("tokens", {}))
    extra = set(tokens) - {"prompt", "gen_tokens"}
    if extra:
        raise ConfigError(f"unknown key(s) in [tokens]: {sorted(extra)}; allowed: ['gen_tokens', 'prompt']")
    prompt = tuple(tokens.get("prompt", (1, 2, 3)))
    if not prompt or any(not isinstance(t, int) or not 0 <= t < model.vocab_size for t in prompt):
        raise ConfigError(f"prompt must be a non-empty list of token ids in [0, {model.vocab_size})")
    gen = tokens.get("gen_tokens", 8)
    if not isinstance(gen, int) or gen < 0:
        raise ConfigError("gen_tokens must be a non-negative integer")
    return RunConfig(model, seed, cluster, transport, wiring, prompt, gen)


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return parse_config(raw)
