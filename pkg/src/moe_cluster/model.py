"""Toy MoE decoder: configuration, seeded weights and the single-process reference."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (
    F32,
    ShapeError,
    argmax,
    as_vector,
    matvec,
    rms_norm,
    silu,
    softmax,
    top_k,
)

MATRIX_NAMES = ("w1", "v1", "w2")
INIT_RANGE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_embed: int = 64
    d_ffn: int = 128
    d_qkv_hidden: int = 64
    n_experts: int = 16
    top_k: int = 4
    vocab_size: int = 256
    precision_bytes: int = 2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k ({self.top_k}) exceeds n_experts ({self.n_experts})")

    # parameter/FLOP counts follow the performance-model variable definitions
    @property
    def bytes_per_expert(self) -> int:
        return self.d_embed * self.d_ffn * 3 * self.n_layers * self.precision_bytes

    @property
    def bytes_self_attention(self) -> int:
        return (self.d_qkv_hidden * self.d_embed + self.d_embed**2) * self.n_layers * self.precision_bytes

    @property
    def flops_per_expert(self) -> int:
        return 2 * self.d_embed * self.d_ffn * 3 * self.n_layers

    @property
    def flops_self_attention(self) -> int:
        # twice the attention parameter bytes, as in the published variable table
        return 2 * self.bytes_self_attention

    @property
    def comm_bytes(self) -> int:
        return self.d_embed * 4 * self.n_layers * self.precision_bytes


@dataclass
class ExpertWeights:
    """One expert's gated-FFN matrices, indexed ``[layer][w1|v1|w2]``."""

    expert_id: int
    w1: list[np.ndarray]
    v1: list[np.ndarray]
    w2: list[np.ndarray]

    def layer(self, layer: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w1[layer], self.v1[layer], self.w2[layer]

    @property
    def n_layers(self) -> int:
        return len(self.w1)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    router: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    seed: int
    embedding: np.ndarray
    unembedding: np.ndarray
    layers: list[LayerWeights]
    experts: dict[int, ExpertWeights]


@dataclass
class RouterDecision:
    layer: int
    expert_indices: list[int]
    gates: np.ndarray

    def __post_init__(self):
        if len(set(self.expert_indices)) != len(self.expert_indices):
            raise ValueError("router decision contains duplicate experts")
        if len(self.gates) != len(self.expert_indices):
            raise ValueError("one gate per selected expert required")

    def gate_of(self, expert: int) -> float:
        return float(self.gates[self.expert_indices.index(expert)])


@dataclass
class KVCache:
    keys: list[list[np.ndarray]]
    values: list[list[np.ndarray]]

    @classmethod
    def empty(cls, n_layers: int) -> KVCache:
        return cls([[] for _ in range(n_layers)], [[] for _ in range(n_layers)])

    def __len__(self) -> int:
        return len(self.keys[0]) if self.keys else 0


def _tensor(seed: int, key: str, shape: tuple[int, ...]) -> np.ndarray:
    # each tensor gets its own stream so a node can regenerate only what it holds
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest, "little")])
    rng = np.random.Generator(np.random.PCG64(ss))
    return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(F32)


def init_expert(config: ModelConfig, seed: int, expert: int) -> ExpertWeights:
    d, f = config.d_embed, config.d_ffn
    w1, v1, w2 = [], [], []
    for layer in range(config.n_layers):
        w1.append(_tensor(seed, f"expert{expert}.layer{layer}.w1", (d, f)))
        v1.append(_tensor(seed, f"expert{expert}.layer{layer}.v1", (d, f)))
        w2.append(_tensor(seed, f"expert{expert}.layer{layer}.w2", (f, d)))
    return ExpertWeights(expert, w1, v1, w2)


def init_weights(config: ModelConfig, seed: int, experts: list[int] | None = None) -> ModelWeights:
    """Regenerate the model from ``(config, seed)``.

    ``experts`` restricts which expert weights are materialized; attention,
    router and embeddings are always built since every node replicates them.
    """
    d, h = config.d_embed, config.d_qkv_hidden
    layers = []
    for layer in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=_tensor(seed, f"layer{layer}.wq", (d, h)),
                wk=_tensor(seed, f"layer{layer}.wk", (d, h)),
                wv=_tensor(seed, f"layer{layer}.wv", (d, h)),
                wo=_tensor(seed, f"layer{layer}.wo", (h, d)),
                router=_tensor(seed, f"layer{layer}.router", (d, config.n_experts)),
            )
        )
    wanted = range(config.n_experts) if experts is None else experts
    return ModelWeights(
        config=config,
        seed=seed,
        embedding=_tensor(seed, "embedding", (config.vocab_size, d)),
        unembedding=_tensor(seed, "unembedding", (d, config.vocab_size)),
        layers=layers,
        experts={e: init_expert(config, seed, e) for e in wanted},
    )


def expert_forward(x: np.ndarray, expert: ExpertWeights, layer: int) -> np.ndarray:
    """Gated FFN: ``(silu(x @ W1) * (x @ V1)) @ W2``."""
    x = as_vector(x)
    w1, v1, w2 = expert.layer(layer)
    if w1.shape != v1.shape or w1.shape[1] != w2.shape[0] or w2.shape[1] != x.shape[0]:
        raise ShapeError(f"expert {expert.expert_id} layer {layer}: inconsistent matrix shapes")
    hidden = (silu(matvec(x, w1)) * matvec(x, v1)).astype(F32)
    return matvec(hidden, w2)


def route(h: np.ndarray, layer_weights: LayerWeights, k: int, layer: int) -> RouterDecision:
    indices, gates = top_k(matvec(h, layer_weights.router), k)
    return RouterDecision(layer, indices, gates)


def gated_contribution(gate: float, y: np.ndarray) -> np.ndarray:
    return (F32(gate) * y).astype(F32)


def combine_contributions(contributions: dict[int, np.ndarray], d_embed: int) -> np.ndarray:
    """Weighted-sum step: add per-expert contributions in ascending expert id.

    Every process that holds the same contributions gets the same bits,
    whichever node produced them.
    """
    acc = np.zeros(d_embed, dtype=F32)
    for expert in sorted(contributions):
        acc = (acc + contributions[expert]).astype(F32)
    return acc


def moe_layer_reference(
    h: np.ndarray,
    layer_weights: LayerWeights,
    experts: dict[int, ExpertWeights],
    layer: int,
    k: int,
) -> tuple[np.ndarray, RouterDecision]:
    decision = route(h, layer_weights, k, layer)
    contributions = {
        e: gated_contribution(g, expert_forward(h, experts[e], layer))
        for e, g in zip(decision.expert_indices, decision.gates.tolist())
    }
    return combine_contributions(contributions, h.shape[0]), decision


def attention_block(
    x: np.ndarray, layer_weights: LayerWeights, cache: KVCache, layer: int
) -> np.ndarray:
    """Pre-norm single-head causal attention with residual; appends to ``cache``."""
    h = rms_norm(x)
    q = matvec(h, layer_weights.wq)
    cache.keys[layer].append(matvec(h, layer_weights.wk))
    cache.values[layer].append(matvec(h, layer_weights.wv))
    keys_t = np.ascontiguousarray(np.stack(cache.keys[layer], axis=1))
    scores = (matvec(q, keys_t) * F32(1.0 / math.sqrt(q.shape[0]))).astype(F32)
    probs = softmax(scores)
    context = matvec(probs, np.ascontiguousarray(np.stack(cache.values[layer], axis=0)))
    return (x + matvec(context, layer_weights.wo)).astype(F32)


def embed(weights: ModelWeights, token: int) -> np.ndarray:
    if not 0 <= token < weights.config.vocab_size:
        raise ValueError(f"token {token} outside vocabulary of {weights.config.vocab_size}")
    return weights.embedding[token].copy()


def next_token(weights: ModelWeights, x: np.ndarray) -> int:
    return argmax(matvec(rms_norm(x), weights.unembedding))


@dataclass
class ReferenceTrace:
    tokens: list[int] = field(default_factory=list)
    # per processed position, per layer: output activation
    activations: list[list[np.ndarray]] = field(default_factory=list)
    decisions: list[list[RouterDecision]] = field(default_factory=list)


def decoder_layer_reference(
    weights: ModelWeights, x: np.ndarray, layer: int, cache: KVCache
) -> tuple[np.ndarray, RouterDecision]:
    lw = weights.layers[layer]
    x = attention_block(x, lw, cache, layer)
    moe, decision = moe_layer_reference(rms_norm(x), lw, weights.experts, layer, weights.config.top_k)
    return (x + moe).astype(F32), decision


def generate_reference(
    weights: ModelWeights, prompt: list[int], n_out: int, trace: ReferenceTrace | None = None
) -> list[int]:
    """Greedy decoding with every expert in one process."""
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    if n_out == 0:
        return []
    cache = KVCache.empty(weights.config.n_layers)
    out: list[int] = []
    pending = list(prompt)
    token = None
    while len(out) < n_out:
        for token_in in pending:
            x = embed(weights, token_in)
            per_layer, decisions = [], []
            for layer in range(weights.config.n_layers):
                x, decision = decoder_layer_reference(weights, x, layer, cache)
                per_layer.append(x)
                decisions.append(decision)
            if trace is not None:
                trace.activations.append(per_layer)
                trace.decisions.append(decisions)
        token = next_token(weights, x)
        out.append(token)
        pending = [token]
    if trace is not None:
        trace.tokens = list(out)
    return out
