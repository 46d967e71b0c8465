"""Dense float32 kernels used by the toy MoE decoder.

Every reduction runs sequentially in ascending index order so that two
processes fed identical inputs produce identical bits.
"""
from __future__ import annotations

import math
from typing import Sequence

import numba
import numpy as np

F32 = np.float32


class ShapeError(ValueError):
    pass


def as_vector(x: Sequence[float] | np.ndarray) -> np.ndarray:
    v = np.ascontiguousarray(x, dtype=F32)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    return v


def as_matrix(w: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    m = np.ascontiguousarray(w, dtype=F32)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


@numba.njit(cache=True)
def _matvec_kernel(x, w):
    n, m = w.shape
    out = np.zeros(m, dtype=np.float32)
    for i in range(n):
        xi = x[i]
        for j in range(m):
            out[j] += xi * w[i, j]
    return out


@numba.njit(cache=True)
def _sumsq_kernel(x):
    acc = np.float32(0.0)
    for i in range(x.shape[0]):
        acc += x[i] * x[i]
    return acc


def matvec(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-vector times matrix: ``out[j] = sum_i x[i] * w[i, j]``.

    Accumulates in float32 over ``i`` in ascending order.
    """
    x = as_vector(x)
    w = as_matrix(w)
    if x.shape[0] != w.shape[0]:
        raise ShapeError(f"matvec: x has {x.shape[0]} entries but W has {w.shape[0]} rows")
    return _matvec_kernel(x, w)


def vec_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"vec_add: {a.shape} vs {b.shape}")
    return (a + b).astype(F32, copy=False)


def _exp(values: np.ndarray) -> np.ndarray:
    # libm per element: keeps results independent of array length/alignment
    return np.array([math.exp(v) for v in values.astype(np.float64).tolist()], dtype=np.float64)


def silu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    x64 = x.astype(np.float64)
    return (x64 / (1.0 + _exp(-x64))).astype(F32)


def softmax(x: np.ndarray) -> np.ndarray:
    x = as_vector(x).astype(np.float64)
    e = _exp(x - x.max())
    total = 0.0
    for v in e.tolist():
        total += v
    return (e / total).astype(F32)


def rms_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = as_vector(x)
    mean_sq = float(_sumsq_kernel(x)) / x.shape[0]
    scale = F32(1.0 / math.sqrt(mean_sq + eps))
    return (x * scale).astype(F32)


def top_k(logits: np.ndarray, k: int) -> tuple[list[int], np.ndarray]:
    """Indices of the ``k`` largest logits (ascending) and their renormalized gates.

    Ties go to the lowest index. Gates are a softmax over the selected logits only.
    """
    logits = as_vector(logits)
    n = logits.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"top_k: need 1 <= k <= {n}, got k={k}")
    # stable sort on -logit keeps the lower index first among equal values
    order = sorted(range(n), key=lambda i: (-float(logits[i]), i))
    chosen = sorted(order[:k])
    gates = softmax(logits[chosen])
    return chosen, gates


def argmax(x: np.ndarray) -> int:
    x = as_vector(x)
    return int(np.argmax(x))  # numpy returns the first maximal index


def weighted_accumulate(vectors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """``sum_j weights[j] * vectors[j]`` accumulated in the given order."""
    if len(vectors) != len(weights):
        raise ShapeError("weighted_accumulate: vectors and weights differ in length")
    if not vectors:
        raise ShapeError("weighted_accumulate: nothing to accumulate")
    acc = np.zeros_like(as_vector(vectors[0]))
    for v, w in zip(vectors, weights):
        if v.shape != acc.shape:
            raise ShapeError("weighted_accumulate: ragged vectors")
        acc = (acc + F32(w) * v).astype(F32)
    return acc
