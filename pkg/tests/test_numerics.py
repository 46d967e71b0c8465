from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moe_cluster.numerics import (
    ShapeError,
    argmax,
    matvec,
    rms_norm,
    silu,
    softmax,
    top_k,
    weighted_accumulate,
)

F32 = np.float32
finite = st.floats(-10, 10, allow_nan=False, width=32)


def naive_matvec(x, w):
    # scalar float32 triple loop, ascending i
    n, m = w.shape
    out = []
    for j in range(m):
        acc = F32(0.0)
        for i in range(n):
            acc = F32(acc + F32(x[i]) * F32(w[i, j]))
        out.append(acc)
    return np.array(out, dtype=F32)


def test_matvec_identity():
    assert matvec([1, 0], np.eye(2)).tolist() == [1.0, 0.0]


def test_matvec_all_ones():
    assert matvec([1, 2], [[1, 1], [1, 1]]).tolist() == [3.0, 3.0]


def test_matvec_random_matches_scalar_loop_bitwise():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.uniform(-1, 1, 8).astype(F32)
        w = rng.uniform(-1, 1, (8, 8)).astype(F32)
        assert np.array_equal(matvec(x, w), naive_matvec(x, w))


def test_matvec_rectangular_matches_scalar_loop_bitwise():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, 37).astype(F32)
    w = rng.uniform(-1, 1, (37, 5)).astype(F32)
    assert np.array_equal(matvec(x, w), naive_matvec(x, w))


def test_matvec_dimension_mismatch():
    with pytest.raises(ShapeError):
        matvec([1, 2, 3], np.eye(2))


@given(
    arrays(F32, 6, elements=finite),
    arrays(F32, 6, elements=finite),
    arrays(F32, (6, 4), elements=finite),
)
def test_matvec_distributes_over_addition(x, y, w):
    lhs = matvec((x + y).astype(F32), w).astype(np.float64)
    rhs = matvec(x, w).astype(np.float64) + matvec(y, w).astype(np.float64)
    scale = np.abs(x).astype(np.float64) @ np.abs(w) + np.abs(y).astype(np.float64) @ np.abs(w) + 1e-6
    assert np.all(np.abs(lhs - rhs) <= 1e-5 * scale + 1e-6)


def test_top_k_single_dominant():
    idx, gates = top_k([0, 0, 0, 10], 1)
    assert idx == [3] and gates.tolist() == [1.0]


def test_top_k_ties_go_to_lowest_index():
    idx, gates = top_k([1, 1, 1, 1], 2)
    assert idx == [0, 1]
    assert gates.tolist() == [0.5, 0.5]


def test_top_k_renormalized_gates():
    idx, gates = top_k([3, 1, 2, 0], 2)
    assert idx == [0, 2]
    # softmax([3, 2]) = [1/(1+e^-1), 1 - that]
    assert gates[0] == pytest.approx(0.7310585786, abs=1e-6)
    assert gates[1] == pytest.approx(0.2689414214, abs=1e-6)


@pytest.mark.parametrize("k", [0, 5, -1])
def test_top_k_rejects_bad_k(k):
    with pytest.raises(ValueError):
        top_k([1, 2, 3, 4], k)


@given(arrays(F32, st.integers(1, 24), elements=finite), st.data())
def test_top_k_properties(logits, data):
    k = data.draw(st.integers(1, logits.shape[0]))
    idx, gates = top_k(logits, k)
    assert len(idx) == k
    assert all(a < b for a, b in zip(idx, idx[1:]))
    assert abs(float(np.sum(gates, dtype=np.float64)) - 1.0) <= 1e-6
    assert int(np.argmax(logits)) in idx
    # every unselected logit is no larger than every selected one
    rest = [logits[i] for i in range(len(logits)) if i not in idx]
    if rest:
        assert max(rest) <= min(logits[i] for i in idx)


def test_silu_zero():
    assert silu(np.array([0.0], dtype=F32)).tolist() == [0.0]


def test_silu_matches_definition():
    xs = np.linspace(-6, 6, 25).astype(F32)
    expected = [x / (1 + math.exp(-x)) for x in xs.astype(np.float64)]
    assert np.allclose(silu(xs), expected, atol=1e-6)


def test_softmax_symmetric():
    assert softmax([0, 0]).tolist() == [0.5, 0.5]


def test_softmax_sums_to_one():
    assert abs(float(np.sum(softmax([1, 2, 3]), dtype=np.float64)) - 1.0) <= 1e-7


@given(arrays(F32, st.integers(1, 16), elements=finite), st.floats(-20, 20, allow_nan=False))
def test_softmax_shift_invariant(x, c):
    a = softmax(x)
    b = softmax((x.astype(np.float64) + c).astype(F32))
    assert np.allclose(a, b, atol=1e-6)


@given(arrays(F32, st.integers(1, 16), elements=finite))
def test_softmax_is_a_distribution(x):
    p = softmax(x)
    assert np.all(p >= 0) and np.all(p <= 1)
    assert abs(float(np.sum(p, dtype=np.float64)) - 1.0) <= 1e-6


def test_exp_result_independent_of_vector_length():
    # the same logits embedded in vectors of different lengths give the same gate bits
    a = softmax([0.3, -1.2])
    b = softmax([0.3, -1.2, -200.0])
    assert a[0] == pytest.approx(b[0], abs=0)


def test_rms_norm_unit_scale():
    y = rms_norm(np.full(4, 2.0, dtype=F32), eps=0.0)
    assert np.allclose(y, 1.0)


def test_argmax_first_on_ties():
    assert argmax([1, 3, 3]) == 1


def test_weighted_accumulate():
    out = weighted_accumulate([np.ones(2, F32), np.full(2, 2, F32)], [0.5, 0.25])
    assert out.tolist() == [1.0, 1.0]
    with pytest.raises(ShapeError):
        weighted_accumulate([np.ones(2, F32)], [1.0, 2.0])
