from __future__ import annotations

import numpy as np
import pytest

from moe_cluster.model import ExpertWeights, ModelConfig, init_weights
from moe_cluster.weightfile import (
    PRESTACKED,
    UNSTACKED,
    WeightFileError,
    load_weights,
    matrix_filename,
    pack_weights,
    residency_layout,
    save_unstacked,
)


@pytest.fixture(scope="module")
def default_weights():
    return init_weights(ModelConfig(), 21)


@pytest.fixture(scope="module")
def packed(default_weights, tmp_path_factory):
    d = tmp_path_factory.mktemp("unstacked")
    save_unstacked(default_weights.experts, d)
    out = pack_weights(d, tmp_path_factory.mktemp("packed") / "experts.moew")
    return d, out


def test_pack_then_load_is_bitwise_identical(packed):
    d, out = packed
    a = load_weights(d, UNSTACKED)
    b = load_weights(out, PRESTACKED)
    assert sorted(a.experts) == sorted(b.experts) == list(range(16))
    for e in a.experts:
        for layer in range(4):
            for ma, mb in zip(a.experts[e].layer(layer), b.experts[e].layer(layer)):
                assert ma.dtype == mb.dtype == np.float32
                assert ma.shape == mb.shape
                assert ma.tobytes() == mb.tobytes()


def test_loaded_matches_generated(packed, default_weights):
    _, out = packed
    b = load_weights(out, PRESTACKED)
    assert np.array_equal(b.experts[7].v1[2], default_weights.experts[7].v1[2])


def test_registered_array_counts(packed):
    d, out = packed
    assert len(load_weights(d, UNSTACKED).arrays) == 192
    assert len(load_weights(out, PRESTACKED).arrays) == 16


def test_prestacked_region_order(packed, default_weights):
    # per expert: [layer][w1, v1, w2][row-major]
    _, out = packed
    raw = out.read_bytes()
    per = 64 * 128 * 4
    header = 24
    e, layer, mat = 2, 3, 1
    offset = header + ((e * 4 + layer) * 3 + mat) * per
    chunk = np.frombuffer(raw[offset : offset + per], dtype="<f4").reshape(64, 128)
    assert np.array_equal(chunk, default_weights.experts[e].v1[layer])


def test_tiny_prestacked_file_size(tmp_path):
    m = np.arange(4, dtype=np.float32).reshape(2, 2)
    save_unstacked({0: ExpertWeights(0, [m], [m + 1], [m + 2])}, tmp_path / "u")
    out = pack_weights(tmp_path / "u", tmp_path / "p.moew")
    # 24-byte header + three 2x2 float32 matrices
    assert out.stat().st_size == 24 + 3 * 4 * 4


def test_missing_file_is_an_error(tmp_path, default_weights):
    with pytest.raises(WeightFileError):
        load_weights(tmp_path / "nope.moew", PRESTACKED)
    d = tmp_path / "partial"
    save_unstacked({0: default_weights.experts[0]}, d)
    (d / matrix_filename(0, 1, "w2")).unlink()
    with pytest.raises(WeightFileError):
        load_weights(d, UNSTACKED)


def test_header_mismatch_is_an_error(tmp_path, packed):
    _, out = packed
    bad = tmp_path / "bad.moew"
    data = bytearray(out.read_bytes())
    data[0:4] = b"XXXX"
    bad.write_bytes(bytes(data))
    with pytest.raises(WeightFileError):
        load_weights(bad, PRESTACKED)
    bad.write_bytes(out.read_bytes()[:-4])
    with pytest.raises(WeightFileError):
        load_weights(bad, PRESTACKED)


def test_residency_layout_counts():
    assert len(residency_layout(UNSTACKED, list(range(16)), 4, 10)) == 192
    pre = residency_layout(PRESTACKED, list(range(16)), 4, 10)
    assert len(pre) == 16 and pre[0].nbytes == 120
    with pytest.raises(WeightFileError):
        residency_layout("zip", [0], 1, 1)
