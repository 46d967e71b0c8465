from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moe_cluster.protocol import (
    HEADER_SIZE,
    MAX_FRAME,
    Frame,
    MsgType,
    ProtocolError,
    decode_frame,
    encode_frame,
    pack_expert_input,
    pack_max_announce,
    pack_token_sync,
    pack_vector,
    read_frame,
    unpack_expert_input,
    unpack_max_announce,
    unpack_token_sync,
    unpack_vector,
)

frames = st.builds(
    Frame,
    st.sampled_from(list(MsgType)),
    st.integers(0, 2**32 - 1),
    st.integers(0, 2**32 - 1),
    st.integers(0, 2**64 - 1),
    st.binary(max_size=512),
)


@given(frames)
def test_frame_round_trip(frame):
    data = encode_frame(frame)
    assert len(data) == 4 + frame.length
    assert decode_frame(data) == frame


@given(st.lists(frames, max_size=8))
def test_stream_of_frames(frame_list):
    stream = io.BytesIO(b"".join(encode_frame(f) for f in frame_list))

    def recv_exactly(n):
        chunk = stream.read(n)
        if len(chunk) < n:
            raise EOFError
        return chunk

    assert [read_frame(recv_exactly) for _ in frame_list] == frame_list


def test_hello_layout():
    data = encode_frame(Frame(MsgType.HELLO, layer=0, node_id=3, seq=1))
    assert HEADER_SIZE == 17
    assert data[:4] == (17).to_bytes(4, "big")
    assert data[4] == MsgType.HELLO
    assert data[5:9] == (0).to_bytes(4, "little")
    assert data[9:13] == (3).to_bytes(4, "little")
    assert data[13:21] == (1).to_bytes(8, "little")
    assert len(data) == 21


def test_partial_payload_is_d_floats():
    v = np.arange(64, dtype=np.float32) / 7
    payload = pack_vector(v)
    assert len(payload) == 64 * 4
    assert unpack_vector(payload, 64).tobytes() == v.tobytes()
    assert len(encode_frame(Frame(MsgType.EXPERT_PARTIAL, payload=payload))) == 4 + 17 + 256


def test_decode_errors():
    good = encode_frame(Frame(MsgType.TOKEN_SYNC, payload=b"abcd"))
    with pytest.raises(ProtocolError):
        decode_frame(good[:-1])
    with pytest.raises(ProtocolError):
        decode_frame(good + b"x")
    with pytest.raises(ProtocolError):
        decode_frame(good[:2])
    bad_type = bytearray(good)
    bad_type[4] = 99
    with pytest.raises(ProtocolError, match="msg_type"):
        decode_frame(bytes(bad_type))
    with pytest.raises(ProtocolError):
        decode_frame((MAX_FRAME + 1).to_bytes(4, "big") + b"\0" * 17)
    with pytest.raises(ProtocolError):
        decode_frame((5).to_bytes(4, "big") + b"\0" * 5)


def test_encode_rejects_out_of_range_header():
    with pytest.raises(ProtocolError):
        encode_frame(Frame(MsgType.HELLO, layer=2**32))


@given(
    st.lists(st.floats(-1e3, 1e3, width=32), min_size=1, max_size=32),
    st.integers(0, 16),
    st.lists(st.tuples(st.integers(0, 15), st.floats(0, 1, width=32)), max_size=4),
)
def test_expert_input_round_trip(xs, m, entries):
    x = np.array(xs, dtype=np.float32)
    got_x, got_m, got_entries = unpack_expert_input(pack_expert_input(x, m, entries))
    assert got_x.tobytes() == x.tobytes()
    assert got_m == m
    assert got_entries == [(e, float(np.float32(g))) for e, g in entries]


def test_expert_input_length_mismatch():
    payload = pack_expert_input(np.zeros(4, np.float32), 1, [(0, 0.5)])
    with pytest.raises(ProtocolError):
        unpack_expert_input(payload[:-1])


def test_small_payloads():
    assert unpack_max_announce(pack_max_announce(3)) == 3
    with pytest.raises(ProtocolError):
        unpack_max_announce(b"\0")
    assert unpack_token_sync(pack_token_sync(5, [1, 2**64 - 1])) == (5, [1, 2**64 - 1])
    with pytest.raises(ProtocolError):
        unpack_token_sync(pack_token_sync(5, [1])[:-1])
    with pytest.raises(ProtocolError):
        unpack_vector(b"abc")
    with pytest.raises(ProtocolError):
        unpack_vector(b"\0" * 8, 3)
