"""Binary frames exchanged between nodes.

    length   u32  big-endian, bytes that follow
    msg_type u8
    layer    u32  little-endian
    node_id  u32  little-endian (sender)
    seq      u64  little-endian (per-sender counter)
    payload  length - 17 bytes
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

LENGTH = struct.Struct(">I")
HEADER = struct.Struct("<BIIQ")
HEADER_SIZE = HEADER.size  # 17
MAX_FRAME = 64 * 1024 * 1024


class ProtocolError(ValueError):
    pass


class MsgType(enum.IntEnum):
    EXPERT_INPUT = 1
    EXPERT_PARTIAL = 2
    MAX_ANNOUNCE = 3
    TOKEN_SYNC = 4
    HELLO = 5
    SHUTDOWN = 6


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    layer: int = 0
    node_id: int = 0
    seq: int = 0
    payload: bytes = b""

    @property
    def length(self) -> int:
        return HEADER_SIZE + len(self.payload)


def encode_frame(f: Frame) -> bytes:
    if f.length > MAX_FRAME:
        raise ProtocolError(f"frame of {f.length} bytes exceeds the {MAX_FRAME}-byte limit")
    try:
        header = HEADER.pack(int(f.msg_type), f.layer, f.node_id, f.seq)
    except struct.error as exc:
        raise ProtocolError(f"header field out of range: {exc}") from None
    return LENGTH.pack(f.length) + header + f.payload


def decode_body(body: bytes) -> Frame:
    """Decode everything after the length prefix."""
    if len(body) < HEADER_SIZE:
        raise ProtocolError(f"frame body of {len(body)} bytes is shorter than the {HEADER_SIZE}-byte header")
    raw_type, layer, node_id, seq = HEADER.unpack_from(body)
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {raw_type}") from None
    return Frame(msg_type, layer, node_id, seq, bytes(body[HEADER_SIZE:]))


def decode_frame(data: bytes) -> Frame:
    if len(data) < LENGTH.size:
        raise ProtocolError("truncated length prefix")
    (length,) = LENGTH.unpack_from(data)
    if length > MAX_FRAME:
        raise ProtocolError(f"declared length {length} exceeds the {MAX_FRAME}-byte limit")
    body = data[LENGTH.size :]
    if len(body) < length:
        raise ProtocolError(f"truncated frame: expected {length} bytes, got {len(body)}")
    if len(body) > length:
        raise ProtocolError(f"{len(body) - length} trailing bytes after frame")
    return decode_body(body)


def read_frame(recv_exactly) -> Frame:
    """Read one frame using ``recv_exactly(n) -> bytes`` (raises EOFError on a closed stream)."""
    (length,) = LENGTH.unpack(recv_exactly(LENGTH.size))
    if length > MAX_FRAME:
        raise ProtocolError(f"declared length {length} exceeds the {MAX_FRAME}-byte limit")
    return decode_body(recv_exactly(length))


# -- payloads ----------------------------------------------------------------

_U32 = struct.Struct("<I")
_ENTRY = struct.Struct("<If")


def pack_vector(v: np.ndarray) -> bytes:
    return np.ascontiguousarray(v, dtype="<f4").tobytes()


def unpack_vector(payload: bytes, d: int | None = None) -> np.ndarray:
    if len(payload) % 4:
        raise ProtocolError("vector payload is not a whole number of float32 values")
    v = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if d is not None and v.shape[0] != d:
        raise ProtocolError(f"expected {d} values, got {v.shape[0]}")
    return v


def pack_expert_input(x: np.ndarray, max_count: int, entries: list[tuple[int, float]]) -> bytes:
    """Activation for a worker plus the (expert, gate) pairs it owns this layer."""
    out = [_U32.pack(x.shape[0]), pack_vector(x), _U32.pack(max_count), _U32.pack(len(entries))]
    out.extend(_ENTRY.pack(e, g) for e, g in entries)
    return b"".join(out)


def unpack_expert_input(payload: bytes) -> tuple[np.ndarray, int, list[tuple[int, float]]]:
    try:
        (d,) = _U32.unpack_from(payload, 0)
        off = 4 + 4 * d
        x = unpack_vector(payload[4:off], d)
        (max_count,) = _U32.unpack_from(payload, off)
        (count,) = _U32.unpack_from(payload, off + 4)
        off += 8
        if len(payload) != off + count * _ENTRY.size:
            raise ProtocolError("EXPERT_INPUT payload length does not match its entry count")
        entries = [_ENTRY.unpack_from(payload, off + i * _ENTRY.size) for i in range(count)]
    except struct.error as exc:
        raise ProtocolError(f"malformed EXPERT_INPUT payload: {exc}") from None
    return x, max_count, [(int(e), float(g)) for e, g in entries]


def pack_max_announce(m: int) -> bytes:
    return _U32.pack(m)


def unpack_max_announce(payload: bytes) -> int:
    if len(payload) != 4:
        raise ProtocolError("MAX_ANNOUNCE payload must be one u32")
    return _U32.unpack(payload)[0]


def pack_token_sync(token: int, checksums: list[int]) -> bytes:
    return struct.pack(f"<II{len(checksums)}Q", token, len(checksums), *checksums)


def unpack_token_sync(payload: bytes) -> tuple[int, list[int]]:
    if len(payload) < 8:
        raise ProtocolError("TOKEN_SYNC payload too short")
    token, n = struct.unpack_from("<II", payload)
    if len(payload) != 8 + 8 * n:
        raise ProtocolError("TOKEN_SYNC payload length does not match its checksum count")
    return token, list(struct.unpack_from(f"<{n}Q", payload, 8))
