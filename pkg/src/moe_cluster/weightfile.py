"""Expert weight files, one-per-matrix ("unstacked") or one region per expert ("prestacked").

Layout, all little-endian::

    magic   4s   b"MOEW"
    version u16
    kind    u16  1 = single matrix, 2 = prestacked experts

    kind 1:  expert u32, layer u32, matrix u32 (0=w1, 1=v1, 2=w2), rows u32, cols u32
    kind 2:  n_experts u32, n_layers u32, d_embed u32, d_ffn u32

followed by float32 row-major payload. A prestacked payload stores, for each
expert in ascending id, ``[layer][w1, v1, w2][row-major data]`` contiguously.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MATRIX_NAMES, ExpertWeights

MAGIC = b"MOEW"
VERSION = 1
KIND_MATRIX = 1
KIND_PRESTACKED = 2

_MATRIX_HEADER = struct.Struct("<4sHHIIIII")
_STACK_HEADER = struct.Struct("<4sHHIIII")

UNSTACKED = "unstacked"
PRESTACKED = "prestacked"


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class ResidentArray:
    """One array the memory driver sees as a unit of residency."""

    array_id: str
    nbytes: int


@dataclass
class LoadedExperts:
    experts: dict[int, ExpertWeights]
    arrays: list[ResidentArray]
    format: str


def matrix_filename(expert: int, layer: int, matrix: str) -> str:
    return f"expert{expert:03d}_layer{layer:03d}_{matrix}.moew"


def write_matrix(path: str | os.PathLike, expert: int, layer: int, matrix: str, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    rows, cols = data.shape
    header = _MATRIX_HEADER.pack(MAGIC, VERSION, KIND_MATRIX, expert, layer, MATRIX_NAMES.index(matrix), rows, cols)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def save_unstacked(experts: dict[int, ExpertWeights], directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for e in sorted(experts):
        ew = experts[e]
        for layer in range(ew.n_layers):
            for name, mat in zip(MATRIX_NAMES, ew.layer(layer)):
                path = directory / matrix_filename(e, layer, name)
                write_matrix(path, e, layer, name, mat)
                written.append(path)
    return written


def _read_matrix(path: Path) -> tuple[tuple[int, int, int], np.ndarray]:
    raw = path.read_bytes()
    if len(raw) < _MATRIX_HEADER.size:
        raise WeightFileError(f"{path}: truncated header")
    magic, version, kind, expert, layer, matrix, rows, cols = _MATRIX_HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION or kind != KIND_MATRIX:
        raise WeightFileError(f"{path}: not a version-{VERSION} matrix file")
    expected = _MATRIX_HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise WeightFileError(f"{path}: size {len(raw)} does not match header ({expected})")
    data = np.frombuffer(raw, dtype="<f4", offset=_MATRIX_HEADER.size).reshape(rows, cols)
    return (expert, layer, matrix), data.astype(np.float32)


def _scan_unstacked(directory: Path) -> dict[tuple[int, int, int], np.ndarray]:
    found = {}
    for path in sorted(directory.glob("*.moew")):
        key, data = _read_matrix(path)
        if key in found:
            raise WeightFileError(f"{path}: duplicate matrix {key}")
        found[key] = data
    if not found:
        raise WeightFileError(f"{directory}: no weight files")
    return found


def _assemble_unstacked(directory: Path) -> tuple[dict[int, ExpertWeights], int]:
    found = _scan_unstacked(directory)
    expert_ids = sorted({k[0] for k in found})
    n_layers = max(k[1] for k in found) + 1
    experts = {}
    for e in expert_ids:
        mats: dict[int, list[np.ndarray]] = {0: [], 1: [], 2: []}
        for layer in range(n_layers):
            for m in range(3):
                key = (e, layer, m)
                if key not in found:
                    raise WeightFileError(
                        f"{directory}: missing {matrix_filename(e, layer, MATRIX_NAMES[m])}"
                    )
                mats[m].append(found[key])
        experts[e] = ExpertWeights(e, mats[0], mats[1], mats[2])
    return experts, n_layers


def pack_weights(unstacked_dir: str | os.PathLike, out_path: str | os.PathLike) -> Path:
    """Stack each expert's per-layer matrices into one contiguous region of a single file."""
    experts, n_layers = _assemble_unstacked(Path(unstacked_dir))
    ids = sorted(experts)
    if ids != list(range(len(ids))):
        raise WeightFileError(f"expert ids must be 0..n-1, got {ids}")
    d_embed, d_ffn = experts[0].w1[0].shape
    out_path = Path(out_path)
    with open(out_path, "wb") as fh:
        fh.write(_STACK_HEADER.pack(MAGIC, VERSION, KIND_PRESTACKED, len(ids), n_layers, d_embed, d_ffn))
        for e in ids:
            ew = experts[e]
            for layer in range(n_layers):
                for mat in ew.layer(layer):
                    if mat.size != d_embed * d_ffn:
                        raise WeightFileError(f"expert {e} layer {layer}: matrix shape {mat.shape} mismatch")
                    fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    return out_path


def _load_prestacked(path: Path) -> LoadedExperts:
    raw = path.read_bytes()
    if len(raw) < _STACK_HEADER.size:
        raise WeightFileError(f"{path}: truncated header")
    magic, version, kind, n_experts, n_layers, d_embed, d_ffn = _STACK_HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION or kind != KIND_PRESTACKED:
        raise WeightFileError(f"{path}: not a version-{VERSION} prestacked file")
    per_matrix = d_embed * d_ffn
    expected = _STACK_HEADER.size + n_experts * n_layers * 3 * per_matrix * 4
    if len(raw) != expected:
        raise WeightFileError(f"{path}: size {len(raw)} does not match header ({expected})")
    payload = np.frombuffer(raw, dtype="<f4", offset=_STACK_HEADER.size).astype(np.float32)
    stacked = payload.reshape(n_experts, n_layers, 3, per_matrix)
    experts, arrays = {}, []
    for e in range(n_experts):
        block = stacked[e]  # one contiguous array per expert; matrices are views into it
        experts[e] = ExpertWeights(
            e,
            [block[l, 0].reshape(d_embed, d_ffn) for l in range(n_layers)],
            [block[l, 1].reshape(d_embed, d_ffn) for l in range(n_layers)],
            [block[l, 2].reshape(d_ffn, d_embed) for l in range(n_layers)],
        )
        arrays.append(ResidentArray(f"expert{e}", block.nbytes))
    return LoadedExperts(experts, arrays, PRESTACKED)


def load_weights(path: str | os.PathLike, format: str) -> LoadedExperts:
    """Load expert weights; the returned ``arrays`` list is what gets registered for residency."""
    path = Path(path)
    if not path.exists():
        raise WeightFileError(f"{path}: no such file or directory")
    if format == PRESTACKED:
        return _load_prestacked(path)
    if format != UNSTACKED:
        raise WeightFileError(f"unknown weight format {format!r}")
    experts, n_layers = _assemble_unstacked(path)
    arrays = [
        ResidentArray(f"expert{e}.layer{layer}.{name}", mat.nbytes)
        for e in sorted(experts)
        for layer in range(n_layers)
        for name, mat in zip(MATRIX_NAMES, experts[e].layer(layer))
    ]
    return LoadedExperts(experts, arrays, UNSTACKED)


def residency_layout(
    format: str, experts: list[int], n_layers: int, bytes_per_matrix: int
) -> list[ResidentArray]:
    """Array granularity of a weight format without touching disk (used by the cluster simulator)."""
    if format == PRESTACKED:
        return [ResidentArray(f"expert{e}", bytes_per_matrix * 3 * n_layers) for e in experts]
    if format == UNSTACKED:
        return [
            ResidentArray(f"expert{e}.layer{layer}.{name}", bytes_per_matrix)
            for e in experts
            for layer in range(n_layers)
            for name in MATRIX_NAMES
        ]
    raise WeightFileError(f"unknown weight format {format!r}")
