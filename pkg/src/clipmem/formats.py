"""Binary file formats.

All integers are little-endian unsigned 32-bit; payloads follow the
header immediately with no padding.

QVEM  frame embeddings: magic ``QVEM``, [version=1, frames, patches,
      dim], then frames*patches*dim float32, row-major (frame-major,
      patch-major).
QVTQ  question embedding: magic ``QVTQ``, [version=1, text_len, dim],
      then text_len*dim float32.
QVDI  decoder-input dump: magic ``QVDI``, [version=1, rows, dim], then
      rows*dim float32.  Terminal output of a stream run.
QVWT  compressor weights: magic ``QVWT``, [version=1, layers, heads,
      model_dim, ff_dim, context_per_frame, patches, max_frames], then
      float64 arrays in a fixed order (context seed; per layer the four
      attention projections, both layer-norm gain/bias pairs and the
      feed-forward mats; the three position tables).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .attention import AttentionWeights
from .compressor import CompressorWeights, LayerWeights
from .errors import DataFormatError

__all__ = [
    "write_qvem",
    "read_qvem",
    "write_qvtq",
    "read_qvtq",
    "write_qvdi",
    "read_qvdi",
    "save_weights",
    "load_weights",
]

_U32 = struct.Struct("<I")


def _write_header(fh, magic: bytes, fields: tuple[int, ...]) -> None:
    fh.write(magic)
    for value in fields:
        fh.write(_U32.pack(value))


def _read_header(data: bytes, magic: bytes, n_fields: int, path) -> tuple[tuple[int, ...], int]:
    if data[:4] != magic:
        raise DataFormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    end = 4 + 4 * n_fields
    if len(data) < end:
        raise DataFormatError(f"{path}: truncated header")
    fields = struct.unpack(f"<{n_fields}I", data[4:end])
    if fields[0] != 1:
        raise DataFormatError(f"{path}: unsupported version {fields[0]}")
    return fields, end


def _read_f32(data: bytes, offset: int, count: int, path) -> np.ndarray:
    need = offset + 4 * count
    if len(data) != need:
        raise DataFormatError(
            f"{path}: payload is {len(data) - offset} bytes, expected {4 * count}"
        )
    return np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64)


def write_qvem(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise DataFormatError(f"frame embeddings must be 3-D, got {frames.shape}")
    t, p, d = frames.shape
    with open(path, "wb") as fh:
        _write_header(fh, b"QVEM", (1, t, p, d))
        fh.write(frames.astype("<f4").tobytes())


def read_qvem(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (_, t, p, d), offset = _read_header(data, b"QVEM", 4, path)
    return _read_f32(data, offset, t * p * d, path).reshape(t, p, d)


def write_qvtq(path, question: np.ndarray) -> None:
    question = np.asarray(question, dtype=np.float64)
    if question.ndim != 2:
        raise DataFormatError(f"question embedding must be 2-D, got {question.shape}")
    n, d = question.shape
    with open(path, "wb") as fh:
        _write_header(fh, b"QVTQ", (1, n, d))
        fh.write(question.astype("<f4").tobytes())


def read_qvtq(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (_, n, d), offset = _read_header(data, b"QVTQ", 3, path)
    return _read_f32(data, offset, n * d, path).reshape(n, d)


def write_qvdi(path, rows: np.ndarray) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise DataFormatError(f"decoder input must be 2-D, got {rows.shape}")
    n, d = rows.shape
    with open(path, "wb") as fh:
        _write_header(fh, b"QVDI", (1, n, d))
        fh.write(rows.astype("<f4").tobytes())


def read_qvdi(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (_, n, d), offset = _read_header(data, b"QVDI", 3, path)
    return _read_f32(data, offset, n * d, path).reshape(n, d)


def _layer_arrays(lw: LayerWeights):
    return (
        lw.attn.w_q, lw.attn.w_k, lw.attn.w_v, lw.attn.w_o,
        lw.ln1_gain, lw.ln1_bias, lw.w_in, lw.b_in,
        lw.w_out, lw.b_out, lw.ln2_gain, lw.ln2_bias,
    )


def save_weights(path, weights: CompressorWeights, heads: int, ff_dim: int) -> None:
    c, d = weights.context_seed.shape
    p = weights.pos_visual.shape[0]
    max_frames = weights.pos_frame.shape[0]
    with open(path, "wb") as fh:
        _write_header(fh, b"QVWT", (1, len(weights.layers), heads, d, ff_dim, c, p, max_frames))
        fh.write(np.ascontiguousarray(weights.context_seed, dtype="<f8").tobytes())
        for lw in weights.layers:
            for arr in _layer_arrays(lw):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for arr in (weights.pos_visual, weights.pos_context, weights.pos_frame):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path) -> tuple[CompressorWeights, dict[str, int]]:
    """Read a weight file; returns the weights and the header geometry."""
    data = Path(path).read_bytes()
    (_, layers, heads, d, ff, c, p, max_frames), offset = _read_header(data, b"QVWT", 8, path)
    dims = {
        "layers": layers, "heads": heads, "model_dim": d, "ff_dim": ff,
        "context_per_frame": c, "patches": p, "max_frames": max_frames,
    }

    shapes = [("context_seed", (c, d))]
    for li in range(layers):
        shapes += [
            (f"layers.{li}.w_q", (d, d)), (f"layers.{li}.w_k", (d, d)),
            (f"layers.{li}.w_v", (d, d)), (f"layers.{li}.w_o", (d, d)),
            (f"layers.{li}.ln1_gain", (d,)), (f"layers.{li}.ln1_bias", (d,)),
            (f"layers.{li}.w_in", (d, ff)), (f"layers.{li}.b_in", (ff,)),
            (f"layers.{li}.w_out", (ff, d)), (f"layers.{li}.b_out", (d,)),
            (f"layers.{li}.ln2_gain", (d,)), (f"layers.{li}.ln2_bias", (d,)),
        ]
    shapes += [("pos_visual", (p, d)), ("pos_context", (c, d)), ("pos_frame", (max_frames, d))]

    total = sum(int(np.prod(s)) for _, s in shapes)
    if len(data) != offset + 8 * total:
        raise DataFormatError(
            f"{path}: payload is {len(data) - offset} bytes, expected {8 * total}"
        )
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count

    layer_weights = [
        LayerWeights(
            attn=AttentionWeights(
                w_q=arrays[f"layers.{li}.w_q"], w_k=arrays[f"layers.{li}.w_k"],
                w_v=arrays[f"layers.{li}.w_v"], w_o=arrays[f"layers.{li}.w_o"],
            ),
            ln1_gain=arrays[f"layers.{li}.ln1_gain"], ln1_bias=arrays[f"layers.{li}.ln1_bias"],
            w_in=arrays[f"layers.{li}.w_in"], b_in=arrays[f"layers.{li}.b_in"],
            w_out=arrays[f"layers.{li}.w_out"], b_out=arrays[f"layers.{li}.b_out"],
            ln2_gain=arrays[f"layers.{li}.ln2_gain"], ln2_bias=arrays[f"layers.{li}.ln2_bias"],
        )
        for li in range(layers)
    ]
    weights = CompressorWeights(
        context_seed=arrays["context_seed"],
        layers=layer_weights,
        pos_visual=arrays["pos_visual"],
        pos_context=arrays["pos_context"],
        pos_frame=arrays["pos_frame"],
    )
    return weights, dims
