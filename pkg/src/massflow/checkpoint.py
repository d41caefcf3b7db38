"""Binary parameter checkpoints.

Layout (little-endian)::

    b"MFLB"  u32 version
    u32 n_slots, then per slot:
        u8 kind, u8 n_in, u32 in_dims[n_in], u8 n_out, u32 out_dims[n_out],
        u64 offset, u64 length
    u64 n_values, f32 values[n_values]
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .nn import LayerSlot, LayoutError, ParamVector

MAGIC = b"MFLB"
VERSION = 1
_KINDS = {"conv2d": 0, "dense": 1, "gap": 2}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ParamVector) -> bytes:
    if not params.is_finite():
        raise ValueError("refusing to write non-finite parameters")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(params.layout))]
    for slot in params.layout:
        parts.append(struct.pack("<BB", _KINDS[slot.kind], len(slot.in_dims)))
        parts.append(struct.pack(f"<{len(slot.in_dims)}I", *slot.in_dims))
        parts.append(struct.pack("<B", len(slot.out_dims)))
        parts.append(struct.pack(f"<{len(slot.out_dims)}I", *slot.out_dims))
        parts.append(struct.pack("<QQ", slot.offset, slot.length))
    values = np.asarray(params.values, dtype="<f4")
    parts.append(struct.pack("<Q", values.size))
    parts.append(values.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> ParamVector:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = 8
    try:
        (n_slots,) = struct.unpack_from("<I", body, pos)
        pos += 4
        slots = []
        for _ in range(n_slots):
            kind, n_in = struct.unpack_from("<BB", body, pos)
            pos += 2
            in_dims = struct.unpack_from(f"<{n_in}I", body, pos)
            pos += 4 * n_in
            (n_out,) = struct.unpack_from("<B", body, pos)
            pos += 1
            out_dims = struct.unpack_from(f"<{n_out}I", body, pos)
            pos += 4 * n_out
            offset, length = struct.unpack_from("<QQ", body, pos)
            pos += 16
            slots.append(LayerSlot(_KIND_NAMES[kind], tuple(in_dims), tuple(out_dims), offset, length))
        (n_values,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        values = np.frombuffer(body, dtype="<f4", count=n_values, offset=pos).astype(np.float32)
        pos += 4 * n_values
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint at byte {pos}: {exc}") from exc
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after payload")
    return ParamVector(values, tuple(slots))


def save_checkpoint(params: ParamVector, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path, model=None) -> ParamVector:
    """Read a checkpoint; with ``model`` the stored layout must match it."""
    params = decode_checkpoint(Path(path).read_bytes())
    if model is not None and tuple(params.layout) != tuple(model.layout):
        raise LayoutError(f"checkpoint layout is incompatible with model {model.name!r}")
    return params
