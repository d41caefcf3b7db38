"""Dataset record files ("MFDS") and truth sidecars ("MFSC").

Record file, little-endian::

    b"MFDS"  u32 version
    u32 H, u32 W, u32 C, f64 image_scale, u32 n_runs
    per run:
        u16 len, id bytes, u32 n, f64 y, u32 flags, u16 len, regime bytes
        n frames of (f32 speed, [f32 volume if flags & HAS_VOLUME], u8 image[H*W*C])
        u32 crc32 over the run's bytes

Sidecar file::

    b"MFSC"  u32 version, u32 n_runs
    per run:
        u16 len, id bytes, u32 n, u32 flags, f64 fault_factor, f64 clutter
        u16 n_tags, (u16 len, tag bytes) * n_tags
        f64 hidden_density[n], f64 true_speed[n], f64 coverage[n],
        u8 regime_index[n], u8 occluder[n], u8 glare[n]
        u32 crc32 over the run's bytes

Sidecars hold evaluation truth; :func:`read_sidecars` refuses to open them
in training mode.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .rig import RunSidecar
from .runs import Run

DATA_MAGIC = b"MFDS"
SIDECAR_MAGIC = b"MFSC"
VERSION = 1

FLAG_EMPTY = 1
FLAG_HAS_VOLUME = 2
SIDE_SPEED_FAULT = 1


class DatasetFormatError(ValueError):
    pass


class TruthIsolationError(PermissionError):
    pass


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _frame_dtype(shape, has_volume: bool) -> np.dtype:
    fields = [("speed", "<f4")]
    if has_volume:
        fields.append(("volume", "<f4"))
    fields.append(("image", "u1", tuple(shape)))
    return np.dtype(fields)


def encode_run(run: Run, shape) -> bytes:
    images = np.asarray(run.images)
    if images.dtype != np.uint8:
        raise DatasetFormatError(f"run {run.id}: images must be stored as uint8")
    if images.shape[1:] != tuple(shape):
        raise DatasetFormatError(f"run {run.id}: frame shape {images.shape[1:]} != {tuple(shape)}")
    has_volume = run.volumes is not None
    flags = (FLAG_EMPTY if run.empty else 0) | (FLAG_HAS_VOLUME if has_volume else 0)
    frames = np.zeros(run.n, dtype=_frame_dtype(shape, has_volume))
    frames["speed"] = run.speeds
    if has_volume:
        frames["volume"] = run.volumes
    frames["image"] = images
    body = b"".join([_str(run.id), struct.pack("<IdI", run.n, run.total_mass, flags),
                     _str(run.regime), frames.tobytes()])
    return body + struct.pack("<I", zlib.crc32(body))


def write_dataset(path, runs: Iterable[Run], n_runs: int, shape, image_scale: float = 1 / 255) -> None:
    """Stream ``n_runs`` runs into a record file."""
    h, w, c = shape
    written = 0
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC + struct.pack("<IIIIdI", VERSION, h, w, c, image_scale, n_runs))
        for run in runs:
            fh.write(encode_run(run, shape))
            written += 1
    if written != n_runs:
        raise DatasetFormatError(f"header promised {n_runs} runs, wrote {written}")


class _Cursor:
    def __init__(self, blob: bytes, pos: int, run_index: int | None = None):
        self.blob, self.pos, self.run_index = blob, pos, run_index

    def where(self) -> str:
        prefix = f"run {self.run_index}" if self.run_index is not None else "header"
        return f"{prefix} (byte {self.pos})"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DatasetFormatError(f"truncated file in {self.where()}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatasetFormatError(f"bad string in {self.where()}") from exc

    def crc(self, start: int) -> None:
        body = self.blob[start:self.pos]
        (stored,) = self.unpack("<I")
        if zlib.crc32(body) != stored:
            raise DatasetFormatError(f"checksum mismatch in {self.where()}")


def _check_magic(blob: bytes, magic: bytes, kind: str) -> None:
    if blob[:4] != magic:
        raise DatasetFormatError(f"not a {kind} file (bad magic {blob[:4]!r})")
    if len(blob) < 8:
        raise DatasetFormatError(f"truncated {kind} header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DatasetFormatError(f"{kind} version {version}, expected {VERSION}")


def dataset_header(path) -> dict:
    blob = Path(path).read_bytes()[:36]
    _check_magic(blob, DATA_MAGIC, "dataset record")
    cur = _Cursor(blob, 8)
    h, w, c, scale, n_runs = cur.unpack("<IIIdI")
    return {"shape": (h, w, c), "image_scale": scale, "n_runs": n_runs}


def iter_dataset(path) -> Iterator[Run]:
    """Yield runs in file order, validating each run's checksum."""
    blob = Path(path).read_bytes()
    _check_magic(blob, DATA_MAGIC, "dataset record")
    cur = _Cursor(blob, 8)
    h, w, c, scale, n_runs = cur.unpack("<IIIdI")
    for i in range(n_runs):
        cur.run_index = i
        start = cur.pos
        run_id = cur.string()
        n, y, flags = cur.unpack("<IdI")
        regime = cur.string()
        dtype = _frame_dtype((h, w, c), bool(flags & FLAG_HAS_VOLUME))
        frames = np.frombuffer(cur.take(n * dtype.itemsize), dtype=dtype)
        cur.crc(start)
        volumes = frames["volume"].astype(np.float64) if flags & FLAG_HAS_VOLUME else None
        try:
            yield Run(run_id, frames["image"].copy(), frames["speed"].astype(np.float64), y,
                      empty=bool(flags & FLAG_EMPTY), regime=regime, input_scale=scale,
                      volumes=volumes)
        except ValueError as exc:
            raise DatasetFormatError(f"run {i}: {exc}") from exc
    if cur.pos != len(blob):
        raise DatasetFormatError(f"{len(blob) - cur.pos} trailing bytes after run {n_runs - 1}")


def read_dataset(path) -> list[Run]:
    return list(iter_dataset(path))


def encode_sidecar(side: RunSidecar) -> bytes:
    tags = sorted(set(side.regime))
    index = {t: k for k, t in enumerate(tags)}
    flags = SIDE_SPEED_FAULT if side.speed_fault else 0
    parts = [_str(side.run_id), struct.pack("<IIdd", side.n, flags, side.fault_factor, side.clutter),
             struct.pack("<H", len(tags))]
    parts += [_str(t) for t in tags]
    for arr in (side.hidden_density, side.true_speed, side.coverage):
        parts.append(np.asarray(arr, dtype="<f8").tobytes())
    parts.append(np.array([index[t] for t in side.regime], dtype=np.uint8).tobytes())
    parts.append(np.asarray(side.occluder, dtype=np.uint8).tobytes())
    parts.append(np.asarray(side.glare, dtype=np.uint8).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_sidecars(path, sidecars: Iterable[RunSidecar]) -> None:
    sidecars = list(sidecars)
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC + struct.pack("<II", VERSION, len(sidecars)))
        for side in sidecars:
            fh.write(encode_sidecar(side))


def read_sidecars(path, mode: str = "eval") -> dict[str, RunSidecar]:
    """Sidecars keyed by run id. ``mode="train"`` is refused."""
    if mode == "train":
        raise TruthIsolationError("truth sidecars are not readable by training")
    if mode != "eval":
        raise ValueError(f"unknown mode {mode!r}")
    blob = Path(path).read_bytes()
    _check_magic(blob, SIDECAR_MAGIC, "sidecar")
    cur = _Cursor(blob, 8)
    (n_runs,) = cur.unpack("<I")
    out = {}
    for i in range(n_runs):
        cur.run_index = i
        start = cur.pos
        run_id = cur.string()
        n, flags, fault, clutter = cur.unpack("<IIdd")
        (n_tags,) = cur.unpack("<H")
        tags = [cur.string() for _ in range(n_tags)]
        hidden, speed, coverage = (np.frombuffer(cur.take(8 * n), dtype="<f8").astype(np.float64)
                                   for _ in range(3))
        regime_idx, occ, glare = (np.frombuffer(cur.take(n), dtype=np.uint8) for _ in range(3))
        cur.crc(start)
        if n_tags == 0 and n:
            raise DatasetFormatError(f"run {i}: frames without regime tags")
        if regime_idx.size and regime_idx.max() >= n_tags:
            raise DatasetFormatError(f"run {i}: regime index out of range")
        out[run_id] = RunSidecar(run_id, hidden, speed, [tags[k] for k in regime_idx],
                                 occ.astype(bool), glare.astype(bool), coverage,
                                 bool(flags & SIDE_SPEED_FAULT), fault, clutter)
    if cur.pos != len(blob):
        raise DatasetFormatError("trailing bytes after last sidecar")
    return out
