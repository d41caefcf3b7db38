"""Stereo-volume baseline: median-binned height grids, incremental mass and a
density-network calibration fitted on run totals."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import trainer as tr
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import ModelSpec, ParamVector, Tape, build_density_mlp
from .runs import Run

DEFAULT_ROI = (0.0, 1.0, 0.0, 0.5)
DEFAULT_BIN_WIDTH = 0.05


@dataclass
class PointCloud:
    """Points (x, y, z) in metres relative to the elevator plane."""

    points: np.ndarray
    roi: tuple = DEFAULT_ROI
    bin_width: float = DEFAULT_BIN_WIDTH

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        x0, x1, y0, y1 = self.roi
        if not self.bin_width > 0:
            raise ValueError("bin width must be positive")
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate ROI {self.roi}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        x0, x1, y0, y1 = self.roi
        return (max(1, round((x1 - x0) / self.bin_width)), max(1, round((y1 - y0) / self.bin_width)))


def _bin_index(v: np.ndarray, lo: float, width: float, count: int) -> np.ndarray:
    # a point on a shared edge belongs to the lower-index bin
    idx = np.ceil((v - lo) / width).astype(np.int64) - 1
    return np.clip(idx, 0, count - 1)


def bin_heights(cloud: PointCloud) -> np.ndarray:
    """Median z per square bin (0 where a bin holds no point)."""
    nx, ny = cloud.grid_shape
    x0, x1, y0, y1 = cloud.roi
    heights = np.zeros(nx * ny)
    pts = cloud.points
    inside = (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
    pts = pts[inside]
    if not len(pts):
        return heights.reshape(nx, ny)
    ix = _bin_index(pts[:, 0], x0, cloud.bin_width, nx)
    iy = _bin_index(pts[:, 1], y0, cloud.bin_width, ny)
    flat = ix * ny + iy
    order = np.lexsort((pts[:, 2], flat))
    z, flat = pts[order, 2], flat[order]
    counts = np.bincount(flat, minlength=nx * ny)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    full = counts > 0
    lo = starts[full] + (counts[full] - 1) // 2
    hi = starts[full] + counts[full] // 2
    heights[full] = 0.5 * (z[lo] + z[hi])
    return heights.reshape(nx, ny)


def bin_volume(cloud: PointCloud) -> float:
    """Volume per metre of belt (m^3/m) inside the ROI."""
    x0, x1, _, _ = cloud.roi
    return float(bin_heights(cloud).sum() * cloud.bin_width ** 2 / (x1 - x0))


@dataclass
class VolumeSample:
    volume: float     # V_c, m^3 per metre of belt
    speed: float      # V_e, m/s
    dt: float         # s


def incremental_mass(sample: VolumeSample, density: float) -> tuple[float, float]:
    """Volume carried past the ROI during one frame, and its mass."""
    if density < 0:
        raise ValueError("density must be >= 0")
    dv = sample.dt * sample.speed * sample.volume
    return dv, dv * density


@dataclass
class VolumetricCalibration:
    """Volume offset plus density network.

    The network sees the offset-corrected volume divided by ``volume_scale``
    and its output times ``density_scale`` is the density in kg/m^3.
    """

    beta: float
    theta: ParamVector
    density_scale: float = 1.0
    volume_scale: float = 1.0

    def __post_init__(self):
        build_density_mlp().check_params(self.theta)
        if not math.isfinite(self.beta):
            raise ValueError("beta must be finite")

    @property
    def underestimates_volume(self) -> bool:
        return self.beta < 0

    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(self.theta, path.with_suffix(".mflb"))
        path.write_text(json.dumps({
            "beta": self.beta, "density_scale": self.density_scale,
            "volume_scale": self.volume_scale, "theta": path.with_suffix(".mflb").name,
        }, indent=2))

    @classmethod
    def load(cls, path) -> "VolumetricCalibration":
        path = Path(path)
        meta = json.loads(path.read_text())
        theta = load_checkpoint(path.parent / meta["theta"], build_density_mlp())
        return cls(meta["beta"], theta, meta["density_scale"], meta["volume_scale"])


class CalibratedDensityModel:
    """Per-frame mass per unit belt displacement, f(u; theta) * u with
    u = max(V - beta, 0), in the interface the trainer expects.

    The flat parameter vector is [beta / volume_scale, theta...].
    """

    def __init__(self, density_scale: float = 1.0, volume_scale: float = 1.0,
                 net: ModelSpec | None = None):
        self.net = net or build_density_mlp()
        self.density_scale = float(density_scale)
        self.volume_scale = float(volume_scale)
        self.name = "calibrated-density"
        # when set, only beta and the head bias (a constant density) receive gradient
        self.constant_density = False

    @property
    def n_params(self) -> int:
        return 1 + self.net.n_params

    def pack(self, cal: VolumetricCalibration) -> np.ndarray:
        return np.concatenate([[cal.beta / self.volume_scale], cal.theta.values]).astype(np.float64)

    def unpack(self, values: np.ndarray) -> VolumetricCalibration:
        theta = ParamVector(np.asarray(values[1:], dtype=np.float32), self.net.layout)
        return VolumetricCalibration(float(values[0]) * self.volume_scale, theta,
                                     self.density_scale, self.volume_scale)

    def init_params(self, seed: int = 0) -> np.ndarray:
        theta = self.net.init_params(seed, np.float64).values
        head = self.net.layout[-1]
        theta[head.offset:head.offset + head.length] = 0.0
        theta[-1] = 1.0  # constant density equal to density_scale
        return np.concatenate([[0.0], theta])

    def forward(self, values: np.ndarray, volumes: np.ndarray, keep_tape: bool = True):
        values = np.asarray(values)
        v = np.asarray(volumes, dtype=values.dtype).reshape(-1)
        beta = values[0] * self.volume_scale
        mask = v > beta
        u = np.where(mask, v - beta, 0).astype(values.dtype)
        net_out, tape = self.net.forward(values[1:], (u / self.volume_scale)[:, None], keep_tape)
        out = self.density_scale * net_out * u
        if not keep_tape:
            return out, None
        return out, Tape(tape.caches, out, {"u": u, "mask": mask, "net": net_out})

    def backward(self, values: np.ndarray, tape: Tape, coefficients: np.ndarray):
        values = np.asarray(values)
        c = np.asarray(coefficients, dtype=values.dtype)
        u, mask, net_out = tape.extras["u"], tape.extras["mask"], tape.extras["net"]
        inner = Tape(tape.caches, net_out)
        c_net = c * self.density_scale * u
        g_theta, g_in = self.net.backward(values[1:], inner, c_net, wrt_input=True)
        # d out / d beta is zero on the clamped side (subgradient 0 at the kink)
        g_beta = -np.sum(mask * (c * self.density_scale * net_out * self.volume_scale + g_in[:, 0]))
        if self.constant_density:
            g_theta = np.concatenate([np.zeros(g_theta.size - 1), g_theta[-1:]])
        return np.concatenate([[g_beta], g_theta]).astype(values.dtype)


def calibrated_mass(volume, speed, dt, cal: VolumetricCalibration, net: ModelSpec | None = None):
    """Per-frame mass (kg) from raw volume, elevator speed and frame time."""
    model = CalibratedDensityModel(cal.density_scale, cal.volume_scale, net)
    v = np.atleast_1d(np.asarray(volume, dtype=np.float64))
    out, _ = model.forward(model.pack(cal), v, keep_tape=False)
    mass = out * np.asarray(speed, dtype=np.float64) * dt
    return float(mass[0]) if np.ndim(volume) == 0 else mass


def calibration_config(**overrides) -> tr.TrainingConfig:
    base = dict(smoothing=0.0, learning_rate=1e-3, optimizer="adam", batch_size=512,
                epochs=60, dtype="float64")
    base.update(overrides)
    return tr.TrainingConfig(**base)


def fit_calibration(runs: Sequence[Run], cfg: tr.TrainingConfig | None = None,
                    holdout: Sequence[Run] | None = None, seed: int = 0,
                    warmup_epochs: int | None = None, warmup_learning_rate: float = 1e-2):
    """Fit offset and density network on run totals.

    The first ``warmup_epochs`` (default a third of ``cfg.epochs``) fit beta
    under a constant density at ``warmup_learning_rate``; the rest train beta
    and the whole network at ``cfg.learning_rate``.
    Returns (calibration, MAE% on ``holdout`` or, without one, on ``runs``).
    """
    cfg = cfg or calibration_config()
    vruns = [r.volume_run() for r in runs]
    mass = sum(r.total_mass for r in vruns)
    if mass <= 0:
        raise ValueError("cannot calibrate on a dataset with no material")
    moved = sum(float(np.sum(r.volumes * r.speeds * cfg.dt)) for r in vruns)
    positive = np.concatenate([r.volumes[r.volumes > 0] for r in vruns] or [np.zeros(0)])
    volume_scale = float(np.mean(positive)) if positive.size else 1.0
    model = CalibratedDensityModel(mass / moved, volume_scale)
    warm = cfg.epochs // 3 if warmup_epochs is None else min(warmup_epochs, cfg.epochs)
    params = model.init_params(seed).astype(cfg.np_dtype)
    model.constant_density = True
    params, _ = tr.train(vruns, model, params,
                         replace(cfg, epochs=warm, learning_rate=warmup_learning_rate),
                         keep_best=False)
    model.constant_density = False
    params, _ = tr.train(vruns, model, params, replace(cfg, epochs=cfg.epochs - warm),
                         keep_best=False)
    cal = model.unpack(params)
    eval_runs = [r.volume_run() for r in holdout] if holdout else vruns
    pred = np.array([np.sum(calibrated_mass(r.volumes, r.speeds, cfg.dt, cal)) for r in eval_runs])
    truth = np.array([r.total_mass for r in eval_runs])
    return cal, tr.mae_percent(pred, truth)


def volume_signal_rows(volumes, speeds, dt, density=None, cal=None):
    """Rows (frame_index, V_c, V_e, m_delta, cumulative) for one run."""
    volumes = np.asarray(volumes, dtype=np.float64)
    speeds = np.asarray(speeds, dtype=np.float64)
    if cal is not None:
        m = calibrated_mass(volumes, speeds, dt, cal)
    else:
        m = volumes * speeds * dt * (density if density is not None else 1.0)
    cum = np.cumsum(m)
    return [(j, float(volumes[j]), float(speeds[j]), float(m[j]), float(cum[j]))
            for j in range(volumes.size)]


def write_volume_signal(path, volumes, speeds, dt, density=None, cal=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "V_c", "V_e", "m_delta", "cumulative_mass"])
        for row in volume_signal_rows(volumes, speeds, dt, density, cal):
            w.writerow([row[0]] + [repr(v) for v in row[1:]])
