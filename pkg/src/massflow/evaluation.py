"""Run-level and per-frame metrics, diagnostics and outlier flags."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import trainer as tr
from .rig import RunSidecar
from .runs import Run
from .volumetric import VolumetricCalibration, calibrated_mass

IQR_FENCE = 3.0
OCCLUDER_HEAVY = 0.1   # fraction of occluded frames that makes a run occluder-heavy


class MissingRunError(KeyError):
    pass


@dataclass
class PredictionSignal:
    """Per-frame predicted mass (kg per frame) for one run."""

    run_id: str
    mass_flow: np.ndarray
    cumulative: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mass_flow = np.asarray(self.mass_flow, dtype=np.float64).reshape(-1)
        self.cumulative = np.cumsum(self.mass_flow)

    @property
    def total(self) -> float:
        return float(self.cumulative[-1]) if self.cumulative.size else 0.0

    def __len__(self) -> int:
        return self.mass_flow.size


def predict_signal(model, params, run: Run, cfg: tr.TrainingConfig) -> PredictionSignal:
    out = tr._run_outputs(model, tr._values(params), run, cfg).astype(np.float64)
    return PredictionSignal(run.id, out * run.speeds * cfg.dt)


def volumetric_signal(run: Run, cal: VolumetricCalibration, dt: float) -> PredictionSignal:
    if run.volumes is None:
        raise ValueError(f"run {run.id} has no volume signal")
    return PredictionSignal(run.id, calibrated_mass(run.volumes, run.speeds, dt, cal))


def smoothness(mass_flow: np.ndarray) -> float:
    """Mean squared first difference; 0 for fewer than two frames."""
    m = np.asarray(mass_flow, dtype=np.float64)
    return float(np.mean(np.diff(m) ** 2)) if m.size > 1 else 0.0


def r2_score(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    sst = np.sum((truth - truth.mean()) ** 2)
    if sst == 0:
        return 1.0 if np.array_equal(pred, truth) else float("-inf")
    return float(1 - np.sum((pred - truth) ** 2) / sst)


@dataclass
class Outlier:
    run_id: str
    percent_error: float
    reason: str         # "speed" when the sidecar confirms a speed fault


@dataclass
class EvalReport:
    run_ids: list
    truth: np.ndarray
    predicted: np.ndarray
    empty: np.ndarray
    smoothness: np.ndarray
    frame_r2: float | None = None
    outliers: list = field(default_factory=list)

    @property
    def percent_error(self) -> np.ndarray:
        """Signed percent error per run; NaN for empty runs."""
        with np.errstate(divide="ignore", invalid="ignore"):
            err = 100.0 * (self.predicted - self.truth) / self.truth
        return np.where(self.empty, np.nan, err)

    @property
    def mae_percent(self) -> float:
        err = self.percent_error[~self.empty]
        return float(np.mean(np.abs(err))) if err.size else float("nan")

    @property
    def empty_abs_kg(self) -> np.ndarray:
        return np.abs(self.predicted[self.empty])

    @property
    def mean_smoothness(self) -> float:
        return float(np.mean(self.smoothness)) if self.smoothness.size else float("nan")

    def summary(self) -> dict:
        empty = self.empty_abs_kg
        return {
            "runs": len(self.run_ids),
            "mae_percent": self.mae_percent,
            "empty_runs": int(self.empty.sum()),
            "empty_mean_abs_kg": float(empty.mean()) if empty.size else None,
            "frame_r2": self.frame_r2,
            "mean_smoothness": self.mean_smoothness,
            "outliers": [(o.run_id, o.reason) for o in self.outliers],
        }

    def write_csv(self, path) -> None:
        err = self.percent_error
        flagged = {o.run_id: o.reason for o in self.outliers}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run_id", "truth_kg", "predicted_kg", "percent_error", "empty",
                        "smoothness", "outlier"])
            for k, rid in enumerate(self.run_ids):
                w.writerow([rid, repr(float(self.truth[k])), repr(float(self.predicted[k])),
                            "" if self.empty[k] else repr(float(err[k])), int(self.empty[k]),
                            repr(float(self.smoothness[k])), flagged.get(rid, "")])


def _by_id(signals: Sequence[PredictionSignal]) -> dict[str, PredictionSignal]:
    return {s.run_id: s for s in signals}


def run_metrics(signals: Sequence[PredictionSignal], runs: Sequence[Run],
                sidecars: Mapping[str, RunSidecar] | None = None,
                dt: float = tr.TrainingConfig.dt) -> EvalReport:
    """Percent errors, smoothness and, where sidecars exist, pooled per-frame
    R^2 of predicted vs true mass flow."""
    by_id = _by_id(signals)
    missing = [r.id for r in runs if r.id not in by_id]
    if missing:
        raise MissingRunError(f"no prediction for runs {missing}")
    sig = [by_id[r.id] for r in runs]
    for s, r in zip(sig, runs):
        if len(s) != r.n:
            raise ValueError(f"run {r.id}: signal has {len(s)} frames, run has {r.n}")
    report = EvalReport(
        run_ids=[r.id for r in runs],
        truth=np.array([r.total_mass for r in runs], dtype=np.float64),
        predicted=np.array([s.total for s in sig]),
        empty=np.array([r.empty or r.total_mass == 0 for r in runs], dtype=bool),
        smoothness=np.array([smoothness(s.mass_flow) for s in sig]),
    )
    if sidecars:
        pairs = [(s.mass_flow, sidecars[r.id].frame_mass(dt)) for s, r in zip(sig, runs)
                 if r.id in sidecars]
        if pairs:
            report.frame_r2 = r2_score(np.concatenate([p for p, _ in pairs]),
                                       np.concatenate([t for _, t in pairs]))
    return report


def flag_outliers(report: EvalReport, sidecars: Mapping[str, RunSidecar] | None = None,
                  fence: float = IQR_FENCE) -> list[Outlier]:
    """Runs whose percent error lies more than ``fence`` IQRs beyond the quartiles."""
    err = report.percent_error
    valid = ~np.isnan(err)
    if valid.sum() < 4:
        return []
    q1, q3 = np.percentile(err[valid], [25, 75])
    lo, hi = q1 - fence * (q3 - q1), q3 + fence * (q3 - q1)
    out = []
    for k in np.flatnonzero(valid & ((err < lo) | (err > hi))):
        rid = report.run_ids[k]
        side = (sidecars or {}).get(rid)
        reason = "speed" if side is not None and side.speed_fault else "unexplained"
        out.append(Outlier(rid, float(err[k]), reason))
    return out


@dataclass
class Diagnostics:
    bin_edges: np.ndarray
    histograms: dict              # method -> counts per bin
    scatter: list                 # (run_id, mean mass flow kg/s, percent error)
    outliers: list
    group_bias: dict              # group -> (runs, mean signed percent error)


def histogram_edges(errors: Sequence[np.ndarray], width: float = 5.0) -> np.ndarray:
    vals = np.concatenate([np.asarray(e, dtype=np.float64) for e in errors] or [np.zeros(0)])
    vals = vals[np.isfinite(vals)]
    if not vals.size:
        return np.array([-width, 0.0, width])
    lo = width * np.floor(vals.min() / width)
    hi = width * (np.floor(vals.max() / width) + 1)
    return np.arange(lo, hi + width / 2, width)


def run_groups(sidecar: RunSidecar | None) -> list[str]:
    if sidecar is None:
        return []
    groups = []
    if sidecar.clutter > 0:
        groups.append("clutter")
    if sidecar.n and np.mean(sidecar.occluder) > OCCLUDER_HEAVY:
        groups.append("occluder")
    if np.any(sidecar.glare):
        groups.append("glare")
    if sidecar.speed_fault:
        groups.append("speed_fault")
    return groups or ["clean"]


def diagnostics(report: EvalReport, signals: Sequence[PredictionSignal], runs: Sequence[Run],
                sidecars: Mapping[str, RunSidecar] | None = None,
                baseline: EvalReport | None = None, dt: float = tr.TrainingConfig.dt) -> Diagnostics:
    """Error histograms (vision vs baseline), flow-vs-error scatter, outliers
    and mean signed error per event group."""
    errors = {"vision": report.percent_error}
    if baseline is not None:
        errors["volumetric"] = baseline.percent_error
    edges = histogram_edges(list(errors.values()))
    hists = {k: np.histogram(v[np.isfinite(v)], bins=edges)[0] for k, v in errors.items()}
    err = report.percent_error
    scatter = []
    for k, r in enumerate(runs):
        if not report.empty[k]:
            scatter.append((r.id, r.total_mass / (r.n * dt), float(err[k])))
    groups: dict[str, list[float]] = {}
    for k, rid in enumerate(report.run_ids):
        if report.empty[k]:
            continue
        for g in run_groups((sidecars or {}).get(rid)):
            groups.setdefault(g, []).append(float(err[k]))
    bias = {g: (len(v), float(np.mean(v))) for g, v in sorted(groups.items())}
    outliers = flag_outliers(report, sidecars)
    report.outliers = outliers
    return Diagnostics(edges, hists, scatter, outliers, bias)
