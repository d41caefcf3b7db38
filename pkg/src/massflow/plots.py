"""SVG figures with the CSV tables behind them.

Output is byte-stable for identical inputs: the SVG hash salt is fixed and
no creation date is written. Histogram bars carry ids of the form
``bin_<method>_<lo>_<hi>`` so the drawn edges can be read back from the file.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import Diagnostics, PredictionSignal  # noqa: E402

log = logging.getLogger(__name__)

_RC = {"svg.hashsalt": "massflow", "svg.fonttype": "none", "font.size": 9}
_COLORS = {"vision": "#1f77b4", "volumetric": "#d62728"}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _num(v: float) -> str:
    return repr(float(v))


def plot_overlay(run_id: str, signals: Mapping[str, PredictionSignal], out_dir: Path,
                 truth: np.ndarray | None = None) -> list[Path]:
    """Per-frame mass flow of each method for one run, plus its CSV."""
    names = sorted(signals)
    n = max(len(signals[k]) for k in names)
    csv_path = out_dir / f"overlay_{run_id}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index"] + [f"{k}_kg" for k in names]
                   + [f"{k}_cumulative_kg" for k in names] + (["truth_kg"] if truth is not None else []))
        for j in range(n):
            row = [j] + [_num(signals[k].mass_flow[j]) for k in names]
            row += [_num(signals[k].cumulative[j]) for k in names]
            if truth is not None:
                row.append(_num(truth[j]))
            w.writerow(row)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7, 3))
        for k in ("volumetric", "vision") if set(names) <= {"vision", "volumetric"} else names:
            if k in signals:
                ax.plot(signals[k].mass_flow, label=k, color=_COLORS.get(k), lw=1)
        if truth is not None:
            ax.plot(truth, label="truth", color="0.4", lw=0.8, ls="--")
        ax.set_xlabel("frame")
        ax.set_ylabel("mass per frame (kg)")
        ax.set_title(run_id)
        ax.legend(loc="upper right")
        fig.tight_layout()
        svg = _save(fig, out_dir / f"overlay_{run_id}.svg")
    return [svg, csv_path]


def plot_histogram(diag: Diagnostics, out_dir: Path) -> list[Path]:
    edges = diag.bin_edges
    methods = sorted(diag.histograms)
    csv_path = out_dir / "error_histogram.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi"] + methods)
        for i in range(edges.size - 1):
            w.writerow([_num(edges[i]), _num(edges[i + 1])] + [int(diag.histograms[m][i]) for m in methods])
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for m in methods:
            bars = ax.bar(edges[:-1], diag.histograms[m], width=np.diff(edges), align="edge",
                          alpha=0.5, color=_COLORS.get(m), label=m, edgecolor="black", linewidth=0.4)
            for i, bar in enumerate(bars):
                bar.set_gid(f"bin_{m}_{_num(edges[i])}_{_num(edges[i + 1])}")
        ax.set_xlabel("percent error")
        ax.set_ylabel("runs")
        ax.legend()
        fig.tight_layout()
        svg = _save(fig, out_dir / "error_histogram.svg")
    return [svg, csv_path]


def plot_scatter(diag: Diagnostics, out_dir: Path) -> list[Path]:
    csv_path = out_dir / "flow_vs_error.csv"
    flagged = {o.run_id: o.reason for o in diag.outliers}
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "mean_mass_flow_kg_s", "percent_error", "outlier"])
        for rid, flow, err in diag.scatter:
            w.writerow([rid, _num(flow), _num(err), flagged.get(rid, "")])
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        pts = np.array([(f, e) for _, f, e in diag.scatter], dtype=float).reshape(-1, 2)
        mask = np.array([rid in flagged for rid, _, _ in diag.scatter], dtype=bool)
        ax.scatter(pts[~mask, 0], pts[~mask, 1], s=10, color=_COLORS["vision"], label="runs")
        if mask.any():
            ax.scatter(pts[mask, 0], pts[mask, 1], s=22, marker="x", color="black", label="outliers")
        ax.axhline(0, color="0.6", lw=0.6)
        ax.set_xlabel("mean mass flow (kg/s)")
        ax.set_ylabel("percent error")
        ax.legend()
        fig.tight_layout()
        svg = _save(fig, out_dir / "flow_vs_error.svg")
    return [svg, csv_path]


def emit_plots(signals: Mapping[str, Sequence[PredictionSignal]], diag: Diagnostics | None,
               out_dir, overlay_runs: Sequence[str] = (), truth: Mapping[str, np.ndarray] | None = None
               ) -> list[Path]:
    """Write overlays for ``overlay_runs`` and, given diagnostics, the error
    histogram and flow-vs-error scatter. Returns the files written."""
    has_runs = any(len(v) for v in signals.values())
    if not has_runs and (diag is None or not diag.scatter):
        log.info("nothing to plot")
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    index = {m: {s.run_id: s for s in sig} for m, sig in signals.items()}
    for rid in overlay_runs:
        per = {m: idx[rid] for m, idx in index.items() if rid in idx}
        if per:
            written += plot_overlay(rid, per, out, (truth or {}).get(rid))
    if diag is not None and diag.scatter:
        written += plot_histogram(diag, out)
        written += plot_scatter(diag, out)
    return written
