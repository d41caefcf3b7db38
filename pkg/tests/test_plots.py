import csv
import re

import numpy as np

from massflow import evaluation as ev
from massflow.plots import emit_plots
from massflow.runs import Run


def fixture_data():
    runs = [Run(f"r{k}", np.zeros((4, 1)), np.ones(4), 10.0 + k) for k in range(5)]
    vision = [ev.PredictionSignal(r.id, np.linspace(2, 3, 4) * (1 + 0.03 * k)) for k, r in enumerate(runs)]
    volume = [ev.PredictionSignal(r.id, np.full(4, 2.0 + 0.4 * k)) for k, r in enumerate(runs)]
    rep = ev.run_metrics(vision, runs)
    base = ev.run_metrics(volume, runs)
    diag = ev.diagnostics(rep, vision, runs, baseline=base)
    return {"vision": vision, "volumetric": volume}, diag


def test_overlay_and_diagnostic_files_are_byte_stable(tmp_path):
    signals, diag = fixture_data()
    a = emit_plots(signals, diag, tmp_path / "a", ["r1"])
    b = emit_plots(signals, diag, tmp_path / "b", ["r1"])
    names = sorted(p.name for p in a)
    assert names == ["error_histogram.csv", "error_histogram.svg", "flow_vs_error.csv",
                     "flow_vs_error.svg", "overlay_r1.csv", "overlay_r1.svg"]
    for pa, pb in zip(sorted(a), sorted(b)):
        assert pa.read_bytes() == pb.read_bytes()


def test_single_overlay_writes_svg_and_csv(tmp_path):
    signals, _ = fixture_data()
    files = emit_plots(signals, None, tmp_path, ["r2"])
    assert sorted(p.suffix for p in files) == [".csv", ".svg"]


def test_empty_input_writes_nothing(tmp_path):
    assert emit_plots({}, None, tmp_path / "none") == []
    assert not (tmp_path / "none").exists()


def test_histogram_edges_match_csv(tmp_path):
    signals, diag = fixture_data()
    emit_plots(signals, diag, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "error_histogram.csv")))
    csv_edges = {(float(r["bin_lo"]), float(r["bin_hi"])) for r in rows}
    svg = (tmp_path / "error_histogram.svg").read_text()
    drawn = {(float(lo), float(hi)) for lo, hi in re.findall(r'id="bin_vision_([-\d.e]+)_([-\d.e]+)"', svg)}
    assert drawn == csv_edges
    assert {(float(a), float(b)) for a, b in zip(diag.bin_edges[:-1], diag.bin_edges[1:])} == csv_edges
