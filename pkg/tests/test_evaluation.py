import numpy as np
import pytest
from hypothesis import given, strategies as st

from massflow import evaluation as ev
from massflow import nn, trainer as tr
from massflow.rig import RunSidecar
from massflow.runs import Run


def run_of(y, n=3, rid=None, empty=False):
    return Run(rid or f"r{y}", np.zeros((n, 1)), np.ones(n), float(y), empty=empty)


def sidecar(rid, hidden, speed=None, fault=False, clutter=0.0, occluder=None):
    hidden = np.asarray(hidden, float)
    n = hidden.size
    return RunSidecar(rid, hidden, np.ones(n) if speed is None else np.asarray(speed, float),
                      ["green"] * n, np.zeros(n, bool) if occluder is None else np.asarray(occluder),
                      np.zeros(n, bool), np.zeros(n), fault, 1.7 if fault else 1.0, clutter)


def test_mae_example():
    runs = [run_of(100, rid="a"), run_of(100, rid="b")]
    sig = [ev.PredictionSignal("a", [94, 0, 0]), ev.PredictionSignal("b", [50, 60, 0])]
    rep = ev.run_metrics(sig, runs)
    assert rep.percent_error.tolist() == pytest.approx([-6.0, 10.0])
    assert rep.mae_percent == pytest.approx(8.0)


def test_perfect_predictions():
    runs = [run_of(6, rid="a"), run_of(3, rid="b")]
    sides = {"a": sidecar("a", [1, 2, 3]), "b": sidecar("b", [2, 0, 1])}
    sig = [ev.PredictionSignal("a", [1, 2, 3]), ev.PredictionSignal("b", [2, 0, 1])]
    rep = ev.run_metrics(sig, runs, sides, dt=1.0)
    assert rep.mae_percent == 0 and rep.frame_r2 == 1.0


def test_r2_exact_formula():
    pred, truth = np.array([1.0, 2.0, 4.0]), np.array([1.0, 3.0, 5.0])
    sst = np.sum((truth - 3.0) ** 2)
    assert ev.r2_score(pred, truth) == pytest.approx(1 - 2.0 / sst)


def test_constant_signal_has_zero_smoothness():
    assert ev.smoothness(np.full(10, 2.5)) == 0.0
    assert ev.smoothness([1.0]) == 0.0
    assert ev.smoothness([0.0, 1.0, 3.0]) == pytest.approx(2.5)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=30), st.floats(0.01, 1))
def test_smoothness_proportional_to_penalty(d, lam):
    m = np.asarray(d)
    penalty = lam / m.size * np.sum(np.diff(m) ** 2)
    assert ev.smoothness(m) * (m.size - 1) * lam / m.size == pytest.approx(penalty, rel=1e-9, abs=1e-12)


@given(st.lists(st.tuples(st.floats(1, 1000), st.floats(0, 2000)), min_size=1, max_size=12),
       st.integers(0, 1000))
def test_mae_permutation_invariant(pairs, seed):
    runs = [run_of(y, n=1, rid=f"r{k}") for k, (y, _) in enumerate(pairs)]
    sig = [ev.PredictionSignal(f"r{k}", [p]) for k, (_, p) in enumerate(pairs)]
    perm = np.random.default_rng(seed).permutation(len(runs))
    a = ev.run_metrics(sig, runs).mae_percent
    b = ev.run_metrics([sig[i] for i in perm], [runs[i] for i in perm]).mae_percent
    assert a == pytest.approx(b, rel=1e-12)


def test_empty_runs_reported_in_kg():
    runs = [run_of(10, rid="a"), Run("e", np.zeros((2, 1)), np.ones(2), 0.0, empty=True)]
    rep = ev.run_metrics([ev.PredictionSignal("a", [4, 4, 4]), ev.PredictionSignal("e", [0.5, -1.0])], runs)
    assert rep.mae_percent == pytest.approx(20.0)
    assert rep.empty_abs_kg.tolist() == [0.5]
    assert np.isnan(rep.percent_error[1])


def test_missing_prediction_raises():
    with pytest.raises(ev.MissingRunError):
        ev.run_metrics([], [run_of(1)])


def test_zero_speed_gives_zero_signal():
    model = nn.build_tiny_regressor()
    run = Run("z", np.random.default_rng(0).random((5, 8, 8, 1)), np.zeros(5), 0.0, empty=True)
    sig = ev.predict_signal(model, model.init_params(0), run, tr.TrainingConfig())
    assert np.all(sig.mass_flow == 0)


# values on a 0.01 grid: a tiny negative step would vanish in float rounding
@given(st.lists(st.integers(-500, 500).map(lambda k: k / 100), min_size=1, max_size=40))
def test_cumulative_monotone_iff_nonnegative(values):
    sig = ev.PredictionSignal("x", values)
    monotone = bool(np.all(np.diff(np.concatenate([[0.0], sig.cumulative])) >= 0))
    assert monotone == bool(np.all(np.asarray(values) >= 0))


def outlier_setup(fault_ids):
    rng = np.random.default_rng(1)
    runs, sig, sides = [], [], {}
    for k in range(20):
        rid = f"r{k}"
        y = 100.0
        pred = y * (1 + rng.normal(0, 0.03))
        if rid in fault_ids:
            pred *= 1.8
        runs.append(run_of(y, n=1, rid=rid))
        sig.append(ev.PredictionSignal(rid, [pred]))
        sides[rid] = sidecar(rid, [y], fault=rid in fault_ids)
    return ev.run_metrics(sig, runs), sides


def test_speed_faults_flagged():
    rep, sides = outlier_setup({"r3", "r11"})
    flags = ev.flag_outliers(rep, sides)
    assert {o.run_id for o in flags if o.reason == "speed"} == {"r3", "r11"}


def test_no_faults_no_speed_flags():
    rep, sides = outlier_setup(set())
    assert not [o for o in ev.flag_outliers(rep, sides) if o.reason == "speed"]


def test_unexplained_outlier_without_sidecar():
    rep, _ = outlier_setup({"r5"})
    assert [(o.run_id, o.reason) for o in ev.flag_outliers(rep)] == [("r5", "unexplained")]


def test_diagnostics_groups_and_histograms():
    runs = [run_of(10, rid="a"), run_of(10, rid="b"), run_of(10, rid="c")]
    sig = [ev.PredictionSignal("a", [4, 4, 4]), ev.PredictionSignal("b", [3, 3, 3]),
           ev.PredictionSignal("c", [3, 3, 4])]
    sides = {"a": sidecar("a", [1, 1, 1], clutter=0.8), "b": sidecar("b", [1, 1, 1]),
             "c": sidecar("c", [1, 1, 1], occluder=[True, False, False])}
    rep = ev.run_metrics(sig, runs, sides, dt=1.0)
    diag = ev.diagnostics(rep, sig, runs, sides, baseline=rep, dt=1.0)
    assert diag.group_bias["clutter"] == (1, pytest.approx(20.0))
    assert diag.group_bias["clean"] == (1, pytest.approx(-10.0))
    assert "occluder" in diag.group_bias
    assert set(diag.histograms) == {"vision", "volumetric"}
    assert diag.histograms["vision"].sum() == 3
    assert np.all(np.diff(diag.bin_edges) == 5.0)


def test_report_csv(tmp_path):
    runs = [run_of(100, rid="a")]
    rep = ev.run_metrics([ev.PredictionSignal("a", [94, 0, 0])], runs)
    rep.write_csv(tmp_path / "runs.csv")
    lines = (tmp_path / "runs.csv").read_text().splitlines()
    assert lines[0].startswith("run_id,truth_kg,predicted_kg,percent_error")
    assert lines[1].split(",")[3] == "-6.0"
