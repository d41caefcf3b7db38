import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from massflow import rig
from massflow.records import read_dataset, read_sidecars

SMALL = dict(frame_shape=(32, 32, 3), n_runs=10, run_length=(4, 10))


def small(**kw):
    return rig.RigConfig(**{**SMALL, **kw})


def state(density, regime=None, **kw):
    regime = regime or rig.RigConfig().regime_list[0]
    base = dict(lighting=1.0, belt_color=rig.BELT_COLORS[0], belt_offset=0.0, occluder=False,
                glare=None, clutter=0.0)
    base.update(kw)
    return rig.FrameState(density, regime, **base)


def test_empty_frame_has_no_material():
    frame = rig.render_frame(state(0.0), np.random.default_rng(0))
    assert frame.coverage == 0.0
    assert not frame.height_map.any()


def test_render_is_deterministic_in_rng_stream():
    a = rig.render_frame(state(3.0, occluder=True), np.random.default_rng(5))
    b = rig.render_frame(state(3.0, occluder=True), np.random.default_rng(5))
    assert a.image.tobytes() == b.image.tobytes() and a.cloud.tobytes() == b.cloud.tobytes()


def test_coverage_monotone_in_density_within_regime():
    cov = [np.mean([rig.render_frame(state(d), np.random.default_rng(s)).coverage for s in range(20)])
           for d in (1.0, 2.5, 4.0, 6.0)]
    assert np.all(np.diff(cov) > 0)


def test_regimes_share_coverage_but_not_mass():
    green, burnt = rig.RigConfig().regime_list
    load = 0.01
    cg = [rig.render_frame(state(load * green.density, green), np.random.default_rng(s)).coverage
          for s in range(10)]
    cb = [rig.render_frame(state(load * burnt.density, burnt), np.random.default_rng(s)).coverage
          for s in range(10)]
    assert cg == cb
    assert burnt.density * load / (green.density * load) == pytest.approx(1.5)


def test_occluder_darkens_fixed_corner():
    rng = lambda: np.random.default_rng(1)
    plain = rig.render_frame(state(3.0), rng()).image
    fan = rig.render_frame(state(3.0, occluder=True), rng()).image
    assert fan[:4, :4].mean() < plain[:4, :4].mean()
    assert np.array_equal(fan[-8:, -8:], plain[-8:, -8:])


def test_clutter_follows_material():
    rng = lambda: np.random.default_rng(2)
    empty = rig.render_frame(state(0.0), rng()).image
    assert np.array_equal(rig.render_frame(state(0.0, clutter=1.0), rng()).image, empty)
    plain = rig.render_frame(state(4.0), rng()).image
    assert not np.array_equal(rig.render_frame(state(4.0, clutter=1.0), rng()).image, plain)


def test_grayscale_frames():
    cfg = small(frame_shape=(32, 32, 1))
    run, _ = rig.generate_run(cfg, 0)
    assert run.images.shape[1:] == (32, 32, 1)


def test_constant_profile_arithmetic():
    side = rig.RunSidecar("c", np.ones(100), np.full(100, 2.0), ["green"] * 100,
                          np.zeros(100, bool), np.zeros(100, bool), np.zeros(100))
    assert side.frame_mass(1 / 7.5).sum() == pytest.approx(26.667, abs=5e-4)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_conservation(seed):
    cfg = small(seed=seed, n_runs=4, speed_fault_rate=0.5)
    for run, side in rig.generate_runs(cfg):
        y = side.frame_mass(cfg.dt).sum()
        assert abs(run.total_mass - y) <= 1e-9 * max(y, 1e-300) or run.total_mass == y == 0
        assert side.n == run.n


def test_empty_runs_have_zero_mass_but_moving_belt():
    cfg = small(empty_fraction=0.5)
    for run, side in rig.generate_runs(cfg):
        if run.empty:
            assert run.total_mass == 0 and not side.hidden_density.any()
            assert np.all(run.speeds > 0)


def test_speed_fault_scales_recorded_speed():
    cfg = small(speed_fault_rate=1.0, empty_fraction=0.0)
    for run, side in rig.generate_runs(cfg):
        assert side.speed_fault
        recorded = np.sum(side.hidden_density * run.speeds * cfg.dt)
        assert recorded / run.total_mass == pytest.approx(side.fault_factor, rel=1e-6)
        assert side.fault_factor != 1.0


def test_plans_use_exact_counts():
    cfg = rig.RigConfig(n_runs=239, empty_fraction=8 / 239, speed_fault_rate=0.1)
    plans = rig.plan_runs(cfg)
    assert sum(p.empty for p in plans) == 8
    assert sum(p.speed_fault for p in plans) == round(231 * 0.1)
    assert not any(p.empty and p.speed_fault for p in plans)


def test_manifest_for_239_runs(tmp_path):
    cfg = rig.RigConfig(frame_shape=(16, 16, 1), n_runs=239, run_length=(2, 3), empty_fraction=8 / 239)
    manifest = rig.generate_dataset(cfg, tmp_path)
    assert manifest["empty_runs"]["total"] == 8
    assert sum(manifest["counts"].values()) == 239
    assert manifest["counts"] == {"train": 145, "validation": 47, "test": 47}
    assert json.loads((tmp_path / "manifest.json").read_text())["empty_runs"] == manifest["empty_runs"]


def test_dataset_is_byte_identical(tmp_path):
    cfg = small(seed=3)
    rig.generate_dataset(cfg, tmp_path / "a")
    rig.generate_dataset(cfg, tmp_path / "b")
    for name in ("train.mfds", "train.mfsc", "test.mfds", "validation.mfsc", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_frames_not_schema(tmp_path):
    a = rig.generate_dataset(small(seed=1), tmp_path / "a")
    b = rig.generate_dataset(small(seed=2), tmp_path / "b")
    assert a.keys() == b.keys()
    ra, rb = read_dataset(tmp_path / "a" / "train.mfds"), read_dataset(tmp_path / "b" / "train.mfds")
    assert ra[0].images.shape[1:] == rb[0].images.shape[1:]
    assert ra[0].images.tobytes() != rb[0].images.tobytes()


def test_written_dataset_matches_generator(tmp_path):
    cfg = small(seed=4)
    rig.generate_dataset(cfg, tmp_path)
    idx = rig.dataset_splits(cfg)["test"]
    stored = read_dataset(tmp_path / "test.mfds")
    sides = read_sidecars(tmp_path / "test.mfsc")
    for i, run in zip(idx, stored):
        fresh, side = rig.generate_run(cfg, i)
        assert run.id == fresh.id and run.total_mass == fresh.total_mass
        assert np.array_equal(run.images, fresh.images) and np.array_equal(run.speeds, fresh.speeds)
        assert np.array_equal(run.volumes, fresh.volumes)
        assert np.array_equal(sides[run.id].hidden_density, side.hidden_density)


def test_profiles_vary_within_runs():
    cfg = rig.RigConfig(frame_shape=(16, 16, 1), n_runs=12, run_length=(20, 30), empty_fraction=0)
    varying = [np.ptp(side.hidden_density) > 0 for _, side in rig.generate_runs(cfg)]
    assert sum(varying) >= len(varying) // 2


def test_regime_coverage_histograms_overlap():
    cfg = rig.RigConfig(frame_shape=(32, 32, 3), n_runs=24, run_length=(15, 25), empty_fraction=0,
                        occluder_rate=0)
    cov = {"green": [], "burnt": []}
    for run, side in rig.generate_runs(cfg):
        cov[run.regime].extend(side.coverage)
    edges = np.linspace(0, max(max(v) for v in cov.values()), 11)
    hg = np.histogram(cov["green"], edges)[0] / len(cov["green"])
    hb = np.histogram(cov["burnt"], edges)[0] / len(cov["burnt"])
    assert np.minimum(hg, hb).sum() > 0.5


def test_flow_profiles():
    r = np.random.default_rng(0)
    assert np.all(rig.flow_profile("constant", 50, r) >= 0)
    spiky = rig.flow_profile("intermittent", 150, r)
    assert (spiky == 0).any() and spiky.max() > 0
    with pytest.raises(ValueError):
        rig.flow_profile("square", 10, r)


@pytest.mark.parametrize("kw", [dict(empty_fraction=1.5), dict(regimes=()), dict(run_length=(1, 5)),
                                dict(run_length=(9, 5)), dict(speed_fault_rate=-0.1),
                                dict(profile_mix={"sawtooth": 1.0}), dict(frame_shape=(64, 64, 2))])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        rig.RigConfig(**kw)
