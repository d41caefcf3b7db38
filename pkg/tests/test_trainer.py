import numpy as np
import pytest
from hypothesis import given, strategies as st

from massflow import nn
from massflow import trainer as tr
from massflow.runs import Run


def linear_setup(y=5.0, lam=0.05):
    model = nn.linear_model()
    run = Run("lin", np.array([[1.0], [2.0]]), [1.0, 1.0], y)
    cfg = tr.TrainingConfig(smoothing=lam, dt=1.0, dtype="float64")
    return model, np.array([1.0]), run, cfg


def random_run(r, n, shape=(8, 8, 1), name="r"):
    return Run(name, r.random((n, *shape)), r.uniform(0.5, 3.0, n), float(r.uniform(2, 20)))


# -- loss --------------------------------------------------------------------

def test_loss_linear_example():
    model, w, run, cfg = linear_setup()
    assert tr.run_loss(model, w, run, cfg) == pytest.approx(2.025, abs=1e-15)


def test_loss_perfect_constant_signal_is_zero():
    model = nn.linear_model()
    run = Run("c", np.ones((4, 1)), np.ones(4), 4.0)
    cfg = tr.TrainingConfig(dt=1.0, dtype="float64")
    assert tr.run_loss(model, np.array([1.0]), run, cfg) == 0.0


def test_zero_smoothing_reduces_to_squared_residual(rng):
    model = nn.build_tiny_regressor()
    w = model.init_params(0, np.float64).values
    for k in range(3):
        run = random_run(rng, 10 + k)
        cfg = tr.TrainingConfig(smoothing=0.0, dtype="float64")
        out, _ = model.forward(w, run.images)
        expect = (run.total_mass - np.sum(out * run.speeds * cfg.dt)) ** 2 / run.n
        assert tr.run_loss(model, w, run, cfg) == pytest.approx(expect, rel=1e-12)


def test_loss_times_n_recovers_unnormalised_terms(rng):
    model = nn.build_tiny_regressor()
    w = model.init_params(1, np.float64).values
    run = random_run(rng, 9)
    cfg = tr.TrainingConfig(smoothing=0.3, dtype="float64")
    out, _ = model.forward(w, run.images)
    yhat = out * run.speeds * cfg.dt
    raw = (run.total_mass - yhat.sum()) ** 2 + 0.3 * np.sum(np.diff(yhat) ** 2)
    assert tr.run_loss(model, w, run, cfg) * run.n == pytest.approx(raw, rel=1e-12)


def test_smoothing_operand_flag(rng):
    model = nn.build_tiny_regressor()
    w = model.init_params(1, np.float64).values
    run = random_run(rng, 7)
    raw_cfg = tr.TrainingConfig(smoothing=0.5, smooth_on_scaled=False, dtype="float64")
    out, _ = model.forward(w, run.images)
    yhat = out * run.speeds * raw_cfg.dt
    expect = ((run.total_mass - yhat.sum()) ** 2 + 0.5 * np.sum(np.diff(out) ** 2)) / run.n
    assert tr.run_loss(model, w, run, raw_cfg) == pytest.approx(expect, rel=1e-12)
    g = tr.streaming_run_gradient(model, w, run, raw_cfg, 3)
    assert tr.rel_error(g, tr.direct_run_gradient(model, w, run, raw_cfg)) < 1e-9


# -- accumulation ------------------------------------------------------------

def test_accumulator_linear_example():
    model, w, run, cfg = linear_setup()
    acc = tr.GradAccumulator(1)
    tr.accumulate_batch(acc, model, w, run.images[:1], run.speeds[:1], cfg, start=0)
    assert acc.smooth_sum.tolist() == [0.0]
    tr.accumulate_batch(acc, model, w, run.images[1:], run.speeds[1:], cfg, start=1)
    assert acc.sum_pred == 3.0
    assert acc.grad_sum.tolist() == [3.0]
    assert acc.smooth_sum.tolist() == [1.0]


def test_split_batches_equal_single_batch():
    model, w, run, cfg = linear_setup()
    one = tr.GradAccumulator(1)
    tr.accumulate_batch(one, model, w, run.images, run.speeds, cfg)
    two = tr.GradAccumulator(1)
    tr.accumulate_batch(two, model, w, run.images[:1], run.speeds[:1], cfg)
    tr.accumulate_batch(two, model, w, run.images[1:], run.speeds[1:], cfg)
    for a, b in ((one.sum_pred, two.sum_pred), (one.grad_sum, two.grad_sum),
                 (one.smooth_sum, two.smooth_sum)):
        assert np.allclose(a, b, rtol=1e-12, atol=0)


def test_reset_clears_everything():
    model, w, run, cfg = linear_setup()
    acc = tr.GradAccumulator(1)
    tr.accumulate_batch(acc, model, w, run.images, run.speeds, cfg)
    acc.reset()
    assert acc.sum_pred == 0 and acc.penalty_sum == 0 and acc.carry is None
    assert not acc.grad_sum.any() and not acc.smooth_sum.any() and acc.frames_seen == 0


def test_out_of_order_batch_rejected():
    model, w, run, cfg = linear_setup()
    acc = tr.GradAccumulator(1)
    tr.accumulate_batch(acc, model, w, run.images[:1], run.speeds[:1], cfg, start=0)
    with pytest.raises(tr.FrameOrderError):
        tr.accumulate_batch(acc, model, w, run.images[1:], run.speeds[1:], cfg, start=0)


def test_finalize_without_frames_is_an_error():
    with pytest.raises(tr.IncompleteRunError):
        tr.finalize_run_gradient(tr.GradAccumulator(1), 1.0, 2, tr.TrainingConfig())


# -- gradients ---------------------------------------------------------------

def test_gradient_linear_examples():
    model, w, run, cfg0 = linear_setup(lam=0.0)
    assert tr.streaming_run_gradient(model, w, run, cfg0, 1).tolist() == [-6.0]
    model, w, run, cfg = linear_setup(lam=0.05)
    g = tr.streaming_run_gradient(model, w, run, cfg, 1)
    assert g[0] == pytest.approx(-5.95, abs=1e-12)
    fd = tr.finite_difference_gradient(model, w, run, cfg)
    assert abs(fd[0] - g[0]) / abs(g[0]) < 1e-6


def test_zero_residual_gives_zero_gradient():
    model, w, run, cfg = linear_setup(y=3.0, lam=0.0)
    assert tr.streaming_run_gradient(model, w, run, cfg).tolist() == [0.0]


def test_smoothing_component_isolated(rng):
    model = nn.build_tiny_regressor()
    w = model.init_params(2, np.float64).values
    run = random_run(rng, 11)
    c0 = tr.TrainingConfig(smoothing=0.0, dtype="float64")
    c1 = tr.TrainingConfig(smoothing=0.05, dtype="float64")
    acc = tr.GradAccumulator(w.size)
    tr.accumulate_batch(acc, model, w, run.images, run.speeds, c1)
    diff = tr.streaming_run_gradient(model, w, run, c1) - tr.streaming_run_gradient(model, w, run, c0)
    assert tr.rel_error(diff, 2 * 0.05 / run.n * acc.smooth_sum) < 1e-9


def test_single_frame_run_has_no_smoothing_term(rng):
    model = nn.build_tiny_regressor()
    w = model.init_params(0, np.float64).values
    run = random_run(rng, 1)
    cfg = tr.TrainingConfig(smoothing=0.5, dtype="float64")
    out, _ = model.forward(w, run.images)
    assert tr.run_loss(model, w, run, cfg) == pytest.approx(
        (run.total_mass - out[0] * run.speeds[0] * cfg.dt) ** 2)


@given(st.integers(0, 10_000), st.integers(2, 20), st.sampled_from([0.0, 0.05, 0.5]),
       st.integers(1, 9))
def test_streaming_equals_direct_for_any_batching(seed, n, lam, bs):
    r = np.random.default_rng(seed)
    model = nn.build_tiny_regressor()
    w = r.uniform(-0.5, 0.5, model.n_params)
    run = random_run(r, n)
    cfg = tr.TrainingConfig(smoothing=lam, dtype="float64")
    direct = tr.direct_run_gradient(model, w, run, cfg)
    assert tr.rel_error(tr.streaming_run_gradient(model, w, run, cfg, bs), direct) <= 1e-9


def test_gradient_matches_finite_differences(rng):
    model = nn.mlp(3, (5, 4), name="dense")
    w = model.init_params(3, np.float64).values
    run = Run("d", rng.uniform(-1, 1, (16, 3)), rng.uniform(1, 3, 16), 7.0)
    cfg = tr.TrainingConfig(smoothing=0.05, dtype="float64")
    report = tr.grad_check(model, w, run, cfg)
    assert report.passed, report.summary()


def test_grad_check_limits(rng):
    model = nn.build_compact_regressor()
    run = random_run(rng, 4, (64, 64, 3))
    with pytest.raises(ValueError):
        tr.grad_check(model, model.init_params(0), run, tr.TrainingConfig())


# -- updates -----------------------------------------------------------------

def test_sgd_update_examples():
    cfg = tr.TrainingConfig(learning_rate=0.1)
    assert tr.apply_update(np.array([1.0]), np.array([-5.95]), None, cfg)[0] == pytest.approx(1.595)
    zero = tr.TrainingConfig(learning_rate=0.0)
    assert tr.apply_update(np.array([1.0]), np.array([-5.95]), None, zero).tolist() == [1.0]


def test_non_finite_gradient_rejected():
    with pytest.raises(tr.NonFiniteError):
        tr.apply_update(np.array([1.0]), np.array([np.nan]), None, tr.TrainingConfig())


@pytest.mark.parametrize("opt", tr.OPTIMIZERS)
def test_identical_update_sequences_are_bit_identical(opt, rng):
    cfg = tr.TrainingConfig(optimizer=opt, learning_rate=0.01)
    grads = rng.normal(size=(5, 4))
    outs = []
    for _ in range(2):
        w, state = np.zeros(4), tr.Optimizer(cfg, 4)
        for g in grads:
            w = tr.apply_update(w, g, state, cfg)
        outs.append(w.tobytes())
    assert outs[0] == outs[1]


def test_cosine_schedule_endpoints():
    cfg = tr.TrainingConfig(learning_rate=1e-3, epochs=11, lr_schedule="cosine", lr_final_ratio=0.1)
    assert tr.epoch_learning_rate(cfg, 0) == pytest.approx(1e-3)
    assert tr.epoch_learning_rate(cfg, 10) == pytest.approx(1e-4)
    assert tr.epoch_learning_rate(tr.TrainingConfig(epochs=5), 3) == 1e-3


# -- epochs ------------------------------------------------------------------

@pytest.mark.parametrize("bs", [1, 3, 8, 100])
def test_one_update_per_run(bs, rng):
    model = nn.build_tiny_regressor()
    runs = [random_run(rng, n, name=f"r{n}") for n in (3, 5, 2, 7)]
    cfg = tr.TrainingConfig(batch_size=bs, learning_rate=1e-3)
    _, rep = tr.train_epoch(runs, model, model.init_params(0), cfg)
    assert rep.updates == len(runs)


def test_two_run_epoch_has_two_updates(rng):
    model = nn.build_tiny_regressor()
    runs = [random_run(rng, 4, name="a"), random_run(rng, 9, name="b")]
    _, rep = tr.train_epoch(runs, model, model.init_params(0), tr.TrainingConfig(batch_size=8))
    assert rep.updates == 2


def test_mixed_batch_updates_use_only_own_frames(rng):
    # batch 8 covers the last 3 frames of A and the first 5 of B
    model = nn.build_tiny_regressor()
    a, b = random_run(rng, 11, name="a"), random_run(rng, 9, name="b")
    cfg = tr.TrainingConfig(batch_size=8, learning_rate=1e-2, dtype="float64", shuffle_runs=False)
    segs = list(tr._batch_segments([a, b], 8))
    assert (0, 8, 11, True) in segs and (1, 0, 5, False) in segs
    w0 = model.init_params(0, np.float64).values
    got, _ = tr.train_epoch([a, b], model, w0.copy(), cfg)
    w = w0 - 1e-2 * tr.direct_run_gradient(model, w0, a, cfg)
    w = w - 1e-2 * tr.direct_run_gradient(model, w, b, cfg)
    assert tr.rel_error(got, w) < 1e-9


def test_single_run_epoch_equals_direct_update():
    model, w, run, cfg = linear_setup()
    cfg = tr.TrainingConfig(smoothing=0.05, dt=1.0, dtype="float64", learning_rate=0.1, batch_size=1)
    got, _ = tr.train_epoch([run], model, w.copy(), cfg)
    expect = tr.apply_update(w, tr.direct_run_gradient(model, w, run, cfg), None, cfg)
    assert tr.rel_error(got, expect) < 1e-9


def test_epoch_is_reproducible(rng):
    model = nn.build_tiny_regressor()
    runs = [random_run(rng, n, name=f"r{n}") for n in (6, 4, 9)]
    cfg = tr.TrainingConfig(batch_size=4, optimizer="adam", seed=3)
    a, ra = tr.train_epoch(runs, model, model.init_params(0), cfg)
    b, rb = tr.train_epoch(runs, model, model.init_params(0), cfg)
    assert a.values.tobytes() == b.values.tobytes()
    assert [r.run_id for r in ra.rows] == [r.run_id for r in rb.rows]


def test_non_finite_update_is_skipped(rng, caplog):
    model = nn.linear_model()
    good = Run("ok", np.ones((3, 1)), np.ones(3), 2.0)
    huge = Run("huge", np.full((2, 1), 1e200), np.ones(2), 1.0)
    cfg = tr.TrainingConfig(dtype="float64", shuffle_runs=False)
    w, rep = tr.train_epoch([good, huge], model, np.array([1.0]), cfg)
    assert rep.updates == 1 and np.all(np.isfinite(w))


def test_output_bias_init_uses_label_scale():
    model = nn.build_tiny_regressor()
    runs = [Run("a", np.zeros((3, 8, 8, 1)), [2.0, 2.0, 2.0], 6.0)]
    cfg = tr.TrainingConfig(dt=0.5)
    p = tr.init_output_bias(model, model.init_params(0), runs, cfg)
    assert tr.mean_density(runs, cfg) == pytest.approx(2.0)
    assert p.values[-1] == pytest.approx(2.0)


# -- splits ------------------------------------------------------------------

def test_split_sizes_for_239_runs():
    parts = tr.split_indices(239, [False] * 239)
    assert [len(p) for p in parts] == [145, 47, 47]


def test_split_all_train_and_determinism():
    assert [len(p) for p in tr.split_indices(10, [False] * 10, (1, 0, 0))] == [10, 0, 0]
    empty = [i % 7 == 0 for i in range(50)]
    assert tr.split_indices(50, empty, seed=4) == tr.split_indices(50, empty, seed=4)


@given(st.integers(3, 300), st.floats(0, 0.5), st.integers(0, 1000))
def test_split_is_a_partition_with_spread_empties(n, frac, seed):
    r = np.random.default_rng(seed)
    empty = list(r.random(n) < frac)
    parts = tr.split_indices(n, empty, seed=seed)
    flat = sorted(i for p in parts for i in p)
    assert flat == list(range(n))
    n_empty = sum(empty)
    if n_empty >= 5:
        assert sum(empty[i] for i in parts[2]) >= 1
