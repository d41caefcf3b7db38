import pytest

from massflow.bench import bench
from massflow.nn import build_compact_regressor, build_tiny_regressor


def test_report_fields():
    rep = bench(build_tiny_regressor(), batch_size=4, frames=40, repeats=2)
    assert rep.frames >= 40 and rep.fps_mean > 0 and rep.repeats == 2


def test_invalid_arguments():
    with pytest.raises(ValueError):
        bench(build_tiny_regressor(), batch_size=0)


def test_batching_does_not_slow_inference():
    model = build_compact_regressor()
    one = bench(model, batch_size=1, frames=96, repeats=3)
    eight = bench(model, batch_size=8, frames=96, repeats=3)
    assert eight.fps_mean >= 0.8 * one.fps_mean
