"""Forward-only inference throughput."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .nn import ModelSpec, ParamVector


@dataclass
class BenchReport:
    batch_size: int
    frames: int
    fps_mean: float
    fps_std: float
    repeats: int

    def to_dict(self) -> dict:
        return asdict(self)


def bench(model: ModelSpec, params: ParamVector | None = None, batch_size: int = 8,
          frames: int = 1000, repeats: int = 5, warmup_batches: int = 3, seed: int = 0) -> BenchReport:
    """Frames per second of ``model.forward`` without a tape.

    Each of ``repeats`` timed segments covers ``frames / repeats`` frames
    (rounded up to whole batches), so at least ``frames`` frames are timed.
    """
    if batch_size < 1 or frames < 1 or repeats < 1:
        raise ValueError("batch size, frames and repeats must be positive")
    params = params if params is not None else model.init_params(seed)
    rng = np.random.default_rng(seed)
    x = rng.random((batch_size, *model.input_shape), dtype=np.float32)
    values = params.values
    for _ in range(warmup_batches):
        model.forward(values, x, keep_tape=False)
    per_repeat = -(-frames // repeats)
    batches = -(-per_repeat // batch_size)
    rates = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(batches):
            model.forward(values, x, keep_tape=False)
        rates.append(batches * batch_size / (time.perf_counter() - t0))
    return BenchReport(batch_size, batches * batch_size * repeats, float(np.mean(rates)),
                       float(np.std(rates)), repeats)
