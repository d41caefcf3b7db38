"""Training from run-level aggregate labels.

Each run contributes one loss term

    L_i = (1/n_i) * (y_i - sum_j yhat_ij)^2 + (lam/n_i) * sum_{j>=2} d_j^2

with ``yhat_ij = f(x_ij; w) * V_ij * dt`` and ``d_j`` the first difference of
the smoothed signal (the scaled predictions by default, the raw network
outputs when ``smooth_on_scaled`` is off). Runs are streamed through the
model in fixed-size batches; the gradient terms are accumulated batch by
batch and one parameter update is applied when the run ends.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .nn import ParamVector, Tape
from .runs import Run

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd-momentum", "adam")
SCHEDULES = ("constant", "cosine")


class IncompleteRunError(RuntimeError):
    pass


class FrameOrderError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainingConfig:
    smoothing: float = 0.05
    learning_rate: float = 1e-3
    dt: float = 1 / 7.5
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grayscale: bool = False
    smooth_on_scaled: bool = True
    split: tuple = (0.6, 0.2, 0.2)
    shuffle_runs: bool = True
    dtype: str = "float32"
    lr_schedule: str = "constant"
    lr_final_ratio: float = 0.1

    def __post_init__(self):
        if self.smoothing < 0:
            raise ValueError("smoothing strength must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr schedule must be one of {SCHEDULES}")
        self.split = tuple(float(r) for r in self.split)
        self.adam_betas = tuple(self.adam_betas)
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError("split ratios must be three non-negative numbers summing to 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        return asdict(self)


def _values(params) -> np.ndarray:
    return params.values if isinstance(params, ParamVector) else np.asarray(params)


def _rewrap(params, values: np.ndarray):
    return params.with_values(values) if isinstance(params, ParamVector) else values


def prepare_inputs(x: np.ndarray, cfg: TrainingConfig) -> np.ndarray:
    if cfg.grayscale and x.ndim == 4 and x.shape[-1] == 3:
        lum = np.asarray([0.299, 0.587, 0.114], dtype=x.dtype)
        return (x @ lum)[..., None]
    return x


def run_inputs(run: Run, start: int, stop: int, cfg: TrainingConfig) -> np.ndarray:
    return prepare_inputs(run.inputs(start, stop, cfg.np_dtype), cfg)


# -- direct (whole-run) evaluation ------------------------------------------

def _run_outputs(model, values, run: Run, cfg: TrainingConfig, chunk: int = 256) -> np.ndarray:
    outs = [model.forward(values, run_inputs(run, s, min(s + chunk, run.n), cfg), keep_tape=False)[0]
            for s in range(0, run.n, chunk)]
    return np.concatenate(outs).astype(np.float64)


def _smoothed(raw: np.ndarray, scale: np.ndarray, cfg: TrainingConfig) -> np.ndarray:
    return raw * scale if cfg.smooth_on_scaled else raw


def run_loss(model, params, run: Run, cfg: TrainingConfig) -> float:
    """Direct, non-streaming loss of one run."""
    values = _values(params)
    raw = _run_outputs(model, values, run, cfg)
    if not np.all(np.isfinite(raw)):
        raise NonFiniteError(f"run {run.id}: non-finite prediction")
    scale = run.speeds * cfg.dt
    n = run.n
    residual = run.total_mass - np.sum(raw * scale)
    d = np.diff(_smoothed(raw, scale, cfg))
    return float(residual ** 2 / n + cfg.smoothing / n * np.sum(d ** 2))


def direct_run_gradient(model, params, run: Run, cfg: TrainingConfig) -> np.ndarray:
    """Gradient of ``run_loss`` from one forward and one backward over the whole run."""
    values = _values(params)
    x = run_inputs(run, 0, run.n, cfg)
    raw, tape = model.forward(values, x)
    raw = raw.astype(np.float64)
    scale = run.speeds * cfg.dt
    n = run.n
    residual = run.total_mass - np.sum(raw * scale)
    sig_scale = scale if cfg.smooth_on_scaled else np.ones(n)
    d = np.diff(raw * sig_scale)
    smooth_coef = np.zeros(n)
    smooth_coef[1:] += d
    smooth_coef[:-1] -= d
    coef = -2.0 / n * residual * scale + 2.0 * cfg.smoothing / n * smooth_coef * sig_scale
    return model.backward(values, tape, coef.astype(values.dtype))


# -- streaming accumulation --------------------------------------------------

@dataclass
class Carry:
    """Last frame of the previous batch: its smoothed value and backward state."""

    signal: float
    signal_scale: float
    tape: Tape


@dataclass
class GradAccumulator:
    n_params: int
    dtype: type = np.float64
    sum_pred: float = 0.0
    penalty_sum: float = 0.0
    grad_sum: np.ndarray = None
    smooth_sum: np.ndarray = None
    carry: Carry | None = None
    frames_seen: int = 0

    def __post_init__(self):
        self.reset()

    def reset(self) -> None:
        self.sum_pred = 0.0
        self.penalty_sum = 0.0
        self.grad_sum = np.zeros(self.n_params, dtype=self.dtype)
        self.smooth_sum = np.zeros(self.n_params, dtype=self.dtype)
        self.carry = None
        self.frames_seen = 0

    def loss(self, y: float, n: int, smoothing: float) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            resid = np.float64(y) - np.float64(self.sum_pred)
            return float(resid * resid / n + smoothing / n * np.float64(self.penalty_sum))


def accumulate_batch(acc: GradAccumulator, model, params, inputs: np.ndarray,
                     speeds: np.ndarray, cfg: TrainingConfig, start: int | None = None
                     ) -> GradAccumulator:
    """Fold one chronological batch of a run into the accumulator.

    ``start`` is the index of the batch's first frame within its run; when
    given it is checked against the frames already seen.
    """
    if start is not None:
        if start == 0 and acc.carry is not None:
            raise FrameOrderError("run starts while a carry from another run is pending")
        if start != acc.frames_seen:
            raise FrameOrderError(f"batch starts at frame {start}, expected {acc.frames_seen}")
    values = _values(params)
    speeds = np.asarray(speeds, dtype=np.float64)
    raw, tape = model.forward(values, inputs)
    raw64 = raw.astype(np.float64)
    if not np.all(np.isfinite(raw64)):
        raise NonFiniteError("non-finite prediction")
    scale = speeds * cfg.dt
    acc.sum_pred += float(np.sum(raw64 * scale))
    acc.grad_sum += model.backward(values, tape, scale.astype(values.dtype))

    sig_scale = scale if cfg.smooth_on_scaled else np.ones_like(scale)
    signal = raw64 * sig_scale
    if acc.carry is not None:
        signal = np.concatenate([[acc.carry.signal], signal])
        sig_scale_all = np.concatenate([[acc.carry.signal_scale], sig_scale])
        tape_all = Tape.concat([acc.carry.tape, tape])
    else:
        sig_scale_all, tape_all = sig_scale, tape
    d = np.diff(signal)
    if d.size:
        # each difference pairs +d on the later frame with -d on the earlier one;
        # the last frame's -d_next is settled by the next batch through the carry
        coef = np.zeros(signal.size)
        coef[1:] += d
        coef[:-1] -= d
        acc.smooth_sum += model.backward(values, tape_all, (coef * sig_scale_all).astype(values.dtype))
        acc.penalty_sum += float(np.sum(d ** 2))
    acc.carry = Carry(float(signal[-1]), float(sig_scale_all[-1]), tape.select(-1))
    acc.frames_seen += speeds.size
    return acc


def finalize_run_gradient(acc: GradAccumulator, y: float, n: int, cfg: TrainingConfig) -> np.ndarray:
    """Combine the accumulated terms into dL/dw for the run and reset."""
    if acc.frames_seen != n:
        raise IncompleteRunError(f"accumulated {acc.frames_seen} of {n} frames")
    residual = y - acc.sum_pred
    with np.errstate(over="ignore", invalid="ignore"):
        grad = -2.0 / n * residual * acc.grad_sum + 2.0 * cfg.smoothing / n * acc.smooth_sum
    acc.reset()
    return grad


def streaming_run_gradient(model, params, run: Run, cfg: TrainingConfig,
                           batch_size: int | None = None) -> np.ndarray:
    bs = batch_size or cfg.batch_size
    values = _values(params)
    acc = GradAccumulator(values.size, values.dtype.type)
    for s in range(0, run.n, bs):
        e = min(s + bs, run.n)
        accumulate_batch(acc, model, values, run_inputs(run, s, e, cfg), run.speeds[s:e], cfg, start=s)
    return finalize_run_gradient(acc, run.total_mass, run.n, cfg)


# -- optimizers --------------------------------------------------------------

class Optimizer:
    """Plain SGD, SGD with heavy-ball momentum, or Adam."""

    def __init__(self, cfg: TrainingConfig, n_params: int, dtype=np.float64):
        self.kind = cfg.optimizer
        self.lr = cfg.learning_rate
        self.momentum = cfg.momentum
        self.betas = cfg.adam_betas
        self.eps = cfg.adam_eps
        self.t = 0
        self.m = np.zeros(n_params, dtype=np.float64)
        self.v = np.zeros(n_params, dtype=np.float64)

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        grad = np.asarray(grad, dtype=np.float64)
        self.t += 1
        if self.kind == "sgd":
            delta = self.lr * grad
        elif self.kind == "sgd-momentum":
            self.m = self.momentum * self.m + grad
            delta = self.lr * self.m
        else:
            b1, b2 = self.betas
            self.m = b1 * self.m + (1 - b1) * grad
            self.v = b2 * self.v + (1 - b2) * grad * grad
            mhat = self.m / (1 - b1 ** self.t)
            vhat = self.v / (1 - b2 ** self.t)
            delta = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return (values - delta).astype(values.dtype)


def epoch_learning_rate(cfg: TrainingConfig, epoch: int) -> float:
    """Learning rate for ``epoch``; cosine decays to ``lr_final_ratio`` of the
    base rate at the last epoch."""
    if cfg.lr_schedule == "constant" or cfg.epochs <= 1:
        return cfg.learning_rate
    frac = min(epoch, cfg.epochs - 1) / (cfg.epochs - 1)
    floor = cfg.lr_final_ratio
    return cfg.learning_rate * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def apply_update(params, gradient: np.ndarray, state: Optimizer | None, cfg: TrainingConfig):
    """One descent step. Raises ``NonFiniteError`` and leaves state untouched on bad input."""
    values = _values(params)
    gradient = np.asarray(gradient)
    if gradient.shape != values.shape:
        raise ValueError(f"gradient has {gradient.size} entries, parameters {values.size}")
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteError("non-finite gradient")
    if state is None:
        state = Optimizer(cfg, values.size)
    new = state.step(values, gradient)
    if isinstance(params, ParamVector):
        return params.with_values(new)
    return new


# -- epochs ------------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    loss: float
    residual: float
    gradient_norm: float
    updates_applied: int


@dataclass
class EpochReport:
    epoch: int
    rows: list[RunRecord] = field(default_factory=list)

    @property
    def updates(self) -> int:
        return sum(r.updates_applied for r in self.rows)

    @property
    def mean_loss(self) -> float:
        finite = [r.loss for r in self.rows if math.isfinite(r.loss)]
        return float(np.mean(finite)) if finite else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run_id", "loss", "residual", "gradient_norm", "updates_applied"])
            for r in self.rows:
                w.writerow([r.run_id, repr(r.loss), repr(r.residual), repr(r.gradient_norm),
                            r.updates_applied])


def _batch_segments(runs: Sequence[Run], batch_size: int):
    """Cut the concatenated frame stream into fixed-size batches, then split each
    batch at run boundaries. Yields (run index, start, stop, ends_run)."""
    offset = 0
    for i, run in enumerate(runs):
        if run.n < 1:
            raise ValueError(f"run {run.id} has no frames")
        s = 0
        while s < run.n:
            room = batch_size - (offset % batch_size)
            e = min(run.n, s + room)
            yield i, s, e, e == run.n
            offset += e - s
            s = e


def train_epoch(runs: Sequence[Run], model, params, cfg: TrainingConfig,
                optimizer: Optimizer | None = None, epoch: int = 0):
    """One pass over ``runs``; exactly one update per run. Returns (params, report)."""
    if optimizer is None:
        optimizer = Optimizer(cfg, len(params))
    order = list(range(len(runs)))
    if cfg.shuffle_runs:
        order = list(np.random.default_rng([cfg.seed, epoch]).permutation(len(runs)))
    ordered = [runs[i] for i in order]
    values = _values(params)
    acc = GradAccumulator(values.size, np.float64)
    report = EpochReport(epoch)
    for i, s, e, ends in _batch_segments(ordered, cfg.batch_size):
        run = ordered[i]
        accumulate_batch(acc, model, values, run_inputs(run, s, e, cfg), run.speeds[s:e], cfg, start=s)
        if not ends:
            continue
        loss = acc.loss(run.total_mass, run.n, cfg.smoothing)
        residual = run.total_mass - acc.sum_pred
        grad = finalize_run_gradient(acc, run.total_mass, run.n, cfg)
        gnorm = float(np.linalg.norm(grad))
        try:
            values = apply_update(values, grad, optimizer, cfg)
            applied = 1
        except NonFiniteError:
            log.warning("run %s: non-finite gradient, update skipped", run.id)
            applied = 0
        report.rows.append(RunRecord(run.id, float(loss), float(residual), gnorm, applied))
    return _rewrap(params, values), report


def mean_density(runs: Sequence[Run], cfg: TrainingConfig) -> float:
    """Sum of labels over sum of belt displacement: the best constant output."""
    moved = sum(float(np.sum(r.speeds)) * cfg.dt for r in runs)
    return sum(r.total_mass for r in runs) / moved if moved > 0 else 0.0


def init_output_bias(model, params, runs: Sequence[Run], cfg: TrainingConfig, scale_head: bool = True):
    """Match the head to the label scale using labels only.

    The bias becomes :func:`mean_density` and, with ``scale_head``, the head
    weights are multiplied by the same value. Adam moves each parameter by
    about ``learning_rate`` per update and an epoch holds one update per run,
    so a head sized for unit outputs would need tens of thousands of updates
    to reach outputs of several kg/m.
    """
    head = model.layout[-1]
    rho = mean_density(runs, cfg)
    values = np.array(_values(params), copy=True)
    n_weights = head.length - (1 if model.layers[-1].bias else 0)
    if scale_head and rho > 0:
        values[head.offset:head.offset + n_weights] *= rho
    if model.layers[-1].bias:
        values[head.offset + head.length - 1] = rho
    return _rewrap(params, values)


def predict_totals(model, params, runs: Iterable[Run], cfg: TrainingConfig) -> np.ndarray:
    values = _values(params)
    return np.array([float(np.sum(_run_outputs(model, values, r, cfg) * r.speeds * cfg.dt))
                     for r in runs])


def mae_percent(pred: np.ndarray, truth: np.ndarray) -> float:
    mask = truth > 0
    if not np.any(mask):
        return float("nan")
    return float(np.mean(100 * np.abs(truth[mask] - pred[mask]) / truth[mask]))


def train(runs: Sequence[Run], model, params, cfg: TrainingConfig,
          valid: Sequence[Run] | None = None, keep_best: bool = True, on_epoch=None):
    """Run ``cfg.epochs`` epochs. With a validation set and ``keep_best`` the
    parameters with the lowest validation MAE% are returned."""
    optimizer = Optimizer(cfg, len(params))
    best, best_score = params, math.inf
    history = []
    for epoch in range(cfg.epochs):
        optimizer.lr = epoch_learning_rate(cfg, epoch)
        params, report = train_epoch(runs, model, params, cfg, optimizer, epoch)
        entry = {"epoch": epoch, "train_loss": report.mean_loss, "updates": report.updates}
        if valid:
            truth = np.array([r.total_mass for r in valid])
            score = mae_percent(predict_totals(model, params, valid, cfg), truth)
            entry["valid_mae_percent"] = score
            if keep_best and score < best_score:
                best, best_score = params.copy(), score
        history.append(entry)
        log.info("epoch %d: %s", epoch, entry)
        if on_epoch is not None:
            on_epoch(entry, report)
    if valid and keep_best and best_score < math.inf:
        return best, history
    return params, history


# -- verification harness ----------------------------------------------------

def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference, max|a-b| / max|b|."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b)) if b.size else 0.0, np.finfo(float).tiny)
    return float(np.max(np.abs(a - b)) / scale) if a.size else 0.0


def coordinate_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max per-coordinate relative error; denominators never drop below
    ``floor`` times the largest reference magnitude."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor * max(np.max(np.abs(b)), 1e-300))
    return float(np.max(np.abs(a - b) / denom))


def finite_difference_gradient(model, params, run: Run, cfg: TrainingConfig,
                               rel_step: float = 1e-6) -> np.ndarray:
    values = np.array(_values(params), dtype=np.float64)
    fd = np.zeros_like(values)
    for k in range(values.size):
        h = rel_step * (1 + abs(values[k]))
        orig = values[k]
        values[k] = orig + h
        up = run_loss(model, values, run, cfg)
        values[k] = orig - h
        down = run_loss(model, values, run, cfg)
        values[k] = orig
        fd[k] = (up - down) / (2 * h)
    return fd


@dataclass
class GradCheckReport:
    n_params: int
    n_frames: int
    fd_max_rel_error: float
    stream_max_rel_error: float
    fd_tolerance: float = 1e-4
    stream_tolerance: float = 1e-9
    batch_sizes: tuple = ()

    @property
    def passed(self) -> bool:
        return (self.fd_max_rel_error < self.fd_tolerance
                and self.stream_max_rel_error < self.stream_tolerance)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} params={self.n_params} frames={self.n_frames} "
                f"fd_rel={self.fd_max_rel_error:.3e} (<{self.fd_tolerance:g}) "
                f"stream_rel={self.stream_max_rel_error:.3e} (<{self.stream_tolerance:g})")


def grad_check(model, params, run: Run, cfg: TrainingConfig, batch_sizes=None) -> GradCheckReport:
    """Check the streaming gradient against finite differences and the direct gradient."""
    if run.n > 64:
        raise ValueError("grad_check takes runs of at most 64 frames")
    if model.n_params > 5000:
        raise ValueError("grad_check takes models of at most 5,000 parameters")
    cfg64 = TrainingConfig(**{**cfg.to_dict(), "dtype": "float64"})
    values = np.array(_values(params), dtype=np.float64)
    sizes = tuple(batch_sizes or sorted({1, 3, 8, run.n}))
    direct = direct_run_gradient(model, values, run, cfg64)
    stream_err = 0.0
    streamed = None
    for bs in sizes:
        streamed = streaming_run_gradient(model, values, run, cfg64, bs)
        stream_err = max(stream_err, rel_error(streamed, direct))
    fd = finite_difference_gradient(model, values, run, cfg64)
    fd_err = coordinate_rel_error(streamed, fd)
    return GradCheckReport(model.n_params, run.n, fd_err, stream_err, batch_sizes=sizes)


# -- splits ------------------------------------------------------------------

SPLIT_NAMES = ("train", "validation", "test")


def split_indices(n: int, empty: Sequence[bool], ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Seeded split with floor-sized validation/test sets and empty runs spread
    proportionally. Returns three sorted index lists."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    if n < sum(1 for r in ratios if r > 0):
        raise ValueError(f"{n} runs cannot fill {sum(1 for r in ratios if r > 0)} splits")
    empty = np.asarray(empty, dtype=bool)
    sizes = [0, math.floor(n * ratios[1] + 1e-9), math.floor(n * ratios[2] + 1e-9)]
    sizes[0] = n - sizes[1] - sizes[2]
    rng = np.random.default_rng(seed)
    empties = list(rng.permutation(np.flatnonzero(empty)))
    others = list(rng.permutation(np.flatnonzero(~empty)))
    n_empty = len(empties)
    quota = [0, min(sizes[1], math.floor(n_empty * ratios[1] + 1e-9)),
             min(sizes[2], math.floor(n_empty * ratios[2] + 1e-9))]
    quota[0] = min(sizes[0], n_empty - quota[1] - quota[2])
    out = []
    for k in range(3):
        take = empties[:quota[k]]
        empties = empties[quota[k]:]
        need = sizes[k] - len(take)
        pool_take, others = others[:need], others[need:]
        if len(pool_take) < need:  # not enough nonempty runs left
            extra, empties = empties[:need - len(pool_take)], empties[need - len(pool_take):]
            pool_take += extra
        out.append(sorted(int(i) for i in take + pool_take))
    return out


def split_dataset(runs: Sequence, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> dict[str, list]:
    parts = split_indices(len(runs), [bool(getattr(r, "empty", False)) for r in runs], ratios, seed)
    return {name: [runs[i] for i in idx] for name, idx in zip(SPLIT_NAMES, parts)}
