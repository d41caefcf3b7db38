"""Small differentiable-model engine.

Supports a fixed layer set (2-D convolution, dense, global average pooling)
with ELU or linear activations and additive residual connections. Every
model maps one input item to a single real output. Gradients are exact
reverse-mode vector-Jacobian products with respect to the flat parameter
vector.

Arrays are batch-first; images are NHWC.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Input or parameter shape does not match the model."""


class LayoutError(ValueError):
    """Parameter layout is incompatible with a model."""


ACTIVATIONS = ("elu", "linear")
LAYER_KINDS = ("conv2d", "dense", "gap")


def elu(z: np.ndarray) -> np.ndarray:
    # alpha = 1. expm1(z) >= z for z <= 0, so the max picks the right branch
    return np.maximum(z, np.expm1(np.minimum(z, 0)))


def elu_grad_from_output(a: np.ndarray) -> np.ndarray:
    """ELU derivative expressed through its output: 1 for a > 0, a + 1 otherwise."""
    return np.minimum(a, 0) + 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple
    out_shape: tuple
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = "linear"
    residual_from: int | None = None
    bias: bool = True

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "conv2d":
            return (self.in_shape[-1] * self.kernel * self.kernel, self.out_shape[-1])
        if self.kind == "dense":
            return (int(np.prod(self.in_shape)), int(np.prod(self.out_shape)))
        return (0, 0)

    @property
    def n_params(self) -> int:
        if self.kind == "gap":
            return 0
        fan_in, fan_out = self.weight_shape
        return fan_in * fan_out + (fan_out if self.bias else 0)


@dataclass(frozen=True)
class LayerSlot:
    """Where one layer's parameters live inside the flat vector."""

    kind: str
    in_dims: tuple
    out_dims: tuple
    offset: int
    length: int


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple[LayerSlot, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        total = sum(s.length for s in self.layout)
        if self.values.ndim != 1 or self.values.size != total:
            raise LayoutError(
                f"parameter vector has {self.values.size} values, layout needs {total}")

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.values.astype(dtype), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass
class Tape:
    """Per-sample forward state needed for a later backward sweep.

    Every cached array has the batch on axis 0, so tapes can be sliced and
    concatenated sample-wise.
    """

    caches: list[dict[str, np.ndarray]]
    output: np.ndarray
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.output.shape[0]

    def select(self, index) -> "Tape":
        if isinstance(index, int):
            index = slice(index, index + 1) if index >= 0 else slice(index, index + 1 or None)
        return Tape(
            [{k: v[index] for k, v in c.items()} for c in self.caches],
            self.output[index],
            {k: v[index] for k, v in self.extras.items()},
        )

    @staticmethod
    def concat(tapes: Sequence["Tape"]) -> "Tape":
        tapes = [t for t in tapes if t is not None]
        if len(tapes) == 1:
            return tapes[0]
        caches = [
            {k: np.concatenate([t.caches[i][k] for t in tapes]) for k in tapes[0].caches[i]}
            for i in range(len(tapes[0].caches))
        ]
        extras = {k: np.concatenate([t.extras[k] for t in tapes]) for k in tapes[0].extras}
        return Tape(caches, np.concatenate([t.output for t in tapes]), extras)


@dataclass(frozen=True)
class ModelSpec:
    """A feed-forward stack with optional additive skips and a scalar head."""

    input_shape: tuple
    layers: tuple[LayerSpec, ...]
    name: str = "model"

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if tuple(layer.in_shape) != shape:
                raise ShapeError(f"layer {i}: expects input {layer.in_shape}, got {shape}")
            r = layer.residual_from
            if r is not None:
                if not 0 <= r < i:
                    raise ValueError(f"layer {i}: residual source {r} is not an earlier layer")
                if tuple(self.layers[r].out_shape) != tuple(layer.out_shape):
                    raise ShapeError(f"layer {i}: residual source {r} shape mismatch")
            shape = tuple(layer.out_shape)
        if self.layers and int(np.prod(shape)) != 1:
            raise ShapeError(f"model must end in one output unit, ends in {shape}")

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def layout(self) -> tuple[LayerSlot, ...]:
        slots, offset = [], 0
        for layer in self.layers:
            n = layer.n_params
            slots.append(LayerSlot(layer.kind, tuple(layer.in_shape), tuple(layer.out_shape), offset, n))
            offset += n
        return tuple(slots)

    def check_params(self, params: ParamVector) -> None:
        if tuple(params.layout) != self.layout:
            raise LayoutError(f"parameter layout does not match model {self.name!r}")

    def init_params(self, seed: int = 0, dtype=np.float32) -> ParamVector:
        """Fan-in scaled uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        values = np.zeros(self.n_params, dtype=np.float64)
        for layer, slot in zip(self.layers, self.layout):
            if not slot.length:
                continue
            fan_in, fan_out = layer.weight_shape
            limit = np.sqrt(3.0 / fan_in)
            values[slot.offset:slot.offset + fan_in * fan_out] = rng.uniform(
                -limit, limit, fan_in * fan_out)
        return ParamVector(values.astype(dtype), self.layout)

    def zero_params(self, dtype=np.float64) -> ParamVector:
        return ParamVector(np.zeros(self.n_params, dtype=dtype), self.layout)

    # -- forward / backward -------------------------------------------------

    def _weights(self, values: np.ndarray):
        out, offset = [], 0
        for layer in self.layers:
            n = layer.n_params
            if n:
                fan_in, fan_out = layer.weight_shape
                w = values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
                b = values[offset + fan_in * fan_out:offset + n] if layer.bias else 0
                out.append((w, b))
            else:
                out.append((None, None))
            offset += n
        return out

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        expected = tuple(self.input_shape)
        if x.shape[1:] != expected:
            if expected == (1,) and x.ndim == 1:
                x = x[:, None]
            else:
                raise ShapeError(f"batch items have shape {x.shape[1:]}, model expects {expected}")
        if x.shape[0] < 1:
            raise ShapeError("empty batch")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input")
        return x

    def forward(self, values: np.ndarray, x: np.ndarray, keep_tape: bool = True):
        """Evaluate the model on a batch. Returns (outputs, tape or None)."""
        outputs, caches = self._run(values, x)
        out = outputs[-1].reshape(-1) if outputs else self._check_input(x).reshape(-1)
        tape = Tape(caches, out) if keep_tape else None
        return out, tape

    def layer_outputs(self, values: np.ndarray, x: np.ndarray) -> list[np.ndarray]:
        """Post-activation (and post-residual) output of every layer."""
        return self._run(values, x)[0]

    def _run(self, values: np.ndarray, x: np.ndarray):
        values = np.asarray(values)
        x = self._check_input(x).astype(values.dtype, copy=False)
        n = x.shape[0]
        weights = self._weights(values)
        outputs: list[np.ndarray] = []
        caches: list[dict[str, np.ndarray]] = []
        h = x
        for layer, (w, b) in zip(self.layers, weights):
            cache: dict[str, np.ndarray] = {}
            if layer.kind == "conv2d":
                cols, (ho, wo) = _im2col(h, layer.kernel, layer.stride, layer.padding)
                z = (cols.reshape(n * ho * wo, -1) @ w + b).reshape(n, ho, wo, -1)
                cache["cols"] = cols
            elif layer.kind == "dense":
                flat = h.reshape(n, -1)
                z = flat @ w + b
                cache["x"] = flat
            else:
                z = h.mean(axis=(1, 2))
            if layer.activation == "elu":
                a = elu(z)
                cache["a"] = a
            else:
                a = z
            if layer.residual_from is not None:
                a = a + outputs[layer.residual_from]
            outputs.append(a)
            caches.append(cache)
            h = a
        return outputs, caches

    def backward(self, values: np.ndarray, tape: Tape, coefficients: np.ndarray,
                 wrt_input: bool = False):
        """Return sum_j c_j * d out_j / d params (and optionally d/d inputs).

        One reverse sweep over the cached forward state.
        """
        values = np.asarray(values)
        c = np.asarray(coefficients, dtype=values.dtype)
        n = tape.batch_size
        if c.shape != (n,):
            raise ShapeError(f"{c.size} coefficients for a batch of {n}")
        weights = self._weights(values)
        grad = np.zeros_like(values)
        slots = self.layout
        upstream: list[np.ndarray | None] = [None] * len(self.layers)
        g = c.reshape((n,) + tuple(self.layers[-1].out_shape))
        input_grad = None
        for i in range(len(self.layers) - 1, -1, -1):
            layer, (w, b), cache, slot = self.layers[i], weights[i], tape.caches[i], slots[i]
            if upstream[i] is not None:
                g = g + upstream[i]
            if layer.residual_from is not None:
                r = layer.residual_from
                upstream[r] = g if upstream[r] is None else upstream[r] + g
            if layer.activation == "elu":
                g = g * elu_grad_from_output(cache["a"])
            need_input = i > 0 or wrt_input
            if layer.kind == "conv2d":
                cols = cache["cols"]
                _, ho, wo, cout = g.shape
                g2 = g.reshape(-1, cout)
                fan_in = w.shape[0]
                grad[slot.offset:slot.offset + fan_in * cout] = (
                    cols.reshape(-1, fan_in).T @ g2).ravel()
                if layer.bias:
                    grad[slot.offset + fan_in * cout:slot.offset + slot.length] = g2.sum(axis=0)
                if need_input:
                    k, pad = layer.kernel, layer.padding
                    if layer.stride == 1 and 2 * pad < k:
                        # transposed stride-1 conv: correlate with the flipped kernel
                        cin = layer.in_shape[-1]
                        wf = w.reshape(k, k, cin, cout)[::-1, ::-1].transpose(0, 1, 3, 2)
                        gcols, _ = _im2col(g, k, 1, k - 1 - pad)
                        g = (gcols.reshape(-1, k * k * cout) @ wf.reshape(-1, cin)).reshape(
                            (n,) + tuple(layer.in_shape))
                    else:
                        dcols = (g2 @ w.T).reshape(n, ho, wo, fan_in)
                        g = _col2im(dcols, layer.in_shape, k, layer.stride, pad)
            elif layer.kind == "dense":
                flat = cache["x"]
                g2 = g.reshape(n, -1)
                fan_in, fan_out = w.shape
                grad[slot.offset:slot.offset + fan_in * fan_out] = (flat.T @ g2).ravel()
                if layer.bias:
                    grad[slot.offset + fan_in * fan_out:slot.offset + slot.length] = g2.sum(axis=0)
                if need_input:
                    g = (g2 @ w.T).reshape((n,) + tuple(layer.in_shape))
            else:
                hh, ww = layer.in_shape[0], layer.in_shape[1]
                g = np.broadcast_to((g / (hh * ww))[:, None, None, :],
                                    (n,) + tuple(layer.in_shape)).copy()
            if i == 0 and wrt_input:
                input_grad = g
        if wrt_input:
            return grad, input_grad
        return grad


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, h, w, c = x.shape
    ho, wo = conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # columns ordered (ky, kx, channel) to match the stored weight layout
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n, ho * wo, k * k * c), (ho, wo)


def _col2im(dcols: np.ndarray, in_shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    n, ho, wo, _ = dcols.shape
    h, w, c = in_shape
    d = dcols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:pad + h, pad:pad + w, :]
    return out


# -- layer constructors ------------------------------------------------------

def conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(in_shape, filters, kernel, stride=1, padding=0, activation="elu",
           residual_from=None) -> LayerSpec:
    h, w, _ = in_shape
    out = (conv_out(h, kernel, stride, padding), conv_out(w, kernel, stride, padding), filters)
    return LayerSpec("conv2d", tuple(in_shape), out, kernel, stride, padding, activation,
                     residual_from)


def dense(in_shape, units, activation="elu", residual_from=None, bias=True) -> LayerSpec:
    return LayerSpec("dense", tuple(in_shape), (units,), activation=activation,
                     residual_from=residual_from, bias=bias)


def linear_model(input_dim: int = 1, bias: bool = False) -> ModelSpec:
    """f(x; w) = w . x (+ b): the smallest model, handy for checks."""
    return ModelSpec((input_dim,), (dense((input_dim,), 1, "linear", bias=bias),), name="linear")


def gap(in_shape) -> LayerSpec:
    return LayerSpec("gap", tuple(in_shape), (in_shape[-1],))


def mlp(input_dim: int, hidden: Sequence[int], activation="elu", name="mlp") -> ModelSpec:
    layers, shape = [], (input_dim,)
    for units in hidden:
        layers.append(dense(shape, units, activation))
        shape = (units,)
    layers.append(dense(shape, 1, "linear"))
    return ModelSpec((input_dim,), tuple(layers), name)


DENSITY_HIDDEN = (32, 64, 128, 32)


def build_density_mlp() -> ModelSpec:
    """Scalar-in, scalar-out density network with 32-64-128-32 ELU hidden units."""
    return mlp(1, DENSITY_HIDDEN, "elu", name="density-mlp")


# Frozen compact regressor layout (input 64x64x3 -> 45,921 parameters):
#
#   idx  layer                         output      params
#   0    conv 4x4 /4, C->24, ELU       16x16x24    48*24+24  = 1,176
#   1    conv 3x3 /1 p1, 24->24, ELU   16x16x24    216*24+24 = 5,208
#   2    conv 3x3 /1 p1, 24->24, ELU   16x16x24    5,208     (+ out[0])
#   3    conv 3x3 /2 p1, 24->30, ELU   8x8x30      216*30+30 = 6,510
#   4    conv 3x3 /1 p1, 30->30, ELU   8x8x30      270*30+30 = 8,130  (+ out[3])
#   5    conv 3x3 /2 p1, 30->32, ELU   4x4x32      270*32+32 = 8,672
#   6    conv 3x3 /1 p1, 32->32, ELU   4x4x32      288*32+32 = 9,248  (+ out[5])
#   7    global average pool           32          0
#   8    dense 32->52, ELU             52          32*52+52  = 1,716
#   9    dense 52->1, linear           1           53
#
# Grayscale input shrinks layer 0 to 16*24+24 = 408 (total 45,153).
COMPACT_CHANNELS = (24, 30, 32)
COMPACT_HIDDEN = 52
COMPACT_STEM = 4


def build_compact_regressor(input_shape=(64, 64, 3)) -> ModelSpec:
    h, w, c = input_shape
    if c not in (1, 3):
        raise ShapeError(f"compact regressor takes 1 or 3 channels, got {c}")
    if h < 16 or w < 16:
        raise ShapeError(f"input {h}x{w} is too small for the downsampling chain (min 16x16)")
    c1, c2, c3 = COMPACT_CHANNELS
    layers = []
    layers.append(conv2d((h, w, c), c1, COMPACT_STEM, stride=COMPACT_STEM))
    s = layers[-1].out_shape
    layers.append(conv2d(s, c1, 3, 1, 1))
    layers.append(conv2d(s, c1, 3, 1, 1, residual_from=0))
    layers.append(conv2d(s, c2, 3, 2, 1))
    s = layers[-1].out_shape
    layers.append(conv2d(s, c2, 3, 1, 1, residual_from=3))
    layers.append(conv2d(s, c3, 3, 2, 1))
    s = layers[-1].out_shape
    layers.append(conv2d(s, c3, 3, 1, 1, residual_from=5))
    layers.append(gap(s))
    layers.append(dense((c3,), COMPACT_HIDDEN))
    layers.append(dense((COMPACT_HIDDEN,), 1, "linear"))
    return ModelSpec((h, w, c), tuple(layers), name="compact")


def build_tiny_regressor(input_shape=(8, 8, 1), filters: int = 4, hidden: int = 6) -> ModelSpec:
    """Small conv net with one residual block, sized for finite-difference checks."""
    layers = [conv2d(input_shape, filters, 3, 1, 1)]
    s = layers[-1].out_shape
    layers.append(conv2d(s, filters, 3, 2, 1))
    s = layers[-1].out_shape
    layers.append(conv2d(s, filters, 3, 1, 1, residual_from=1))
    layers.append(gap(s))
    layers.append(dense((filters,), hidden))
    layers.append(dense((hidden,), 1, "linear"))
    return ModelSpec(tuple(input_shape), tuple(layers), name="tiny")


def count_params(model: ModelSpec) -> int:
    return model.n_params


def forward_batch(model, params: ParamVector, batch: np.ndarray) -> np.ndarray:
    """Raw network outputs f(x_j; w) for every item of the batch."""
    model.check_params(params)
    out, _ = model.forward(params.values, batch, keep_tape=False)
    return out


def vjp_batch(model, params: ParamVector, batch: np.ndarray,
              coefficients: np.ndarray) -> np.ndarray:
    """Sum over the batch of c_j * grad_w f(x_j; w), as a flat array."""
    model.check_params(params)
    coefficients = np.asarray(coefficients)
    n = np.asarray(batch).shape[0]
    if coefficients.shape != (n,):
        raise ShapeError(f"{coefficients.size} coefficients for a batch of {n}")
    _, tape = model.forward(params.values, batch)
    return model.backward(params.values, tape, coefficients)
