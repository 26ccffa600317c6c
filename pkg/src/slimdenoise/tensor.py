"""Dense NCHW numerics with hand-derived backward passes.

Tensors are plain float32 numpy arrays laid out as (batch, channels, height,
width), C-contiguous, so the first ``k`` channels of one batch item occupy a
single contiguous memory range. Every slimmable op reads only prefixes of the
full-width parameter storage.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class NumericError(FloatingPointError):
    """Raised when a loss or gradient goes non-finite."""


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# multiply-add instrumentation

_mac_counters: list[dict] = []


@contextlib.contextmanager
def count_macs():
    """Count multiply-adds performed by conv/linear forwards inside the block.

    Yields a dict with keys ``total`` and ``layers`` (list of (tag, macs)).
    """
    counter = {"total": 0, "layers": []}
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _record_macs(tag: str, macs: int) -> None:
    for counter in _mac_counters:
        counter["total"] += int(macs)
        counter["layers"].append((tag, int(macs)))


# ---------------------------------------------------------------------------
# parameters and gradients


@dataclass
class ConvLayer:
    """Full-width convolution storage; narrower executions use prefixes."""

    weight: np.ndarray  # (out_max, in_max, k, k)
    bias: np.ndarray  # (out_max,)
    stride: int = 1
    padding: int = 1
    name: str = "conv"

    @classmethod
    def init(cls, rng: np.random.Generator, in_max: int, out_max: int, k: int = 3,
             name: str = "conv", scale: float | None = None) -> "ConvLayer":
        fan_in = in_max * k * k
        std = np.sqrt(2.0 / fan_in) if scale is None else scale
        weight = (rng.standard_normal((out_max, in_max, k, k)) * std).astype(DTYPE)
        return cls(weight, np.zeros(out_max, DTYPE), 1, k // 2, name)

    @property
    def out_max(self) -> int:
        return self.weight.shape[0]

    @property
    def in_max(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


@dataclass
class GradTape:
    """Gradient buffers keyed by parameter name, created lazily at full shape."""

    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def buffer(self, name: str, like: np.ndarray) -> np.ndarray:
        buf = self.grads.get(name)
        if buf is None:
            buf = np.zeros_like(like, dtype=DTYPE)
            self.grads[name] = buf
        elif buf.shape != like.shape:
            raise ShapeError(f"gradient buffer {name} has shape {buf.shape}, parameter {like.shape}")
        return buf

    def zero(self) -> None:
        for buf in self.grads.values():
            buf[...] = 0.0


def stop_gradient(x: np.ndarray) -> np.ndarray:
    """Detached read-only copy; losses treat it as a constant target."""
    out = np.array(x, dtype=DTYPE, copy=True)
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# slimmable convolution


def _check_active(layer: ConvLayer, in_active: int, out_active: int) -> None:
    if not 1 <= in_active <= layer.in_max:
        raise ShapeError(f"{layer.name}: in_active={in_active} outside [1, {layer.in_max}]")
    if not 1 <= out_active <= layer.out_max:
        raise ShapeError(f"{layer.name}: out_active={out_active} outside [1, {layer.out_max}]")


def _im2col(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, int, int]:
    b, c, h, w = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    oh, ow = layer.output_hw(h, w)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
    # rows ordered (c, ky, kx), matching weight.reshape(out, -1)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, b * oh * ow)
    return cols, oh, ow


def _rows_matmul(w: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # BLAS takes a gemv path for a single row whose rounding differs from gemm;
    # padding to two rows keeps channel prefixes bitwise consistent.
    if w.shape[0] == 1:
        return (np.vstack([w, w]) @ cols)[:1]
    return w @ cols


def conv2d_slim_forward(x: np.ndarray, layer: ConvLayer, in_active: int, out_active: int) -> np.ndarray:
    _check_active(layer, in_active, out_active)
    if x.ndim != 4 or x.shape[1] != in_active:
        raise ShapeError(f"{layer.name}: expected (B, {in_active}, H, W) input, got {x.shape}")
    b = x.shape[0]
    cols, oh, ow = _im2col(x, layer)
    w = layer.weight[:out_active, :in_active].reshape(out_active, -1)
    y = _rows_matmul(w, cols)
    y += layer.bias[:out_active, None]
    _record_macs(layer.name, w.size * b * oh * ow)
    return np.ascontiguousarray(y.reshape(out_active, b, oh, ow).transpose(1, 0, 2, 3))


def conv2d_slim_backward(grad_out: np.ndarray, saved_input: np.ndarray, layer: ConvLayer,
                         in_active: int, out_active: int, tape: GradTape) -> np.ndarray:
    """Accumulate weight/bias gradients inside the active prefix; return dL/dx."""
    _check_active(layer, in_active, out_active)
    b, _, h, w_in = saved_input.shape
    oh, ow = layer.output_hw(h, w_in)
    if grad_out.shape != (b, out_active, oh, ow):
        raise ShapeError(f"{layer.name}: grad_out {grad_out.shape} != {(b, out_active, oh, ow)}")
    k, s, p = layer.kernel, layer.stride, layer.padding
    cols, _, _ = _im2col(saved_input, layer)
    g = grad_out.transpose(1, 0, 2, 3).reshape(out_active, -1)

    gw = tape.buffer(f"{layer.name}.weight", layer.weight)
    gb = tape.buffer(f"{layer.name}.bias", layer.bias)
    gw[:out_active, :in_active] += (g @ cols.T).reshape(out_active, in_active, k, k)
    gb[:out_active] += g.sum(axis=1, dtype=np.float64).astype(DTYPE)

    w = layer.weight[:out_active, :in_active].reshape(out_active, -1)
    dcols = (w.T @ g).reshape(in_active, k, k, b, oh, ow)
    dxp = np.zeros((in_active, b, h + 2 * p, w_in + 2 * p), DTYPE)
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + s * oh:s, kx:kx + s * ow:s] += dcols[:, ky, kx]
    dx = dxp[:, :, p:p + h, p:p + w_in] if p else dxp
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3))


# ---------------------------------------------------------------------------
# elementwise / pooling / normalization


def relu_forward(x):
    return np.maximum(x, 0, dtype=x.dtype)


def relu_backward(grad, x):
    return grad * (x > 0)


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(grad, y):
    """``y`` is the saved forward output."""
    return grad * (1.0 - y * y)


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"expected 4-D input, got {x.shape}")
    if x.shape[2] * x.shape[3] == 0:
        raise ShapeError("global average pool over an empty spatial extent")
    return x.mean(axis=(2, 3), dtype=np.float64).astype(np.result_type(x.dtype, DTYPE))


def global_avg_pool_backward(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    b, c, h, w = shape
    return np.broadcast_to((grad / (h * w))[:, :, None, None], shape).astype(np.result_type(grad.dtype, DTYPE))


def softmax_forward(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (grad - (grad * probs).sum(axis=-1, keepdims=True))


def linear_forward(x: np.ndarray, weight: np.ndarray, tag: str = "linear") -> np.ndarray:
    """``x`` (B, in) times ``weight.T`` with weight (out, in); a 1x1 conv on a pooled map."""
    _record_macs(tag, weight.size * x.shape[0])
    return x @ weight.T


def linear_backward(grad: np.ndarray, x: np.ndarray, weight: np.ndarray, name: str,
                    tape: GradTape) -> np.ndarray:
    tape.buffer(name, weight)[...] += grad.T @ x
    return grad @ weight


@dataclass
class BatchNorm1d:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    name: str = "bn"

    @classmethod
    def init(cls, features: int, name: str = "bn") -> "BatchNorm1d":
        return cls(np.ones(features, DTYPE), np.zeros(features, DTYPE),
                   np.zeros(features, DTYPE), np.ones(features, DTYPE), name=name)

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


def batchnorm1d_forward(x: np.ndarray, bn: BatchNorm1d, training: bool):
    """Returns (y, cache). Training mode uses batch statistics and updates running ones."""
    if training:
        mean = x.mean(axis=0, dtype=np.float64)
        var = x.var(axis=0, dtype=np.float64)
        n = x.shape[0]
        unbiased = var * n / max(n - 1, 1)
        bn.running_mean[...] = (1 - bn.momentum) * bn.running_mean + bn.momentum * mean
        bn.running_var[...] = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased
    else:
        mean = bn.running_mean.astype(np.float64)
        var = bn.running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    dtype = np.result_type(x.dtype, DTYPE)
    xhat = ((x - mean) * inv_std).astype(dtype)
    y = xhat * bn.gamma + bn.beta
    return y, (xhat, inv_std.astype(dtype), training)


def batchnorm1d_backward(grad: np.ndarray, cache, bn: BatchNorm1d, tape: GradTape) -> np.ndarray:
    xhat, inv_std, training = cache
    tape.buffer(f"{bn.name}.gamma", bn.gamma)[...] += (grad * xhat).sum(axis=0)
    tape.buffer(f"{bn.name}.beta", bn.beta)[...] += grad.sum(axis=0)
    gxhat = grad * bn.gamma
    if not training:
        return gxhat * inv_std
    n = grad.shape[0]
    return (inv_std / n) * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))


# ---------------------------------------------------------------------------
# losses


def divergence_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``pred``; ``target`` is constant."""
    if pred.shape != target.shape:
        raise ShapeError(f"divergence between {pred.shape} and {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size * diff).astype(DTYPE)
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def decay(self, factor: float) -> None:
        self.lr *= factor


def adam_step(params: dict[str, np.ndarray], tape: GradTape, state: AdamState) -> None:
    """In-place Adam update of every parameter with a populated gradient buffer."""
    for name, g in tape.grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient in {name} ({bad} entries) at Adam step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr_t = state.lr * np.sqrt(1 - b2 ** t) / (1 - b1 ** t)
    for name, g in tape.grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr_t * m / (np.sqrt(v) + state.eps)).astype(p.dtype)
