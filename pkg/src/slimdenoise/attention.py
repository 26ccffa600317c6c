"""Squeeze-and-excitation attention head attached after the first conv block.

The head is slimmable like the convolutions: with ``a`` active channels it uses
columns ``[:a]`` of ``w1`` and rows ``[:a]`` of ``w2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (DTYPE, GradTape, ShapeError, global_avg_pool_backward, global_avg_pool_forward,
                     linear_forward, relu_backward, relu_forward, tanh_backward,
                     tanh_forward)


@dataclass
class GateAttention:
    w1: np.ndarray  # (C/r, C) dimensionality reduction
    w2: np.ndarray  # (C, C/r) dimensionality increase
    name: str = "att"

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, reduction: int = 4) -> "GateAttention":
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        w1 = (rng.standard_normal((hidden, channels)) * np.sqrt(2.0 / channels)).astype(DTYPE)
        # zero excitation weights start every multiplier at exactly 1
        w2 = np.zeros((channels, hidden), DTYPE)
        return cls(w1, w2)

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def reduction(self) -> int:
        return self.w1.shape[1] // self.w1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.w1": self.w1, f"{self.name}.w2": self.w2}


def squeeze(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean, shape (B, C)."""
    return global_avg_pool_forward(x)


def reduced_features(u: np.ndarray, w1: np.ndarray):
    """R = relu(W1 U) on the active prefix of ``w1``; returns (R, pre-activation)."""
    z1 = linear_forward(u, w1[:, :u.shape[1]], "att.w1")
    return relu_forward(z1), z1


def attention_forward(x: np.ndarray, att: GateAttention):
    """Channel recalibration ``x * (1 + tanh(W2 relu(W1 U)))``; returns (out, cache)."""
    a = x.shape[1]
    if a > att.channels:
        raise ShapeError(f"attention built for {att.channels} channels, got {a}")
    u = squeeze(x)
    r, z1 = reduced_features(u, att.w1)
    t = tanh_forward(linear_forward(r, att.w2[:a], "att.w2"))
    m = 1.0 + t
    return x * m[:, :, None, None], (x, u, z1, r, t, m)


def attention_apply(x: np.ndarray, att: GateAttention) -> np.ndarray:
    return attention_forward(x, att)[0]


def attention_backward(grad: np.ndarray, cache, att: GateAttention, tape: GradTape) -> np.ndarray:
    x, u, z1, r, t, m = cache
    a = x.shape[1]
    dx = grad * m[:, :, None, None]
    dm = (grad * x).sum(axis=(2, 3), dtype=np.float64).astype(DTYPE)
    dz2 = tanh_backward(dm, t)
    gw2 = tape.buffer(f"{att.name}.w2", att.w2)
    gw1 = tape.buffer(f"{att.name}.w1", att.w1)
    dr = dz2 @ att.w2[:a]
    gw2[:a] += dz2.T @ r
    dz1 = relu_backward(dr, z1)
    gw1[:, :a] += dz1.T @ u
    du = dz1 @ att.w1[:, :a]
    return dx + global_avg_pool_backward(du, x.shape)
