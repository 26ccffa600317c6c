"""PSNR / SSIM and multiply-add accounting.

MAC counts cover convolution and gate matrix products only; biases,
activations, pooling and the residual add are excluded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check_pair(pred, ref):
    if np.shape(pred) != np.shape(ref):
        raise ValueError(f"shape mismatch: {np.shape(pred)} vs {np.shape(ref)}")


def _psnr_from_mse(mse, peak):
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(peak * peak / mse)
    return np.where(mse > 0, np.minimum(out, PSNR_CAP), PSNR_CAP)


def psnr(pred: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB over the whole array; zero error is capped at 100 dB."""
    _check_pair(pred, ref)
    diff = np.asarray(pred, np.float64) - np.asarray(ref, np.float64)
    return float(_psnr_from_mse(np.mean(diff * diff), peak))


def psnr_per_image(pred: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> np.ndarray:
    _check_pair(pred, ref)
    diff = np.asarray(pred, np.float64) - np.asarray(ref, np.float64)
    mse = np.mean(diff.reshape(diff.shape[0], -1) ** 2, axis=1)
    return _psnr_from_mse(mse, peak)


def _box(x: np.ndarray, k: int) -> np.ndarray:
    s = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    s[1:, 1:] = x.cumsum(0).cumsum(1)
    return s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]


def ssim_map(pred: np.ndarray, ref: np.ndarray, peak: float = 1.0, window: int = SSIM_WINDOW) -> np.ndarray:
    """Local SSIM of two 2-D images over every ``window`` x ``window`` patch (stride 1)."""
    x = np.asarray(pred, np.float64)
    y = np.asarray(ref, np.float64)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} SSIM window")
    n = window * window
    mx, my = _box(x, window) / n, _box(y, window) / n
    vx = _box(x * x, window) / n - mx * mx
    vy = _box(y * y, window) / n - my * my
    cxy = _box(x * y, window) / n - mx * my
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim_per_image(pred: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> np.ndarray:
    _check_pair(pred, ref)
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.ndim == 2:
        pred, ref = pred[None, None], ref[None, None]
    return np.array([np.mean([ssim_map(p, r, peak).mean() for p, r in zip(pi, ri)])
                     for pi, ri in zip(pred, ref)])


def ssim(pred: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM (uniform 8x8 windows) over all images and channels."""
    return float(np.mean(ssim_per_image(pred, ref, peak)))


@dataclass
class FlopsReport:
    layers: list[tuple[str, int]] = field(default_factory=list)
    pixels: int = 1

    @property
    def total(self) -> int:
        return sum(m for _, m in self.layers)

    @property
    def flops_per_pixel(self) -> float:
        return self.total / self.pixels

    def to_dict(self) -> dict:
        return {"layers": [list(x) for x in self.layers], "total_macs": self.total,
                "pixels": self.pixels, "flops_per_pixel": self.flops_per_pixel}


@dataclass(frozen=True)
class GateDims:
    channels: int  # C at the attachment point
    reduced: int  # C / r
    hidden: int  # D
    candidates: int  # E

    def macs(self) -> list[tuple[str, int]]:
        return [("gate.w1", self.reduced * self.channels),
                ("gate.w3", self.hidden * self.reduced),
                ("gate.w4", self.candidates * self.hidden)]


def count_flops(spec, config, image: tuple[int, int], gate: GateDims | None = None,
                first_block_width: int | None = None) -> FlopsReport:
    """Multiply-adds of one forward of an ``image``-sized input at ``config``.

    ``first_block_width`` charges the first conv at that width (the dynamic
    path runs it at full width before the gate decides); the following layer
    still reads only ``config[0]`` channels. Gate MACs are charged once per image.
    """
    config = spec.validate(config)
    h, w = image
    k2 = spec.kernel * spec.kernel
    report = FlopsReport(pixels=h * w)
    for i, (cin, cout) in enumerate(spec.io_widths(config)):
        if i == 0 and first_block_width is not None:
            cout = first_block_width
        # stride-1 same-padding backbone keeps every map at h x w
        report.layers.append((f"conv{i}", cout * cin * k2 * h * w))
        if i == 0 and gate is not None:
            report.layers.extend(gate.macs())
    return report
