"""Figures written next to the text reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def plot_flops_psnr(report: dict, path) -> Path:
    """Static routing-space curve with the dynamic operating point on top."""
    static = [r for r in report["rows"] if r["type"] == "static"]
    dyn = report["dynamic"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.plot([r["flops_per_pixel"] / 1e3 for r in static], [r["psnr"] for r in static],
                "o-", ms=3, lw=1, color="0.35", label="static (greedy path)")
        ax.plot(dyn["flops_per_pixel"] / 1e3, dyn["psnr"], "*", ms=11, color="tab:red", label="dynamic")
        ax.set_xlabel("FLOPs / pixel (K MACs)")
        ax.set_ylabel("PSNR (dB)")
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_bench(bench: dict, path) -> Path:
    rows = sorted(bench["rows"], key=lambda r: r["flops_ratio"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        x = [r["flops_ratio"] for r in rows]
        ax.plot(x, [r["speedup"] for r in rows], "o-", ms=3, label="measured")
        ax.plot(x, [1 / r for r in x], "--", lw=1, color="0.5", label="ideal (1 / FLOPs ratio)")
        ax.set_xlabel("FLOPs relative to full width")
        ax.set_ylabel("speedup")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path
