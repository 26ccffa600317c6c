"""Greedy progressive slimming of a trained super-network into a routing space."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

from .metrics import count_flops
from .slimnet import SuperNet, WidthConfig, evaluate_psnr

log = logging.getLogger(__name__)


@dataclass
class RouteEntry:
    config: WidthConfig
    flops_per_pixel: float
    psnr: float

    def to_dict(self):
        return {"config": list(self.config), "flops_per_pixel": self.flops_per_pixel, "psnr": self.psnr}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["config"]), float(d["flops_per_pixel"]), float(d["psnr"]))


@dataclass
class RoutingSpace:
    """Configs ordered from largest to smallest, plus the greedy evaluation log."""

    entries: list[RouteEntry] = field(default_factory=list)
    group: int = 16
    log: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> RouteEntry:
        return self.entries[i]

    @property
    def flops(self) -> list[float]:
        return [e.flops_per_pixel for e in self.entries]

    def to_dict(self):
        return {"group": self.group, "entries": [e.to_dict() for e in self.entries], "log": self.log}

    @classmethod
    def from_dict(cls, d):
        return cls([RouteEntry.from_dict(e) for e in d["entries"]], int(d["group"]), list(d.get("log", [])))

    def to_text(self) -> str:
        lines = ["# routing-space v1", f"# group {self.group}", "# index\twidths\tflops_per_pixel\tpsnr"]
        for i, e in enumerate(self.entries):
            lines.append(f"{i}\t{','.join(map(str, e.config))}\t{e.flops_per_pixel!r}\t{e.psnr!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RoutingSpace":
        lines = text.splitlines()
        if not lines or lines[0].strip() != "# routing-space v1":
            raise ValueError("not a routing-space v1 file")
        space = cls()
        for line in lines[1:]:
            if line.startswith("# group"):
                space.group = int(line.split()[-1])
            elif line and not line.startswith("#"):
                _, widths, flops, score = line.split("\t")
                space.entries.append(RouteEntry(tuple(int(w) for w in widths.split(",")),
                                                float(flops), float(score)))
        return space


def slim_candidates(spec, config: WidthConfig, group: int) -> list[tuple[int, WidthConfig]]:
    """(layer, config) for every layer that can still lose ``group`` channels (clamped at its minimum)."""
    config = spec.validate(config)
    out = []
    for layer, (width, lo) in enumerate(zip(config, spec.min_channels)):
        if width > lo:
            cand = list(config)
            cand[layer] = max(lo, width - group)
            out.append((layer, tuple(cand)))
    return out


def evaluate_config(net: SuperNet, config: WidthConfig, valset) -> float:
    """Mean validation PSNR of ``config`` with the shared weights (attention off)."""
    if len(valset) == 0:
        raise ValueError("empty validation set")
    return evaluate_psnr(net, config, valset.noisy, valset.clean)


def config_flops(spec, config, image=(1, 1)) -> float:
    return count_flops(spec, config, image).flops_per_pixel


def progressive_slim(net: SuperNet, valset, group: int, evaluate=None) -> RoutingSpace:
    """Walk from the largest to the smallest config, each step removing the
    channel group whose removal keeps validation PSNR highest.

    Ties go to the lowest layer index. Every candidate score is kept in
    ``space.log`` so the walk can be replayed.
    """
    if group < 1:
        raise ValueError("group must be >= 1")
    evaluate = evaluate or (lambda cfg: evaluate_config(net, cfg, valset))
    spec = net.spec
    config = spec.largest()
    space = RoutingSpace(group=group)
    space.entries.append(RouteEntry(config, config_flops(spec, config), evaluate(config)))
    while config != spec.smallest():
        scored = []
        best = None
        for layer, cand in slim_candidates(spec, config, group):
            score = evaluate(cand)
            scored.append({"layer": layer, "config": list(cand), "psnr": score})
            if best is None or score > best[0]:
                best = (score, layer, cand)
        score, layer, config = best
        space.log.append({"step": len(space.log), "candidates": scored, "chosen_layer": layer})
        space.entries.append(RouteEntry(config, config_flops(spec, config), score))
        log.info("slim step %d: layer %d -> %s (%.3f dB, %.0f MACs/px)", len(space.log) - 1, layer,
                 config, score, space.entries[-1].flops_per_pixel)
    return space


def select_by_budget(space: RoutingSpace, budget_flops_per_pixel: float) -> WidthConfig:
    """Best-PSNR entry within the budget; the smallest entry (with a warning) if none fits."""
    if not len(space):
        raise ValueError("empty routing space")
    fitting = [e for e in space.entries if e.flops_per_pixel <= budget_flops_per_pixel]
    if not fitting:
        warnings.warn(f"no routing-space entry fits {budget_flops_per_pixel:.1f} FLOPs/pixel; "
                      "using the smallest", RuntimeWarning, stacklevel=2)
        return min(space.entries, key=lambda e: e.flops_per_pixel).config
    return max(fitting, key=lambda e: e.psnr).config
