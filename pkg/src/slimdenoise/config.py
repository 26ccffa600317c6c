"""Run configuration: defaults, YAML loading and dotted-key overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .slimnet import BackboneSpec


@dataclass
class DataConfig:
    train_count: int = 2048
    val_count: int = 64
    test_count: int = 64
    patch_size: int = 64
    sigma_min: float = 10.0  # noise std range in 8-bit units (divided by 255)
    sigma_max: float = 50.0

    @property
    def sigma_range(self) -> tuple[float, float]:
        return self.sigma_min / 255.0, self.sigma_max / 255.0


@dataclass
class SupernetConfig:
    epochs: int = 1  # T_s
    batch_size: int = 4  # small batches: more Adam steps per CPU minute
    lr: float = 1e-3
    lr_decay: float = 0.9
    n_samples: int = 4  # n
    distill: str = "synergy"  # synergy | inplace | none


@dataclass
class SlimConfig:
    group: int = 16


@dataclass
class GateConfig:
    epochs: int = 30  # T_g
    batch_size: int = 64
    lr: float = 5e-5
    lr_decay: float = 0.9
    beta: float = 0.2
    budget_ratio: float = 0.7  # C / T
    candidates: int = 4  # E
    hidden: int = 16  # D
    reduction: int = 4  # r


@dataclass
class BenchConfig:
    image_size: int = 128
    repeats: int = 9
    widths: list[int] = field(default_factory=lambda: [48, 40, 32, 24, 16, 8])


@dataclass
class RunConfig:
    seed: int = 0
    workdir: str = "run"
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    supernet: SupernetConfig = field(default_factory=SupernetConfig)
    slim: SlimConfig = field(default_factory=SlimConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for key, value in (d or {}).items():
            _assign(cfg, key, value)
        return cfg

    def override(self, dotted: str, value) -> None:
        parts = dotted.split(".")
        target = self
        for p in parts[:-1]:
            target = getattr(target, p)
        if parts[0] == "backbone":
            self.backbone = BackboneSpec.from_dict({**self.backbone.to_dict(),
                                                    parts[-1]: _coerce_backbone(self.backbone, parts[-1], value)})
        else:
            _set_field(target, parts[-1], value)


def _set_field(obj, name, value):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if name not in fields:
        raise KeyError(f"unknown config key {type(obj).__name__}.{name}")
    current = getattr(obj, name)
    if isinstance(current, bool):
        value = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
    elif isinstance(current, int) and not isinstance(value, list):
        value = int(value)
    elif isinstance(current, float):
        value = float(value)
    elif isinstance(current, list) and isinstance(value, str):
        value = [int(v) for v in value.split(",")]
    setattr(obj, name, value)


def _coerce_backbone(spec: BackboneSpec, name: str, value):
    if name not in spec.to_dict():
        raise KeyError(f"unknown config key BackboneSpec.{name}")
    if not isinstance(value, str):
        return value
    current = getattr(spec, name)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, int):
        return int(value)
    if value.lower() in ("", "none", "null"):
        return None
    return tuple(int(v) for v in value.strip("[]()").split(","))


def _assign(cfg: RunConfig, key, value):
    if key == "backbone":
        cfg.backbone = BackboneSpec.from_dict({**cfg.backbone.to_dict(), **(value or {})})
    elif isinstance(value, dict):
        section = getattr(cfg, key)
        for k, v in value.items():
            _set_field(section, k, v)
    else:
        _set_field(cfg, key, value)


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(yaml.safe_load(Path(path).read_text()))


TEMPLATE = """\
# slimdenoise run configuration (YAML). Every key is optional.
seed: 0
workdir: run
backbone:
  depth: 8              # conv layers; the first depth-1 outputs are slimmable (L)
  base_width: 32        # n: base channel count per slimmable layer
  kernel: 3
  rho_min: 0.2          # rho lower bound (smallest sub-network)
  rho_max: 1.5          # rho upper bound (largest sub-network)
  quantum: 8            # smallest division of channel number per layer
data:
  train_count: 2048
  val_count: 64
  test_count: 64
  patch_size: 64
  sigma_min: 10         # Gaussian noise std, 8-bit units
  sigma_max: 50
supernet:
  epochs: 1             # T_s: epochs of super network training
  batch_size: 4
  lr: 0.001
  lr_decay: 0.9
  n_samples: 4          # n: sampled channel configurations per iteration
  distill: synergy      # synergy (In-place Synergy) | inplace | none
slim:
  group: 16             # channels per group removed in one progressive slimming step
gate:
  epochs: 30            # T_g: epochs of gate training
  batch_size: 64
  lr: 0.00005           # Adam initial learning rate
  lr_decay: 0.9         # learning-rate decay factor per epoch
  beta: 0.2             # beta: PSNR gain threshold for hard/easy gate labels
  budget_ratio: 0.7     # C / T: computation constraint relative to the full-width FLOPs/pixel
  candidates: 4         # E: candidate sub-networks exposed to the gate
  hidden: 16            # D: hidden dimension of the prediction head
  reduction: 4          # r: reduction ratio of the attention head
bench:
  image_size: 128
  repeats: 9
  widths: [48, 40, 32, 24, 16, 8]
"""
