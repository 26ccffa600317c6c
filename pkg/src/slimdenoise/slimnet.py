"""Weight-shared slimmable residual denoiser and its sandwich-rule training."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import GateAttention, attention_backward, attention_forward
from .metrics import psnr_per_image

log = logging.getLogger(__name__)

WidthConfig = tuple[int, ...]
DISTILL_MODES = ("synergy", "inplace", "none")
# init gain of input channels beyond a layer's minimum width, relative to He at full fan-in
TAIL_GAIN = 0.3


def _snap(value: float, quantum: int) -> int:
    return int(quantum * round(value / quantum))


@dataclass(frozen=True)
class BackboneSpec:
    """Layer layout of the residual CNN.

    ``depth`` conv layers; the outputs of the first ``depth - 1`` are slimmable,
    the last maps back to ``image_channels`` and is added to the input.
    """

    depth: int = 8
    base_width: int = 32
    kernel: int = 3
    image_channels: int = 1
    rho_min: float = 0.2
    rho_max: float = 1.5
    quantum: int = 8
    base_widths: tuple[int, ...] | None = None
    max_widths: tuple[int, ...] | None = None
    min_widths: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("backbone needs at least two conv layers")
        for name in ("base_widths", "max_widths", "min_widths"):
            v = getattr(self, name)
            if v is not None:
                if len(v) != self.n_slimmable:
                    raise ValueError(f"{name} must have {self.n_slimmable} entries")
                object.__setattr__(self, name, tuple(int(x) for x in v))
        lo, hi = self.min_channels, self.max_channels
        for i, (a, b) in enumerate(zip(lo, hi)):
            if not self.quantum <= a <= b:
                raise ValueError(f"layer {i}: invalid width bounds [{a}, {b}]")
            if (b - a) % self.quantum:
                raise ValueError(f"layer {i}: width range [{a}, {b}] is not on the {self.quantum}-grid")

    @property
    def n_slimmable(self) -> int:
        return self.depth - 1

    @property
    def bases(self) -> tuple[int, ...]:
        return self.base_widths or (self.base_width,) * self.n_slimmable

    @property
    def max_channels(self) -> tuple[int, ...]:
        if self.max_widths is not None:
            return self.max_widths
        return tuple(max(self.quantum, _snap(self.rho_max * n, self.quantum)) for n in self.bases)

    @property
    def min_channels(self) -> tuple[int, ...]:
        if self.min_widths is not None:
            return self.min_widths
        return tuple(max(self.quantum, _snap(self.rho_min * n, self.quantum)) for n in self.bases)

    def largest(self) -> WidthConfig:
        return self.max_channels

    def smallest(self) -> WidthConfig:
        return self.min_channels

    def widths_grid(self, layer: int) -> np.ndarray:
        return np.arange(self.min_channels[layer], self.max_channels[layer] + 1, self.quantum)

    def validate(self, config) -> WidthConfig:
        config = tuple(int(c) for c in config)
        if len(config) != self.n_slimmable:
            raise ValueError(f"width config needs {self.n_slimmable} entries, got {len(config)}")
        for i, (c, lo, hi) in enumerate(zip(config, self.min_channels, self.max_channels)):
            if not lo <= c <= hi:
                raise ValueError(f"layer {i}: width {c} outside [{lo}, {hi}]")
        return config

    def io_widths(self, config: WidthConfig) -> list[tuple[int, int]]:
        """(in_active, out_active) for every conv layer."""
        ins = (self.image_channels, *config)
        outs = (*config, self.image_channels)
        return list(zip(ins, outs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        for k in ("base_widths", "max_widths", "min_widths"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class SuperNet:
    spec: BackboneSpec
    layers: list[T.ConvLayer]
    attention: GateAttention
    attach_index: int = 0  # attention/gate sit behind this conv block

    @classmethod
    def init(cls, spec: BackboneSpec, rng: np.random.Generator, reduction: int = 4) -> "SuperNet":
        ins = (spec.image_channels, *spec.max_channels)
        outs = (*spec.max_channels, spec.image_channels)
        mins = (spec.image_channels, *spec.min_channels)
        layers = []
        for i, (cin, cout) in enumerate(zip(ins, outs)):
            last = i == spec.depth - 1
            # a near-zero output layer starts the residual net at the identity
            layer = T.ConvLayer.init(rng, cin, cout, spec.kernel, name=f"conv{i}", scale=1e-3 if last else None)
            if 0 < i < spec.depth - 1 and mins[i] < cin:
                # Without normalization a narrow prefix only sees a fraction of the
                # He-scaled fan-in, so its signal shrinks geometrically with depth.
                # He gain on the minimum-width prefix keeps every width trainable.
                m = mins[i]
                layer.weight[:, :m] *= np.float32(np.sqrt(cin / m))
                layer.weight[:, m:] *= np.float32(TAIL_GAIN)
            layers.append(layer)
        att = GateAttention.init(rng, spec.max_channels[0], reduction)
        return cls(spec, layers, att)

    def params(self, with_attention: bool = True) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        if with_attention:
            out.update(self.attention.params())
        return out

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, arr in sorted(self.params().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _run(net: SuperNet, config, noisy, attention, cache, start=0, h=None):
    spec = net.spec
    config = spec.validate(config)
    if noisy.ndim != 4 or noisy.shape[1] != spec.image_channels:
        raise T.ShapeError(f"expected (B, {spec.image_channels}, H, W) input, got {noisy.shape}")
    widths = spec.io_widths(config)
    last = len(net.layers) - 1
    if h is None:
        h = noisy
    for i in range(start, len(net.layers)):
        cin, cout = widths[i]
        z = T.conv2d_slim_forward(h, net.layers[i], cin, cout)
        if i == last:
            if cache is not None:
                cache.append({"input": h})
            return noisy + z
        act = T.relu_forward(z)
        entry = {"input": h, "act": act}
        if i == net.attach_index and attention is not None:
            act, entry["att"] = attention_forward(act, attention)
        if cache is not None:
            cache.append(entry)
        h = act
    raise AssertionError("unreachable")


def forward(net: SuperNet, config, noisy: np.ndarray, attention: GateAttention | None = None) -> np.ndarray:
    """Denoise ``noisy`` at ``config``; ``attention`` is given only during stage-1 training."""
    return _run(net, config, noisy, attention, None)


def forward_train(net: SuperNet, config, noisy, attention=None):
    cache: list[dict] = []
    out = _run(net, config, noisy, attention, cache)
    return out, cache


def backward(net: SuperNet, config, cache: list[dict], grad_out: np.ndarray, tape: T.GradTape,
             attention: GateAttention | None = None) -> None:
    widths = net.spec.io_widths(tuple(config))
    grad = grad_out
    for i in range(len(net.layers) - 1, -1, -1):
        entry = cache[i]
        if i < len(net.layers) - 1:
            if "att" in entry:
                grad = attention_backward(grad, entry["att"], attention, tape)
            grad = T.relu_backward(grad, entry["act"])
        cin, cout = widths[i]
        grad = T.conv2d_slim_backward(grad, entry["input"], net.layers[i], cin, cout, tape)


def first_block(net: SuperNet, noisy: np.ndarray, width: int | None = None) -> np.ndarray:
    """Post-ReLU features of the first conv block (attention disabled)."""
    width = net.spec.max_channels[0] if width is None else width
    z = T.conv2d_slim_forward(noisy, net.layers[0], net.spec.image_channels, width)
    return T.relu_forward(z)


def forward_from_first(net: SuperNet, config, noisy, features: np.ndarray) -> np.ndarray:
    """Finish a forward given first-block features at width >= ``config[0]``.

    Uses the channel prefix of ``features``, which equals the first block run at
    ``config[0]`` channels.
    """
    config = net.spec.validate(config)
    h = np.ascontiguousarray(features[:, :config[0]])
    return _run(net, config, noisy, None, None, start=1, h=h)


def sample_sandwich(spec: BackboneSpec, rng: np.random.Generator, n_samples: int) -> list[WidthConfig]:
    """Largest first, smallest last, ``n_samples - 2`` per-layer-uniform widths in between."""
    if n_samples < 2:
        raise ValueError("sandwich sampling needs at least 2 configs")
    out = [spec.largest()]
    for _ in range(n_samples - 2):
        out.append(tuple(int(rng.choice(spec.widths_grid(i))) for i in range(spec.n_slimmable)))
    out.append(spec.smallest())
    return out


def inplace_synergy_loss(net: SuperNet, configs: list[WidthConfig], noisy: np.ndarray, clean: np.ndarray,
                         tape: T.GradTape, distill: str = "synergy", attention: GateAttention | None = None):
    """Sandwich loss with gradients accumulated into ``tape``.

    ``distill``:
      * ``synergy``: random branches match the largest output, the smallest
        matches the mean of the largest and random outputs;
      * ``inplace``: every smaller branch matches the largest output;
      * ``none``: every branch is supervised by ``clean``.

    Returns (total, components) where components has keys largest/random/smallest.
    """
    if len(configs) < 2:
        raise ValueError("in-place synergy needs at least 2 configs")
    if distill not in DISTILL_MODES:
        raise ValueError(f"unknown distillation mode {distill!r}")

    def branch(config, target):
        pred, cache = forward_train(net, config, noisy, attention)
        loss, grad = T.divergence_loss(pred, target)
        backward(net, config, cache, grad, tape, attention)
        return pred, loss

    # teacher branches run first; their outputs enter later terms as constants
    x_large, l_large = branch(configs[0], clean)
    teacher = T.stop_gradient(x_large)
    ensemble = x_large.astype(np.float64)
    l_random = 0.0
    for config in configs[1:-1]:
        x_r, loss = branch(config, clean if distill == "none" else teacher)
        ensemble += x_r
        l_random += loss
    if distill == "synergy":
        small_target = T.stop_gradient(ensemble / (len(configs) - 1))
    elif distill == "inplace":
        small_target = teacher
    else:
        small_target = clean
    _, l_small = branch(configs[-1], small_target)
    parts = {"largest": l_large, "random": l_random, "smallest": l_small}
    return l_large + l_random + l_small, parts


def evaluate_psnr(net: SuperNet, config, noisy: np.ndarray, clean: np.ndarray,
                  attention: GateAttention | None = None, batch_size: int = 16) -> float:
    """Mean per-image PSNR of ``config`` over a patch set."""
    scores = []
    for s in range(0, len(noisy), batch_size):
        pred = forward(net, config, noisy[s:s + batch_size], attention)
        scores.append(psnr_per_image(pred, clean[s:s + batch_size]))
    return float(np.mean(np.concatenate(scores)))


@dataclass
class TrainLog:
    iterations: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


def train_supernet(net: SuperNet, train, val, epochs: int, rng: np.random.Generator, *,
                   batch_size: int = 4, lr: float = 1e-3, lr_decay: float = 0.9, n_samples: int = 4,
                   distill: str = "synergy", adam: T.AdamState | None = None,
                   log_every: int = 10) -> tuple[SuperNet, TrainLog, T.AdamState]:
    """Stage 1: sandwich sampling + in-place synergy, one Adam step per batch.

    ``train`` / ``val`` are PatchSets. Validation PSNR of the largest and
    smallest configs is logged every epoch, with the attention head on (as
    trained) and off (as used by slimming and gating).
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    adam = adam or T.AdamState(lr=lr)
    params = net.params()
    tape = T.GradTape()
    history = TrainLog()
    spec = net.spec
    it = 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        for s in range(0, len(order), batch_size):
            idx = np.sort(order[s:s + batch_size])
            configs = sample_sandwich(spec, rng, n_samples)
            tape.zero()
            loss, parts = inplace_synergy_loss(net, configs, train.noisy[idx], train.clean[idx], tape,
                                               distill=distill, attention=net.attention)
            if not np.isfinite(loss):
                raise T.NumericError(f"non-finite loss at epoch {epoch} iteration {it}: {parts}, "
                                     f"configs={configs}, batch={idx.tolist()}")
            T.adam_step(params, tape, adam)
            if it % log_every == 0:
                history.iterations.append({"iteration": it, "epoch": epoch, "loss": loss, **parts})
                log.debug("iter %d loss %.6f %s", it, loss, parts)
            it += 1
        adam.decay(lr_decay)
        row = {"epoch": epoch, "seconds": time.perf_counter() - t0, "lr": adam.lr}
        if val is not None and len(val):
            for tag, cfg in (("largest", spec.largest()), ("smallest", spec.smallest())):
                row[f"psnr_{tag}"] = evaluate_psnr(net, cfg, val.noisy, val.clean)
                row[f"psnr_{tag}_attention"] = evaluate_psnr(net, cfg, val.noisy, val.clean, net.attention)
        history.epochs.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
    return net, history, adam
