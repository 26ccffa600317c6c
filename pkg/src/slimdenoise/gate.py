"""Input-adaptive gate that picks a routing-space entry per image.

Candidates exposed to the gate are ordered by increasing FLOPs: index 0 is the
cheapest route (the "easy" label) and index E-1 the most expensive ("hard").
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import GateAttention, squeeze
from .metrics import GateDims, count_flops, psnr_per_image
from .slimming import RoutingSpace
from .slimnet import SuperNet, first_block, forward, forward_from_first

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class GatePredictor:
    w3: np.ndarray  # (D, C/r)
    bn: T.BatchNorm1d
    w4: np.ndarray  # (E, D)

    @classmethod
    def init(cls, rng: np.random.Generator, reduced: int, hidden: int, candidates: int) -> "GatePredictor":
        w3 = (rng.standard_normal((hidden, reduced)) * np.sqrt(2.0 / reduced)).astype(T.DTYPE)
        w4 = (rng.standard_normal((candidates, hidden)) * 0.01).astype(T.DTYPE)
        return cls(w3, T.BatchNorm1d.init(hidden, name="gate.bn"), w4)

    @property
    def candidates(self) -> int:
        return self.w4.shape[0]


@dataclass
class ComplexityBudget:
    target: float  # C, FLOPs/pixel
    normalizer: float  # T, FLOPs/pixel of the full-width super-network

    def __post_init__(self):
        if self.target <= 0 or self.normalizer <= 0:
            raise ValueError("budget target and normalizer must be positive")


@dataclass
class DifficultyLabel:
    onehot: np.ndarray
    gain: float

    @property
    def index(self) -> int:
        return int(np.argmax(self.onehot))


@dataclass
class Gate:
    w1: np.ndarray  # (C/r, C); starts as a copy of the stage-1 attention reduction
    predictor: GatePredictor
    candidates: list[int]  # routing-space indices, increasing FLOPs
    candidate_flops: list[float]  # FLOPs/pixel of the full dynamic path per candidate
    budget: ComplexityBudget | None = None

    @property
    def dims(self) -> GateDims:
        return GateDims(self.w1.shape[1], self.w1.shape[0], self.predictor.w3.shape[0], len(self.candidates))

    def params(self) -> dict[str, np.ndarray]:
        p = {"gate.w1": self.w1, "gate.w3": self.predictor.w3, "gate.w4": self.predictor.w4}
        p.update(self.predictor.bn.params())
        return p

    def buffers(self) -> dict[str, np.ndarray]:
        return self.predictor.bn.buffers()


# ---------------------------------------------------------------------------
# forward pieces


def gate_forward(u: np.ndarray, w1: np.ndarray, pred: GatePredictor, training: bool):
    """Squeezed features (B, C) -> softmax probabilities (B, E) and a backward cache."""
    if pred.candidates < 2:
        raise ValueError("gate needs at least 2 candidates")
    z1 = T.linear_forward(u, w1, "gate.w1")
    r = T.relu_forward(z1)
    h = T.linear_forward(r, pred.w3, "gate.w3")
    hb, bn_cache = T.batchnorm1d_forward(h, pred.bn, training)
    a = T.relu_forward(hb)
    logits = T.linear_forward(a, pred.w4, "gate.w4")
    probs = T.softmax_forward(logits)
    return probs, (u, z1, r, hb, bn_cache, a, probs)


def gate_backward(dprobs: np.ndarray, cache, w1: np.ndarray, pred: GatePredictor, tape: T.GradTape) -> None:
    u, z1, r, hb, bn_cache, a, probs = cache
    dlogits = T.softmax_backward(dprobs, probs)
    da = T.linear_backward(dlogits, a, pred.w4, "gate.w4", tape)
    dhb = T.relu_backward(da, hb)
    dh = T.batchnorm1d_backward(dhb, bn_cache, pred.bn, tape)
    dr = T.linear_backward(dh, r, pred.w3, "gate.w3", tape)
    T.linear_backward(T.relu_backward(dr, z1), u, w1, "gate.w1", tape)


def gate_predict(x: np.ndarray, att, pred: GatePredictor, training: bool = False):
    """First-block features (B, C, H, W) -> (probs (B, E), argmax (B,)).

    ``att`` is a GateAttention or its ``w1`` matrix; only the reduction branch is used.
    """
    w1 = att.w1 if isinstance(att, GateAttention) else att
    probs, _ = gate_forward(squeeze(x), w1, pred, training)
    return probs, np.argmax(probs, axis=1)


# ---------------------------------------------------------------------------
# labels and losses


def psnr_gain(net: SuperNet, noisy: np.ndarray, clean: np.ndarray) -> np.ndarray:
    spec = net.spec
    large = psnr_per_image(forward(net, spec.largest(), noisy), clean)
    small = psnr_per_image(forward(net, spec.smallest(), noisy), clean)
    return large - small


def labels_from_gain(gain: np.ndarray, beta: float) -> np.ndarray:
    """0 (easy) unless the gain strictly exceeds ``beta``, then 1 (hard)."""
    return (np.asarray(gain) > beta).astype(np.int64)


def label_online(net: SuperNet, noisy: np.ndarray, clean: np.ndarray, beta: float,
                 candidates: int = 2) -> list[DifficultyLabel]:
    """One-hot difficulty labels: first candidate when the largest config gains
    at most ``beta`` dB over the smallest, last candidate otherwise."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    gain = psnr_gain(net, noisy, clean)
    out = []
    for g, hard in zip(gain, labels_from_gain(gain, beta)):
        onehot = np.zeros(candidates, np.float32)
        onehot[candidates - 1 if hard else 0] = 1.0
        out.append(DifficultyLabel(onehot, float(g)))
    return out


def gate_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy against class indices."""
    p = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


def expected_flops(probs: np.ndarray, candidate_flops) -> float:
    """Softmax-weighted FLOPs/pixel averaged over the batch."""
    return float(np.mean(probs.astype(np.float64) @ np.asarray(candidate_flops, np.float64)))


def complexity_loss(expected_flops_per_pixel: float, budget: ComplexityBudget) -> float:
    return float(((expected_flops_per_pixel - budget.target) / budget.normalizer) ** 2)


def joint_loss_grad(probs, labels, candidate_flops, budget: ComplexityBudget):
    """(total, parts, dL/dprobs) for cross-entropy + complexity loss."""
    b = len(labels)
    f = np.asarray(candidate_flops, np.float64)
    psi = expected_flops(probs, f)
    l_gate = gate_loss(probs, labels)
    l_comp = complexity_loss(psi, budget)
    d = np.zeros_like(probs, dtype=np.float64)
    rows = np.arange(b)
    d[rows, labels] = -1.0 / (b * np.maximum(probs[rows, labels].astype(np.float64), PROB_FLOOR))
    d += (2.0 * (psi - budget.target) / budget.normalizer ** 2 / b) * f[None, :]
    return l_gate + l_comp, {"gate": l_gate, "comp": l_comp, "psi": psi}, d.astype(T.DTYPE)


# ---------------------------------------------------------------------------
# candidates and training


def stratified_candidates(space: RoutingSpace, count: int = 4) -> list[int]:
    """Routing-space indices of the smallest, largest and ``count - 2`` entries
    spaced evenly in FLOPs between them; returned in increasing-FLOPs order."""
    n = len(space)
    if count >= n:
        chosen = set(range(n))
    else:
        flops = np.asarray(space.flops)
        lo, hi = flops.min(), flops.max()
        chosen = {int(np.argmin(flops)), int(np.argmax(flops))}
        for t in np.linspace(lo, hi, count)[1:-1]:
            order = np.argsort(np.abs(flops - t), kind="stable")
            chosen.add(int(next(i for i in order if int(i) not in chosen)))
    return sorted(chosen, key=lambda i: (space[i].flops_per_pixel, i))


def dynamic_flops(net: SuperNet, config, dims: GateDims | None, image: tuple[int, int]) -> float:
    return count_flops(net.spec, config, image, dims, first_block_width=net.spec.max_channels[0]).flops_per_pixel


def init_gate(net: SuperNet, space: RoutingSpace, rng: np.random.Generator, candidates: int = 4,
              hidden: int = 16, image: tuple[int, int] = (64, 64)) -> Gate:
    idx = stratified_candidates(space, candidates)
    w1 = net.attention.w1.copy()
    pred = GatePredictor.init(rng, w1.shape[0], hidden, len(idx))
    gate = Gate(w1, pred, idx, [])
    gate.candidate_flops = [dynamic_flops(net, space[i].config, gate.dims, image) for i in idx]
    return gate


def gate_inputs(net: SuperNet, noisy: np.ndarray, clean: np.ndarray | None = None, beta: float | None = None,
                batch_size: int = 32):
    """Squeezed first-block features and (optionally) gain labels for a patch set.

    With the backbone frozen and attention disabled both are fixed functions of
    the image, so computing them once equals recomputing them every epoch.
    """
    us, gains = [], []
    for s in range(0, len(noisy), batch_size):
        y = noisy[s:s + batch_size]
        us.append(squeeze(first_block(net, y)))
        if clean is not None:
            gains.append(psnr_gain(net, y, clean[s:s + batch_size]))
    u = np.concatenate(us)
    if clean is None:
        return u, None, None
    gain = np.concatenate(gains)
    return u, gain, labels_from_gain(gain, beta)


def train_gate(net: SuperNet, space: RoutingSpace, dataset, budget: ComplexityBudget, beta: float,
               epochs: int, rng: np.random.Generator, *, lr: float = 5e-5, batch_size: int = 64,
               lr_decay: float = 0.9, candidates: int = 4, hidden: int = 16,
               gate: Gate | None = None, cached_inputs=None) -> tuple[Gate, dict]:
    """Train gate parameters only; the backbone stays bitwise unchanged."""
    image = dataset.noisy.shape[2:]
    gate = gate or init_gate(net, space, rng, candidates, hidden, image)
    gate.budget = budget
    e = len(gate.candidates)
    u, gain, hard = cached_inputs or gate_inputs(net, dataset.noisy, dataset.clean, beta)
    labels = np.where(hard == 1, e - 1, 0)
    params = gate.params()
    adam = T.AdamState(lr=lr)
    tape = T.GradTape()
    history = {"label_hard_fraction": float(hard.mean()), "candidates": list(gate.candidates),
               "candidate_flops": list(gate.candidate_flops), "budget": budget.target,
               "normalizer": budget.normalizer, "epochs": []}
    for epoch in range(epochs):
        order = rng.permutation(len(u))
        correct, psis, losses = 0, [], []
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            if len(idx) < 2:  # batch statistics need two samples
                continue
            probs, cache = gate_forward(u[idx], gate.w1, gate.predictor, training=True)
            loss, parts, dprobs = joint_loss_grad(probs, labels[idx], gate.candidate_flops, budget)
            if not np.isfinite(loss):
                raise T.NumericError(f"non-finite gate loss at epoch {epoch}: {parts}")
            tape.zero()
            gate_backward(dprobs, cache, gate.w1, gate.predictor, tape)
            T.adam_step(params, tape, adam)
            correct += int(np.sum(np.argmax(probs, 1) == labels[idx]))
            psis.append(parts["psi"] * len(idx))
            losses.append(loss)
        adam.decay(lr_decay)
        row = {"epoch": epoch, "label_accuracy": correct / len(u), "expected_flops": float(np.sum(psis) / len(u)),
               "loss": float(np.mean(losses)) if losses else float("nan"), "lr": adam.lr}
        history["epochs"].append(row)
        log.info("gate epoch %d: %s", epoch, row)
    probs, _ = gate_forward(u, gate.w1, gate.predictor, training=False)
    history["final"] = {"label_accuracy": float(np.mean(np.argmax(probs, 1) == labels)),
                        "expected_flops": expected_flops(probs, gate.candidate_flops),
                        "argmax_flops": float(np.mean(np.asarray(gate.candidate_flops)[np.argmax(probs, 1)]))}
    return gate, history


# ---------------------------------------------------------------------------
# inference


@dataclass
class DynamicResult:
    denoised: np.ndarray
    routes: list[tuple[int, ...]] = field(default_factory=list)
    route_indices: list[int] = field(default_factory=list)  # routing-space indices
    flops_per_pixel: list[float] = field(default_factory=list)

    @property
    def mean_flops(self) -> float:
        return float(np.mean(self.flops_per_pixel))


def dynamic_denoise(net: SuperNet, space: RoutingSpace, gate: Gate | None, noisy: np.ndarray,
                    force_route: int | None = None, force_candidate: int | None = None) -> DynamicResult:
    """Run the first block at full width, let the gate choose a candidate per
    image, then finish each image at its route.

    ``force_route`` (a routing-space index) bypasses the gate;
    ``force_candidate`` replaces the gate's argmax (the gate still runs and is charged).
    """
    feats = first_block(net, noisy)
    b = len(noisy)
    image = noisy.shape[2:]
    dims = None
    if force_route is not None:
        route_idx = np.full(b, force_route)
    elif gate is None or len(gate.candidates) == 1:
        only = gate.candidates[0] if gate is not None else 0
        route_idx = np.full(b, only)
    else:
        dims = gate.dims
        _, choice = gate_predict(feats, gate.w1, gate.predictor, training=False)
        if force_candidate is not None:
            choice = np.full(b, force_candidate)
        route_idx = np.asarray(gate.candidates)[choice]
    out = np.empty_like(noisy)
    for r in np.unique(route_idx):
        sel = np.flatnonzero(route_idx == r)
        rows = slice(sel[0], sel[-1] + 1) if np.array_equal(sel, np.arange(sel[0], sel[-1] + 1)) else sel
        out[rows] = forward_from_first(net, space[int(r)].config, noisy[rows], feats[rows])
    result = DynamicResult(out)
    for r in route_idx:
        cfg = space[int(r)].config
        result.routes.append(cfg)
        result.route_indices.append(int(r))
        result.flops_per_pixel.append(dynamic_flops(net, cfg, dims, image))
    return result
