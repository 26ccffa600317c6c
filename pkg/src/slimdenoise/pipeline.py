"""Three-stage pipeline drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, gate as G, slimming, slimnet
from . import tensor as T
from .attention import GateAttention
from .config import RunConfig
from .metrics import count_flops, psnr_per_image, ssim_per_image

log = logging.getLogger(__name__)

SUPERNET_CKPT = "supernet.ckpt"
SLIM_CKPT = "slimmed.ckpt"
MODEL_CKPT = "model.ckpt"
REPORT_VERSION = 1
REPORT_COLUMNS = ("group", "model", "type", "flops_per_pixel", "psnr", "ssim")


class PipelineError(Exception):
    """Missing or incompatible pipeline artifact."""


# ---------------------------------------------------------------------------
# datasets


def datasets(cfg: RunConfig):
    d = cfg.data
    return (data.synth_dataset(cfg.seed, d.train_count, d.patch_size, d.sigma_range),
            data.synth_dataset(cfg.seed + 1_000_003, d.val_count, d.patch_size, d.sigma_range),
            data.synth_dataset(cfg.seed + 2_000_003, d.test_count, d.patch_size, d.sigma_range))


# ---------------------------------------------------------------------------
# model <-> checkpoint


@dataclass
class Model:
    net: slimnet.SuperNet
    space: slimming.RoutingSpace | None = None
    gate: G.Gate | None = None
    ckpt: data.Checkpoint | None = None


def model_to_checkpoint(model: Model, cfg: RunConfig | None = None, extra_meta: dict | None = None,
                        adam: T.AdamState | None = None) -> data.Checkpoint:
    net = model.net
    ckpt = data.Checkpoint(data.spec_digest(net.spec))
    ckpt.tensors["backbone"] = dict(net.params())
    ckpt.meta["spec"] = net.spec.to_dict()
    if cfg is not None:
        ckpt.meta["run"] = cfg.to_dict()
    if adam is not None:
        ckpt.tensors["adam"] = {**{f"m.{k}": v for k, v in adam.m.items()},
                                **{f"v.{k}": v for k, v in adam.v.items()}}
        ckpt.meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
                             "step": adam.step}
    if model.space is not None:
        ckpt.meta["routing_space"] = model.space.to_dict()
    if model.gate is not None:
        g = model.gate
        ckpt.tensors["gate"] = {**g.params(), **g.buffers()}
        ckpt.meta["gate"] = {"candidates": g.candidates, "candidate_flops": g.candidate_flops,
                             "budget": None if g.budget is None else [g.budget.target, g.budget.normalizer]}
    ckpt.meta.update(extra_meta or {})
    return ckpt


def model_from_checkpoint(ckpt: data.Checkpoint) -> Model:
    if "spec" not in ckpt.meta or "backbone" not in ckpt.tensors:
        raise PipelineError("checkpoint has no backbone section")
    spec = slimnet.BackboneSpec.from_dict(ckpt.meta["spec"])
    t = ckpt.tensors["backbone"]
    layers = [T.ConvLayer(t[f"conv{i}.weight"].copy(), t[f"conv{i}.bias"].copy(), 1, spec.kernel // 2, f"conv{i}")
              for i in range(spec.depth)]
    att = GateAttention(t["att.w1"].copy(), t["att.w2"].copy())
    model = Model(slimnet.SuperNet(spec, layers, att), ckpt=ckpt)
    if "routing_space" in ckpt.meta:
        model.space = slimming.RoutingSpace.from_dict(ckpt.meta["routing_space"])
    if "gate" in ckpt.tensors:
        gt, gm = ckpt.tensors["gate"], ckpt.meta["gate"]
        bn = T.BatchNorm1d(gt["gate.bn.gamma"].copy(), gt["gate.bn.beta"].copy(),
                           gt["gate.bn.running_mean"].copy(), gt["gate.bn.running_var"].copy(), name="gate.bn")
        pred = G.GatePredictor(gt["gate.w3"].copy(), bn, gt["gate.w4"].copy())
        budget = G.ComplexityBudget(*gm["budget"]) if gm.get("budget") else None
        model.gate = G.Gate(gt["gate.w1"].copy(), pred, list(gm["candidates"]), list(gm["candidate_flops"]), budget)
    return model


def adam_from_checkpoint(ckpt: data.Checkpoint) -> T.AdamState | None:
    if "adam" not in ckpt.meta:
        return None
    m = ckpt.meta["adam"]
    st = T.AdamState(m["lr"], m["beta1"], m["beta2"], m["eps"], m["step"])
    for k, v in ckpt.tensors.get("adam", {}).items():
        kind, name = k.split(".", 1)
        (st.m if kind == "m" else st.v)[name] = v.copy()
    return st


def save_model(path, model: Model, cfg: RunConfig | None = None, extra_meta=None, adam=None) -> None:
    data.save_checkpoint(path, model_to_checkpoint(model, cfg, extra_meta, adam))


def load_model(path, require: tuple[str, ...] = ()) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    model = model_from_checkpoint(data.load_checkpoint(path))
    if "routing_space" in require and model.space is None:
        raise PipelineError(f"{path}: checkpoint has no routing space (run `slim` first)")
    if "gate" in require and model.gate is None:
        raise PipelineError(f"{path}: checkpoint has no gate (run `train-gate` first)")
    return model


# ---------------------------------------------------------------------------
# stages


def run_supernet(cfg: RunConfig, out_path=None, train=None, val=None) -> tuple[Model, dict]:
    if train is None:
        train, val, _ = datasets(cfg)
    rng = np.random.default_rng(cfg.seed)
    net = slimnet.SuperNet.init(cfg.backbone, rng, cfg.gate.reduction)
    s = cfg.supernet
    net, history, adam = slimnet.train_supernet(net, train, val, s.epochs, rng, batch_size=s.batch_size, lr=s.lr,
                                                lr_decay=s.lr_decay, n_samples=s.n_samples, distill=s.distill)
    stage_log = {"iterations": history.iterations, "epochs": history.epochs,
                 "noisy_psnr_val": float(np.mean(psnr_per_image(val.noisy, val.clean))) if val is not None else None}
    model = Model(net)
    if out_path is not None:
        save_model(out_path, model, cfg, {"stage1_log": stage_log}, adam)
    return model, stage_log


def run_slim(cfg: RunConfig, model: Model, out_path=None, val=None) -> Model:
    if val is None:
        _, val, _ = datasets(cfg)
    model.space = slimming.progressive_slim(model.net, val, cfg.slim.group)
    if out_path is not None:
        meta = {k: v for k, v in model.ckpt.meta.items() if k == "stage1_log"} if model.ckpt else {}
        save_model(out_path, model, cfg, meta)
    return model


def budget_for(net: slimnet.SuperNet, ratio: float, image) -> G.ComplexityBudget:
    full = count_flops(net.spec, net.spec.largest(), image).flops_per_pixel
    return G.ComplexityBudget(ratio * full, full)


def run_gate(cfg: RunConfig, model: Model, out_path=None, train=None, cached_inputs=None,
             budget_ratio: float | None = None) -> tuple[Model, dict]:
    if model.space is None:
        raise PipelineError("gate training needs a routing space")
    if train is None:
        train, _, _ = datasets(cfg)
    g = cfg.gate
    image = train.noisy.shape[2:]
    budget = budget_for(model.net, g.budget_ratio if budget_ratio is None else budget_ratio, image)
    rng = np.random.default_rng(cfg.seed + 17)
    gate, history = G.train_gate(model.net, model.space, train, budget, g.beta, g.epochs, rng, lr=g.lr,
                                 batch_size=g.batch_size, lr_decay=g.lr_decay, candidates=g.candidates,
                                 hidden=g.hidden, cached_inputs=cached_inputs)
    model.gate = gate
    if out_path is not None:
        meta = {k: v for k, v in model.ckpt.meta.items() if k == "stage1_log"} if model.ckpt else {}
        save_model(out_path, model, cfg, {**meta, "gate_log": history})
    return model, history


# ---------------------------------------------------------------------------
# evaluation report


def evaluate_rows(model: Model, testset, batch_size: int = 16) -> tuple[list[dict], dict]:
    """Static rows for every routing-space entry plus one dynamic row."""
    net, space = model.net, model.space
    rows = []
    for i, entry in enumerate(space.entries):
        p, s = [], []
        for b in range(0, len(testset), batch_size):
            pred = np.clip(slimnet.forward(net, entry.config, testset.noisy[b:b + batch_size]), 0, 1)
            p.append(psnr_per_image(pred, testset.clean[b:b + batch_size]))
            s.append(ssim_per_image(pred, testset.clean[b:b + batch_size]))
        rows.append({"model": f"static-{i}", "type": "static", "route": i, "config": list(entry.config),
                     "flops_per_pixel": entry.flops_per_pixel, "psnr": float(np.mean(np.concatenate(p))),
                     "ssim": float(np.mean(np.concatenate(s)))})
    p, s, flops, routes = [], [], [], []
    for b in range(0, len(testset), batch_size):
        res = G.dynamic_denoise(net, space, model.gate, testset.noisy[b:b + batch_size])
        pred = np.clip(res.denoised, 0, 1)
        p.append(psnr_per_image(pred, testset.clean[b:b + batch_size]))
        s.append(ssim_per_image(pred, testset.clean[b:b + batch_size]))
        flops += res.flops_per_pixel
        routes += res.route_indices
    dyn = {"model": "dynamic", "type": "dynamic", "route": None, "config": None,
           "flops_per_pixel": float(np.mean(flops)), "psnr": float(np.mean(np.concatenate(p))),
           "ssim": float(np.mean(np.concatenate(s))),
           "route_histogram": {int(k): int(v) for k, v in zip(*np.unique(routes, return_counts=True))}}
    return rows, dyn


def nearest_static(rows: list[dict], flops: float) -> dict:
    return min(rows, key=lambda r: (abs(r["flops_per_pixel"] - flops), -r["psnr"]))


def _group_label(flops: float) -> str:
    return f"~{flops / 1000:.1f}K FLOPs/Pixel"


def build_report(model: Model, testset) -> dict:
    if len(testset) == 0:
        raise ValueError("empty test set")
    static, dyn = evaluate_rows(model, testset)
    near = nearest_static(static, dyn["flops_per_pixel"])
    group = _group_label(dyn["flops_per_pixel"])
    table = []
    for r in static:
        table.append({**r, "group": group if r is near else "routing-space"})
    table.append({**dyn, "group": group})
    return {"version": REPORT_VERSION, "rows": table, "dynamic": dyn, "nearest_static": near}


def write_report(report: dict, out_dir, stage_logs: dict | None = None, bench: dict | None = None,
                 figure: bool = True) -> dict[str, Path]:
    """Writes report.tsv, curve.tsv (and report.png); returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# slimdenoise report v{report['version']}",
             "# MACs exclude biases and activations; flops_per_pixel = multiply-adds / input pixels",
             "\t".join(REPORT_COLUMNS)]
    for r in report["rows"]:
        lines.append("\t".join([r["group"], r["model"], r["type"], f"{r['flops_per_pixel']:.1f}",
                                f"{r['psnr']:.4f}", f"{r['ssim']:.4f}"]))
    dyn = report["dynamic"]
    lines.append(f"# dynamic route histogram (routing-space index: images): {dyn['route_histogram']}")
    if stage_logs:
        for name, value in stage_logs.items():
            if isinstance(value, dict) and "epochs" in value:
                for row in value["epochs"]:
                    # wall-clock fields would make the report non-reproducible
                    lines.append(f"# {name}: " + " ".join(f"{k}={v}" for k, v in row.items() if k != "seconds"))
    if bench:
        lines.append("# bench: width\tflops_ratio\tmedian_s\tmad_s\tspeedup")
        for row in bench["rows"]:
            lines.append(f"# bench: {row['width']}\t{row['flops_ratio']:.4f}\t{row['median_s']:.6f}\t"
                         f"{row['mad_s']:.6f}\t{row['speedup']:.3f}")
    paths = {"report": out_dir / "report.tsv", "curve": out_dir / "curve.tsv"}
    paths["report"].write_text("\n".join(lines) + "\n")
    curve = ["# slimdenoise flops-psnr curve v1", "type\tindex\tflops_per_pixel\tpsnr\tssim"]
    for r in report["rows"]:
        idx = r["route"] if r["route"] is not None else -1
        curve.append(f"{r['type']}\t{idx}\t{r['flops_per_pixel']:.1f}\t{r['psnr']:.4f}\t{r['ssim']:.4f}")
    paths["curve"].write_text("\n".join(curve) + "\n")
    if figure:
        from .plots import plot_flops_psnr
        paths["figure"] = plot_flops_psnr(report, out_dir / "report.png")
    return paths


# ---------------------------------------------------------------------------
# benchmark


def uniform_config(spec: slimnet.BackboneSpec, width: int) -> tuple[int, ...]:
    return tuple(int(min(max(width, lo), hi)) for lo, hi in zip(spec.min_channels, spec.max_channels))


def run_bench(net: slimnet.SuperNet, widths, repeats: int = 9, image_size: int = 128, seed: int = 0) -> dict:
    """Median single-threaded latency of one-image forwards at uniform widths."""
    from threadpoolctl import threadpool_limits

    if repeats < 5:
        raise ValueError("bench needs at least 5 repeats")
    spec = net.spec
    img = data.synth_dataset(seed, 1, image_size, (25 / 255, 25 / 255)).noisy
    configs = [uniform_config(spec, w) for w in widths]
    full = count_flops(spec, spec.largest(), (image_size, image_size)).flops_per_pixel
    rows = []
    with threadpool_limits(limits=1):
        for w, cfg in zip(widths, configs):
            slimnet.forward(net, cfg, img)  # warm-up
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                slimnet.forward(net, cfg, img)
                times.append(time.perf_counter() - t0)
            med = float(np.median(times))
            rows.append({"width": int(w), "config": list(cfg), "median_s": med,
                         "mad_s": float(np.median(np.abs(np.asarray(times) - med))),
                         "flops_ratio": count_flops(spec, cfg, (image_size, image_size)).flops_per_pixel / full})
    ref = next((r["median_s"] for r in rows if tuple(r["config"]) == spec.largest()), None)
    if ref is None:  # time the largest config if it was not requested
        ref = run_bench(net, [max(spec.max_channels)], repeats, image_size, seed)["rows"][0]["median_s"]
    for r in rows:
        r["speedup"] = ref / r["median_s"]
    return {"image_size": image_size, "repeats": repeats, "rows": rows}
