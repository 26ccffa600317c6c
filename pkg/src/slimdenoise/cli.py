"""Command-line entry point: ``slimdenoise <command>``.

Exit codes: 0 success, 1 usage error, 2 data error (missing/corrupt files),
3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, gate as G, pipeline, slimnet, slimming
from .config import TEMPLATE, RunConfig, load_config
from .tensor import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("slimdenoise")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


SECTIONS = ("data", "supernet", "slim", "gate", "bench")


def _add_config_flags(p: argparse.ArgumentParser, sections=SECTIONS) -> None:
    g = p.add_argument_group("run config overrides")
    g.add_argument("--config", help="YAML run config (see `slimdenoise init-config`)")
    g.add_argument("--workdir", help="directory holding the stage checkpoints")
    g.add_argument("--seed", type=int)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. backbone.depth=6 (repeatable)")
    defaults = RunConfig()
    for section in sections:
        for f in dataclasses.fields(getattr(defaults, section)):
            flag = f"--{section}-{f.name}".replace("_", "-")
            g.add_argument(flag, dest=f"cfg:{section}.{f.name}", default=None, metavar=f.name.upper())


def _resolve_config(args, stored: dict | None = None) -> RunConfig:
    cfg = RunConfig.from_dict(stored) if stored else RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    for key, value in vars(args).items():
        if key.startswith("cfg:") and value is not None:
            cfg.override(key[4:], value)
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        if k.startswith("backbone.") or k.startswith("bench.widths"):
            v = json.loads(v) if v[:1] in "[{" else v
        cfg.override(k, v)
    if getattr(args, "workdir", None):
        cfg.workdir = args.workdir
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _stored_run(path: Path) -> dict | None:
    if path.exists():
        return data.load_checkpoint(path).meta.get("run")
    return None


def _workdir(args) -> Path:
    if args.workdir:
        return Path(args.workdir)
    if getattr(args, "config", None):
        return Path(load_config(args.config).workdir)
    return Path("run")


# ---------------------------------------------------------------------------
# commands


def cmd_train_supernet(args) -> int:
    cfg = _resolve_config(args)
    work = Path(cfg.workdir)
    work.mkdir(parents=True, exist_ok=True)
    model, stage_log = pipeline.run_supernet(cfg, work / pipeline.SUPERNET_CKPT)
    last = stage_log["epochs"][-1] if stage_log["epochs"] else {}
    print(f"stage 1 done: {work / pipeline.SUPERNET_CKPT}")
    print(f"  noisy PSNR {stage_log['noisy_psnr_val']:.3f} dB; "
          f"largest {last.get('psnr_largest', float('nan')):.3f} dB; "
          f"smallest {last.get('psnr_smallest', float('nan')):.3f} dB")
    return EXIT_OK


def cmd_slim(args) -> int:
    work = _workdir(args)
    src = work / pipeline.SUPERNET_CKPT
    if not src.exists():
        raise FileNotFoundError(f"missing supernet checkpoint: {src}")
    cfg = _resolve_config(args, _stored_run(src))
    model = pipeline.load_model(src)
    model = pipeline.run_slim(cfg, model, work / pipeline.SLIM_CKPT)
    (work / "routing_space.txt").write_text(model.space.to_text())
    print(f"stage 2 done: {len(model.space)} routing-space entries -> {work / pipeline.SLIM_CKPT}")
    for i, e in enumerate(model.space.entries):
        print(f"  {i:3d} {e.flops_per_pixel:10.1f} MACs/px {e.psnr:8.3f} dB  {list(e.config)}")
    return EXIT_OK


def cmd_train_gate(args) -> int:
    work = _workdir(args)
    src = work / pipeline.SLIM_CKPT
    if not src.exists():
        raise FileNotFoundError(f"missing slimmed checkpoint: {src}")
    cfg = _resolve_config(args, _stored_run(src))
    model = pipeline.load_model(src, require=("routing_space",))
    model, hist = pipeline.run_gate(cfg, model, work / pipeline.MODEL_CKPT)
    final = hist["final"]
    print(f"stage 3 done: E={len(model.gate.candidates)} candidates {model.gate.candidates} "
          f"-> {work / pipeline.MODEL_CKPT}")
    print(f"  budget C={hist['budget']:.1f} of T={hist['normalizer']:.1f} FLOPs/pixel; "
          f"expected {final['expected_flops']:.1f}; label accuracy {final['label_accuracy']:.3f}; "
          f"hard-label fraction {hist['label_hard_fraction']:.3f}")
    return EXIT_OK


def _parse_mode(mode: str):
    if mode == "dynamic":
        return "dynamic", None
    kind, _, value = mode.partition("=")
    if kind == "width" and value.isdigit():
        return "width", int(value)
    if kind == "budget":
        try:
            return "budget", float(value)
        except ValueError:
            pass
    raise UsageError(f"--mode must be dynamic, width=K or budget=FLOPS, got {mode!r}")


def cmd_denoise(args) -> int:
    kind, value = _parse_mode(args.mode)
    ckpt = Path(args.checkpoint or _workdir(args) / pipeline.MODEL_CKPT)
    need = ("routing_space", "gate") if kind == "dynamic" and args.force_route is None else ()
    if kind == "budget" or args.force_route is not None:
        need = ("routing_space",)
    model = pipeline.load_model(ckpt, require=need)
    noisy = data.load_pgm(args.input)
    if kind == "dynamic":
        res = G.dynamic_denoise(model.net, model.space, model.gate, noisy, force_route=args.force_route)
        out, route, flops = res.denoised, res.routes[0], res.flops_per_pixel[0]
        label = f"dynamic (routing-space entry {res.route_indices[0]})"
    else:
        spec = model.net.spec
        if kind == "width":
            route = pipeline.uniform_config(spec, value)
        else:
            route = slimming.select_by_budget(model.space, value)
        out = slimnet.forward(model.net, route, noisy)
        flops = slimming.config_flops(spec, route, noisy.shape[2:])
        label = f"static {kind}={value}"
    data.save_pgm(args.output, out)
    print(f"{label}: route {list(route)} {flops:.1f} FLOPs/pixel -> {args.output}")
    return EXIT_OK


def cmd_report(args) -> int:
    ckpt = Path(args.checkpoint or _workdir(args) / pipeline.MODEL_CKPT)
    model = pipeline.load_model(ckpt, require=("routing_space", "gate"))
    cfg = _resolve_config(args, model.ckpt.meta.get("run"))
    if cfg.data.test_count < 1:
        raise ValueError("empty test set")
    _, _, test = pipeline.datasets(cfg)
    report = pipeline.build_report(model, test)
    logs = {k: model.ckpt.meta[k] for k in ("stage1_log", "gate_log") if k in model.ckpt.meta}
    bench = None
    if args.with_bench:
        bench = pipeline.run_bench(model.net, cfg.bench.widths, cfg.bench.repeats, cfg.bench.image_size)
    out = Path(args.out or ckpt.parent / "report")
    paths = pipeline.write_report(report, out, logs, bench, figure=not args.no_figure)
    print(paths["report"].read_text(), end="")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_bench(args) -> int:
    ckpt = Path(args.checkpoint or _workdir(args) / pipeline.SUPERNET_CKPT)
    model = pipeline.load_model(ckpt)
    cfg = _resolve_config(args, model.ckpt.meta.get("run"))
    b = cfg.bench
    res = pipeline.run_bench(model.net, b.widths, b.repeats, b.image_size)
    lines = ["# slimdenoise bench v1", f"# image {b.image_size}x{b.image_size}, {b.repeats} repeats, 1 thread",
             "width\tflops_ratio\tmedian_s\tmad_s\tspeedup"]
    for r in res["rows"]:
        lines.append(f"{r['width']}\t{r['flops_ratio']:.4f}\t{r['median_s']:.6f}\t{r['mad_s']:.6f}\t{r['speedup']:.3f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.tsv").write_text(text)
        if not args.no_figure:
            from .plots import plot_bench
            plot_bench(res, out / "bench.png")
    return EXIT_OK


def cmd_init_config(args) -> int:
    print(TEMPLATE, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slimdenoise", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-supernet", help="stage 1: sandwich-rule super-network training")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train_supernet)

    s = sub.add_parser("slim", help="stage 2: progressive slimming into a routing space")
    _add_config_flags(s)
    s.set_defaults(func=cmd_slim)

    s = sub.add_parser("train-gate", help="stage 3: dynamic gate training")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train_gate)

    s = sub.add_parser("denoise", help="denoise one PGM image")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--checkpoint")
    s.add_argument("--workdir")
    s.add_argument("--mode", default="dynamic", help="dynamic | width=K | budget=FLOPS_PER_PIXEL")
    s.add_argument("--force-route", type=int, default=None, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("report", help="static + dynamic evaluation table and FLOPs/PSNR curve")
    s.add_argument("--checkpoint")
    s.add_argument("--out", help="output directory (default: <checkpoint dir>/report)")
    s.add_argument("--with-bench", action="store_true", help="append wall-clock timings")
    s.add_argument("--no-figure", action="store_true")
    _add_config_flags(s, ("data", "bench"))
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("bench", help="single-threaded latency per width")
    s.add_argument("--checkpoint")
    s.add_argument("--out", help="directory for bench.tsv / bench.png")
    s.add_argument("--no-figure", action="store_true")
    _add_config_flags(s, ("bench",))
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("init-config", help="print a commented default config")
    s.set_defaults(func=cmd_init_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    np.seterr(over="ignore", invalid="ignore")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"slimdenoise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, TypeError) as exc:
        print(f"slimdenoise: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"slimdenoise: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, data.CheckpointError, data.PGMError, pipeline.PipelineError, ValueError) as exc:
        print(f"slimdenoise: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
