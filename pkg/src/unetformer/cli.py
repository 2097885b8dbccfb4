"""Command-line interface.

Five subcommands share one binary:

    train    full training loop from a JSON run file
    eval     score a checkpoint over a dataset, write metrics and figures
    infer    segment one PPM image into a PGM class-id mask
    bench    forward-pass timing and peak-memory report (JSON)
    inspect  per-layer parameter and MAC table for a configuration

Exit codes: 0 success, 1 usage or configuration error, 2 data or
checkpoint error, 3 numeric failure (non-finite values). The
UNETFORMER_THREADS environment variable caps worker parallelism; this
implementation computes serially, so any positive value is accepted and
the effective level is min(UNETFORMER_THREADS, 1).
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, network, reporting, rng, tensor, trainer
from .checkpoint import load_model
from .config import RunConfig, load_run_config
from .errors import (CheckpointError, ConfigError, DataError, NumericError,
                     ShapeError, UsageError)
from .network import ModelConfig, UNetFormer, estimate_macs_table, params_table
from .tensor import Tensor


class _Parser(argparse.ArgumentParser):
    """argparse, but bad usage raises instead of exiting with code 2."""

    def error(self, message: str):
        raise UsageError(message)


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            h = w = int(parts[0])
        elif len(parts) == 2:
            h, w = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise UsageError(f"--size expects N or HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"--size must be positive, got {text!r}")
    return h, w


def _tile_from_size(size: str | None) -> int | None:
    if size is None:
        return None
    h, w = _parse_size(size)
    if h != w:
        raise UsageError(f"tiles are square; --size {size!r} has two extents")
    return h


def _parse_classes(text: str | None) -> list | None:
    if text is None:
        return None
    items: list = []
    for raw in text.split(","):
        raw = raw.strip()
        if not raw:
            continue
        items.append(int(raw) if raw.lstrip("-").isdigit() else raw)
    if not items:
        raise UsageError("--classes given but empty")
    return items


def threads_from_env() -> int:
    raw = os.environ.get("UNETFORMER_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"UNETFORMER_THREADS must be an integer, "
                          f"got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"UNETFORMER_THREADS must be >= 1, got {threads}")
    return threads


def _load_config(args, required: bool = True) -> RunConfig | None:
    if getattr(args, "config", None) is None:
        if required:
            raise UsageError(f"{args.command} requires --config")
        return None
    return load_run_config(args.config)


def _model_config(args) -> ModelConfig:
    """Model description for checkpoint-less commands (bench, inspect)."""
    cfg = _load_config(args, required=False)
    if cfg is not None:
        if args.preset is not None:
            raise UsageError("pass either --config or --preset, not both")
        return cfg.model
    preset = args.preset or getattr(args, "preset_default", "full")
    if preset == "full":
        return ModelConfig.full()
    return ModelConfig.tiny()


def _emit(args, payload: dict, human: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(human)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed).validate()
    summary = trainer.train(cfg, out_dir=args.out, resume=args.resume,
                            encoder_weights=args.encoder_weights)
    _emit(args, summary,
          f"trained {summary['steps']} steps over {summary['epochs']} epochs\n"
          f"best train mIoU {summary['best_train_miou']:.4f}, final "
          f"{summary['final_train_miou']:.4f} (OA {summary['final_train_oa']:.4f})\n"
          f"outputs in {summary['out_dir']}")
    return 0


def _finite_or_none(scores: dict[str, float]) -> dict:
    return {k: (v if np.isfinite(v) else None) if isinstance(v, float) else v
            for k, v in scores.items()}


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint, partial=args.partial)
    model.eval()
    if args.data is not None:
        dataset = data.DiskDataset(args.data)
    else:
        cfg = _load_config(args, required=False)
        if cfg is None:
            raise UsageError("eval needs --data DIR or --config RUN.json")
        dataset = trainer.make_dataset(cfg)
    include = _parse_classes(args.classes)
    scores, matrix = trainer.evaluate(model, dataset,
                                      tile=_tile_from_size(args.size),
                                      tta=args.tta, include=include)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = _finite_or_none(scores)
    reporting.write_metrics_json(payload, out_dir / "metrics.json")
    reporting.write_metrics_csv(scores, out_dir / "metrics.csv")
    reporting.write_confusion_csv(matrix, out_dir / "confusion.csv")
    reporting.confusion_figure(matrix, out_dir / "confusion_matrix.png")
    reporting.class_scores_figure(scores, matrix.class_names,
                                  out_dir / "class_scores.png")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    model, _ = load_model(args.checkpoint, partial=args.partial)
    model.eval()
    image = data.load_image(args.image)
    logits = trainer.predict_logits(model, image,
                                    tile=_tile_from_size(args.size),
                                    tta=args.tta)
    mask = logits.argmax(axis=0).astype(np.uint8)
    data.save_mask(args.output, mask)
    color_path = None
    if args.color is not None:
        data.write_ppm(args.color, data.palette_image(mask))
        color_path = str(args.color)
    present = [int(c) for c in np.unique(mask)]
    _emit(args, {"output_mask": str(args.output), "color_image": color_path,
                 "height": mask.shape[0], "width": mask.shape[1],
                 "classes_present": present},
          f"wrote {args.output} ({mask.shape[0]}x{mask.shape[1]}, "
          f"classes present: {present})"
          + (f"\nwrote {color_path}" if color_path else ""))
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint is not None:
        model, _ = load_model(args.checkpoint)
        cfg = model.cfg
    else:
        cfg = _model_config(args)
        model = network.build_model(cfg, args.seed or 0)
    h, w = _parse_size(args.size)
    if h % 32 or w % 32:
        raise UsageError(f"bench size must be a multiple of 32, got {h}x{w}")
    if args.iters < 1 or args.warmup < 0:
        raise UsageError("bench needs --iters >= 1 and --warmup >= 0")
    g = rng.stream(args.seed or 0, "bench")
    x = Tensor(g.random((1, cfg.input_channels, h, w), dtype=np.float32))
    model.eval()

    def forward() -> None:
        with tensor.no_grad():
            model(x)

    for _ in range(args.warmup):
        forward()
    tensor.memory_tracker.start()
    times_ms = []
    try:
        for _ in range(args.iters):
            t0 = time.perf_counter()
            forward()
            times_ms.append((time.perf_counter() - t0) * 1e3)
    finally:
        peak = tensor.memory_tracker.stop()
    mean_ms = statistics.fmean(times_ms)
    report = {
        "mean_ms": mean_ms,
        "stddev_ms": statistics.pstdev(times_ms),
        "images_per_sec": 1e3 / mean_ms,
        "iters": args.iters,
        "warmup": args.warmup,
        "height": h,
        "width": w,
        "peak_tensor_bytes": peak,
        "threads": min(threads_from_env(), 1),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    cfg = _model_config(args)
    h, w = _parse_size(args.size)
    macs = estimate_macs_table(cfg, (h, w))
    params = params_table(UNetFormer(cfg))
    rows = list(params)
    total_params = network.count_params(cfg)
    total_macs = sum(macs.values())
    if sum(params.values()) != total_params:
        raise ConfigError("parameter table rows do not sum to the total")
    if args.json:
        print(json.dumps({
            "input": [h, w],
            "layers": {name: {"params": params[name],
                              "macs": macs.get(name, 0)} for name in rows},
            "total_params": total_params,
            "total_macs": total_macs,
            "gmacs": network.estimate_macs(cfg, h, w),
        }, indent=2, sort_keys=True))
        return 0
    name_w = max(len(n) for n in rows + ["component", "total"])
    print(f"{'component':<{name_w}}  {'params':>12}  {'macs':>16}")
    for name in rows:
        print(f"{name:<{name_w}}  {params[name]:>12,}  {macs.get(name, 0):>16,}")
    print(f"{'total':<{name_w}}  {total_params:>12,}  {total_macs:>16,}")
    print(f"\n{total_params / 1e6:.2f}M parameters, "
          f"{total_macs / 1e9:.2f} GMACs at {h}x{w} "
          f"(auxiliary head excluded from inference MACs)")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="unetformer",
                     description="Efficient window-transformer segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: _Parser) -> None:
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--tta", action="store_true",
                       help="average logits over the four flips")
        p.add_argument("--size", help="size as N or HxW (tile size for "
                                      "eval/infer, input size for bench/inspect)")
        p.add_argument("--json", action="store_true",
                       help="machine-readable output")
        p.add_argument("--partial", action="store_true",
                       help="tolerate incomplete checkpoints")

    p = sub.add_parser("train", help="train a model from a run config")
    common(p)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--encoder-weights",
                   help="initialize the encoder from another checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint over a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (images/, masks/, "
                                  "dataset.json)")
    p.add_argument("--out", help="report directory (default: <ckpt dir>/eval)")
    p.add_argument("--classes", help="comma-separated class names or indices "
                                     "to include in mean scores")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one PPM image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image", help="input PPM (P6) image")
    p.add_argument("output", help="output PGM (P5) class-id mask")
    p.add_argument("--color", help="also write a palette PPM here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="time forward passes")
    common(p)
    p.add_argument("--checkpoint", help="time this checkpoint's model")
    p.add_argument("--preset", choices=("full", "tiny"),
                   help="model preset when no config/checkpoint is given")
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.set_defaults(func=cmd_bench, size_default="256")
    p.set_defaults(preset_default="tiny")

    p = sub.add_parser("inspect", help="per-layer parameter and MAC table")
    common(p)
    p.add_argument("--preset", choices=("full", "tiny"),
                   help="model preset when no config is given (default full)")
    p.set_defaults(func=cmd_inspect, size_default="512")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads_from_env()
        if getattr(args, "size", None) is None:
            args.size = getattr(args, "size_default", None)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except ShapeError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
