"""Command line entry point for the trait regression pipeline.

One binary covers the whole workflow: generating the synthetic dataset,
training a model, scoring a checkpoint, running the architecture
ablation, visualizing learned sampling offsets, and converting a
checkpoint between rigid and deformable convolutions.

Configuration precedence, highest first: command line flags, then the
TOML file named by --config, then built-in defaults. The TOML schema
mirrors the training configuration (top-level keys plus [model] and
[augment] tables) with an extra [split] table for the train/val/test
cut. The environment variable TRAITREG_DATA supplies the data directory
when --data is omitted.

Exit codes: 0 on success; 2 for a bad invocation (unknown flags, missing
paths, invalid configuration); 1 for failures while running (corrupt
data, training divergence). Both failure paths print a single JSON line
to stderr with "error" and "message" fields.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .checkpoint import load_model, save_model
from .data import (
    DEFAULT_CROP,
    TRAIT_NAMES,
    ChannelStats,
    Sample,
    SplitSpec,
    TraitVector,
    load_dataset,
    normalize_sample,
    prepare_dataset,
    read_depth_png,
    read_rgb_png,
    split_samples,
)
from .errors import ConfigError, DataError, TraitRegError
from .metrics import evaluate_model
from .models import CONV_KINDS
from .offsets import (
    DEFAULT_MAX_KERNEL_POINTS,
    DEFAULT_THRESHOLD_PX,
    extract_offsets,
    filter_strong,
    render_overlay,
)
from .synthetic import generate_synthetic
from .train import TrainConfig, run_ablation, run_training

DATA_ENV_VAR = "TRAITREG_DATA"

_EPILOG = (
    "Defaults worth knowing: learning rate 5e-4 (Adam, never scheduled), "
    f"strong-offset threshold {DEFAULT_THRESHOLD_PX:g} px, crop window "
    f"{DEFAULT_CROP} (top, bottom, left, right), which turns a 1080x1920 "
    "capture into 700x800. Flags override --config values, which override "
    f"defaults. {DATA_ENV_VAR} supplies --data when omitted."
)


class UsageError(Exception):
    """Bad invocation: exits with code 2 instead of 1."""


def _emit_error(e: Exception) -> None:
    doc = {"error": type(e).__name__, "message": str(e)}
    print(json.dumps(doc), file=sys.stderr)


def _print_json(doc: dict) -> None:
    print(json.dumps(doc, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# shared argument plumbing


def _require_dir(path: Optional[str], what: str) -> Path:
    if path is None:
        raise UsageError(
            f"no {what} directory given; pass --data or set {DATA_ENV_VAR}"
        )
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory {p} does not exist")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _parse_crop(text: Optional[str]) -> Optional[tuple]:
    if text is None:
        return None
    if text == "default":
        return DEFAULT_CROP
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(
            f"--crop wants TOP,BOTTOM,LEFT,RIGHT or 'default', got {text!r}"
        )
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--crop values must be integers, got {text!r}") from None


def _parse_name_list(text: str, what: str) -> List[str]:
    names = [p.strip() for p in text.split(",") if p.strip()]
    if not names:
        raise UsageError(f"empty {what} list {text!r}")
    return names


def _load_toml(path: str) -> dict:
    import tomli

    p = _require_file(path, "config file")
    try:
        with open(p, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as e:
        raise UsageError(f"config file {p} is not valid TOML: {e}") from None


def _train_config_from_args(args) -> Tuple[TrainConfig, SplitSpec]:
    """Merge --config with flag overrides into (TrainConfig, SplitSpec)."""
    doc = _load_toml(args.config) if args.config else {}
    split_doc = doc.pop("split", {})
    model_doc = dict(doc.get("model", {}))

    for flag, key in (
        ("lr", "lr"),
        ("batch_size", "batch_size"),
        ("max_epochs", "max_epochs"),
        ("patience", "patience"),
        ("sampler", "sampler"),
        ("seed", "seed"),
        ("clip_grad_norm", "clip_grad_norm"),
        ("eval_batch_size", "eval_batch_size"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    if getattr(args, "no_augment", False):
        doc["augment"] = None

    for flag, key in (("conv", "conv_kind"), ("fusion", "fusion"), ("encoder", "encoder")):
        value = getattr(args, flag, None)
        if value is not None:
            model_doc[key] = value
    if getattr(args, "inputs", None) is not None:
        model_doc["inputs"] = _parse_name_list(args.inputs, "input")
    if getattr(args, "outputs", None) is not None:
        model_doc["outputs"] = _parse_name_list(args.outputs, "output")
    if model_doc:
        doc["model"] = model_doc

    if getattr(args, "test_count", None) is not None:
        split_doc["test_count"] = args.test_count
    if getattr(args, "train_fraction", None) is not None:
        split_doc["train_fraction"] = args.train_fraction
    if getattr(args, "seed", None) is not None and "seed" not in split_doc:
        split_doc["seed"] = args.seed

    try:
        cfg = TrainConfig.from_dict(doc)
        spec = SplitSpec.from_dict(split_doc)
    except (ConfigError, DataError, TypeError) as e:
        raise UsageError(f"invalid configuration: {e}") from None
    return cfg, spec


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="TOML file mirroring the training config schema")
    sub.add_argument("--lr", type=float, help="Adam learning rate (default 5e-4, held constant)")
    sub.add_argument("--batch-size", dest="batch_size", type=int, help="training batch size (default 16)")
    sub.add_argument("--max-epochs", dest="max_epochs", type=int, help="epoch budget (default 300)")
    sub.add_argument("--patience", type=int, help="early-stop patience in epochs, 0 disables (default 30)")
    sub.add_argument("--sampler", choices=["random", "balanced_fresh_weight", "variety_stratified"], help="training sampler (default random)")
    sub.add_argument("--clip-grad-norm", dest="clip_grad_norm", type=float, help="global gradient norm cap (default off)")
    sub.add_argument("--eval-batch-size", dest="eval_batch_size", type=int, help="evaluation batch size (default 64)")
    sub.add_argument("--no-augment", dest="no_augment", action="store_true", help="disable training augmentation")
    sub.add_argument("--fusion", choices=["mid", "early"], help="sensor fusion point (default mid)")
    sub.add_argument("--encoder", choices=["tiny", "small", "base"], help="encoder width preset (default small)")
    sub.add_argument("--inputs", help="comma list from {rgb, depth} (default both)")
    sub.add_argument("--outputs", help=f"comma list from {{{', '.join(TRAIT_NAMES)}}} (default all)")
    sub.add_argument("--seed", type=int, help="run seed for init, sampling and augmentation (default 0)")
    sub.add_argument("--test-count", dest="test_count", type=int, help="samples held out as the test split (default 0)")
    sub.add_argument("--train-fraction", dest="train_fraction", type=float, help="train share of the non-test samples (default 0.75)")
    sub.add_argument("--crop", help="crop window TOP,BOTTOM,LEFT,RIGHT, or 'default' for "
                     f"{DEFAULT_CROP} (700x800 from 1080x1920); images are uncropped when omitted")
    sub.add_argument("--data", default=os.environ.get(DATA_ENV_VAR), help=f"dataset directory (default ${DATA_ENV_VAR})")


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_gen_synthetic(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be positive, got {args.count}")
    if args.size < 16:
        raise UsageError(f"--size must be at least 16 pixels, got {args.size}")
    out = Path(args.out)
    records = generate_synthetic(out, args.count, seed=args.seed, height=args.size, width=args.size)
    _print_json({
        "out": str(out),
        "samples": len(records),
        "size": [args.size, args.size],
        "seed": args.seed,
    })
    return 0


def _plot_curves(history: List[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [h["train_loss"] for h in history], label="train loss")
    val = [(h["epoch"], h["val_nmse"]) for h in history if h["val_nmse"] is not None]
    if val:
        ax.plot([e for e, _ in val], [v for _, v in val], label="val NMSE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("NMSE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _cmd_train(args) -> int:
    cfg, spec = _train_config_from_args(args)
    data_dir = _require_dir(args.data, "data")
    out = Path(args.out)
    samples = load_dataset(data_dir, crop=_parse_crop(args.crop))
    dataset = prepare_dataset(samples, spec)
    record, _ = run_training(dataset, cfg, out_dir=out)
    if record.history:
        _plot_curves(record.history, out / "loss_curve.png")
    _print_json({
        "out": str(out),
        "epochs_run": len(record.history),
        "best_epoch": record.best_epoch,
        "best_val_nmse": record.best_val_nmse,
        "test_nmse": record.test_report["nmse"] if record.test_report else None,
        "checkpoint": record.checkpoint_path,
    })
    return 0


def _cmd_eval(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    data_dir = _require_dir(args.data, "data")
    model, meta = load_model(ckpt)
    if "stats" not in meta:
        raise DataError(
            f"checkpoint {ckpt} carries no normalization stats; cannot score fairly"
        )
    stats = ChannelStats.from_dict(meta["stats"])
    samples = load_dataset(data_dir, crop=_parse_crop(args.crop))
    if args.split == "all":
        chosen = list(samples)
    else:
        if "split" not in meta:
            raise UsageError(
                f"checkpoint {ckpt} records no split; only --split all is possible"
            )
        spec = SplitSpec.from_dict(meta["split"])
        tr, va, te = split_samples(samples, spec)
        chosen = [samples[i] for i in {"train": tr, "val": va, "test": te}[args.split]]
    if not chosen:
        raise DataError(f"the {args.split} split is empty for this checkpoint")
    normalized = [normalize_sample(s, stats) for s in chosen]
    report = evaluate_model(model, normalized, batch_size=args.batch_size)
    doc = dict(report.to_dict(), split=args.split, checkpoint=str(ckpt))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(doc, indent=1, sort_keys=True))
        doc["report"] = str(out)
    _print_json(doc)
    return 0


def _cmd_ablate(args) -> int:
    kinds = list(CONV_KINDS) if args.conv == "both" else [args.conv]
    # the sweep applies the kind per run; "both" is not a model config
    args.conv = None
    cfg, spec = _train_config_from_args(args)
    data_dir = _require_dir(args.data, "data")
    out = Path(args.out)
    samples = load_dataset(data_dir, crop=_parse_crop(args.crop))
    dataset = prepare_dataset(samples, spec)
    result = run_ablation(dataset, kinds, cfg, out_dir=out)
    _print_json({
        "out": str(out),
        "conv_kinds": kinds,
        "rows": len(result["rows"]),
        "runs": len(result["runs"]),
        "eval_split": result["eval_split"],
        "errors": result["errors"],
        "summary_csv": str(out / "summary.csv"),
        "summary_md": str(out / "summary.md"),
        "figure": str(out / "nmse_by_architecture.png"),
    })
    return 0


def _load_probe_sample(args, model, meta) -> Tuple[Sample, np.ndarray]:
    """Build the (normalized sample, display image) pair for offset probing."""
    rgb = read_rgb_png(_require_file(args.image, "image"))
    crop = _parse_crop(args.crop)
    if crop is not None:
        from .data import crop_image

        rgb = np.stack([crop_image(c, crop) for c in rgb])
    if args.depth:
        depth = read_depth_png(_require_file(args.depth, "depth image"))
        if crop is not None:
            depth = np.stack([crop_image(c, crop) for c in depth])
    else:
        if "depth" in model.config.inputs:
            raise UsageError("this model consumes depth; pass --depth as well")
        depth = np.zeros((1,) + rgb.shape[1:])
    if depth.shape[1:] != rgb.shape[1:]:
        raise DataError(
            f"rgb is {rgb.shape[1:]} but depth is {depth.shape[1:]}; "
            "the two images must align pixel for pixel"
        )
    display = rgb.copy()
    sample = Sample(
        rgb=rgb,
        depth=depth,
        traits=TraitVector(0.0, 0.0, 0.0, 0.0, 0.0),
        source_id=Path(args.image).stem,
        variety="unknown",
    )
    if "stats" in meta:
        sample = normalize_sample(sample, ChannelStats.from_dict(meta["stats"]))
    return sample, display


def _cmd_viz_offsets(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    model, meta = load_model(ckpt)
    sample, display = _load_probe_sample(args, model, meta)
    field = extract_offsets(model, sample)
    strong = filter_strong(field, threshold=args.threshold)
    kernel_points = None
    if args.kernel_points:
        try:
            kernel_points = [int(p) for p in args.kernel_points.split(",")]
        except ValueError:
            raise UsageError(
                f"--kernel-points wants comma-separated integers, got {args.kernel_points!r}"
            ) from None
    out = Path(args.out)
    figure = render_overlay(
        display,
        strong,
        out,
        kernel_points=kernel_points,
        max_kernel_points=args.max_kernel_points,
    )
    sidecar = out.with_suffix(".json")
    sidecar.write_text(json.dumps(strong.to_dict(), indent=1, sort_keys=True))
    _print_json({
        "figure": str(figure),
        "offsets_json": str(sidecar),
        "layer": strong.layer_path,
        "threshold": strong.threshold,
        "strong_count": len(strong),
    })
    return 0


def _cmd_convert_checkpoint(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    model, meta = load_model(ckpt, conv_kind=args.to)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model, meta)  # meta["model"] is refreshed from the live config
    _print_json({"out": str(out), "conv_kind": args.to})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="traitreg",
        description="Plant trait regression from RGB and depth images, "
        "with rigid or deformable convolutions.",
        epilog=_EPILOG,
    )
    parser.add_argument("--version", action="version", version=f"traitreg {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser(
        "gen-synthetic",
        help="render a synthetic labeled dataset",
        description="Render top-down plant images with depth and derived "
        "trait labels, plus a manifest, under --out.",
        epilog=_EPILOG,
    )
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--count", type=int, default=400, help="number of samples (default 400)")
    g.add_argument("--size", type=int, default=64, help="square image side in px (default 64)")
    g.add_argument("--seed", type=int, default=0, help="generation seed (default 0)")
    g.set_defaults(func=_cmd_gen_synthetic)

    t = subs.add_parser(
        "train",
        help="train one model and write its run directory",
        description="Train one configuration and write metrics.csv, "
        "log.jsonl, loss_curve.png, best.ckpt and report.json under --out.",
        epilog=_EPILOG,
    )
    _add_train_flags(t)
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--conv", choices=list(CONV_KINDS), help="convolution kind (default standard)")
    t.set_defaults(func=_cmd_train)

    e = subs.add_parser(
        "eval",
        help="score a checkpoint on one dataset split",
        description="Rebuild the model from a checkpoint, normalize with "
        "the stored stats, score the requested split, print a JSON report.",
        epilog=_EPILOG,
    )
    e.add_argument("--checkpoint", required=True, help="model checkpoint path")
    e.add_argument("--data", default=os.environ.get(DATA_ENV_VAR), help=f"dataset directory (default ${DATA_ENV_VAR})")
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test", help="split to score (default test)")
    e.add_argument("--batch-size", dest="batch_size", type=int, default=64, help="evaluation batch size (default 64)")
    e.add_argument("--crop", help=f"crop window TOP,BOTTOM,LEFT,RIGHT or 'default' for {DEFAULT_CROP}")
    e.add_argument("--out", help="also write the JSON report to this path")
    e.set_defaults(func=_cmd_eval)

    a = subs.add_parser(
        "ablate",
        help="train the full architecture grid and summarize",
        description="Train every input/output architecture for the chosen "
        "convolution kinds (18 runs per kind) and write summary.csv, "
        "summary.md and a bar figure under --out.",
        epilog=_EPILOG,
    )
    _add_train_flags(a)
    a.add_argument("--out", required=True, help="ablation output directory")
    a.add_argument("--conv", choices=list(CONV_KINDS) + ["both"], default="both", help="convolution kinds to sweep (default both)")
    a.set_defaults(func=_cmd_ablate)

    v = subs.add_parser(
        "viz-offsets",
        help="overlay strong sampling offsets on an image",
        description="Probe the first deformable layer on one image, keep "
        f"offsets with magnitude >= threshold (default {DEFAULT_THRESHOLD_PX:g} px, "
        "inclusive), and save an overlay figure plus a JSON sidecar.",
        epilog=_EPILOG,
    )
    v.add_argument("--checkpoint", required=True, help="deformable model checkpoint")
    v.add_argument("--image", required=True, help="RGB PNG to probe")
    v.add_argument("--depth", help="matching 16-bit depth PNG (required by depth models)")
    v.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD_PX,
                   help=f"magnitude cutoff in px, inclusive (default {DEFAULT_THRESHOLD_PX:g})")
    v.add_argument("--kernel-points", dest="kernel_points",
                   help="comma list of kernel point indices (default: the 4 kernel corners)")
    v.add_argument("--max-kernel-points", dest="max_kernel_points", type=int,
                   default=DEFAULT_MAX_KERNEL_POINTS,
                   help=f"most kernel points drawn at once (default {DEFAULT_MAX_KERNEL_POINTS})")
    v.add_argument("--crop", help=f"crop window TOP,BOTTOM,LEFT,RIGHT or 'default' for {DEFAULT_CROP}")
    v.add_argument("--out", required=True, help="output PNG path")
    v.set_defaults(func=_cmd_viz_offsets)

    c = subs.add_parser(
        "convert-checkpoint",
        help="rewrite a checkpoint with the other convolution kind",
        description="Load a checkpoint, rebuild the model with the "
        "requested convolution kind (deformable conversions start their "
        "offset branches at zero), and save the result.",
        epilog=_EPILOG,
    )
    c.add_argument("--checkpoint", required=True, help="source checkpoint")
    c.add_argument("--to", required=True, choices=list(CONV_KINDS), help="target convolution kind")
    c.add_argument("--out", required=True, help="destination checkpoint path")
    c.set_defaults(func=_cmd_convert_checkpoint)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        _emit_error(e)
        return 2
    except ConfigError as e:
        _emit_error(e)
        return 2
    except TraitRegError as e:
        _emit_error(e)
        return 1
    except Exception as e:  # noqa: BLE001 - the contract is JSON on stderr
        _emit_error(e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
