"""Training harness: deterministic runs, early stopping, checkpointing,
and the 36-run ablation driver with its summary table.

Optimization follows a fixed protocol: Adam at a constant learning rate
(default 5e-4, never scheduled), batch-local NMSE loss, early stopping on
whole-split validation NMSE. Every random choice flows from the run seed,
so a rerun reproduces the loss curve bit for bit. Wall-clock timings are
kept out of the deterministic artifacts; they live in the ``log.jsonl``
sidecar only.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor
from .checkpoint import save_model
from .data import (
    TRAIT_NAMES,
    AugmentConfig,
    SplitDataset,
    augment_sample,
    make_batch,
    make_sampler,
)
from .errors import ConfigError, TrainingDiverged
from .metrics import EvalReport, evaluate_model, nmse_loss
from .models import ModelConfig, build_model, enumerate_ablation
from .optim import Adam

ARCH_ROWS = ("MIMO", "MISO", "SIMO-RGB", "SIMO-D", "SISO-RGB", "SISO-D")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 5e-4
    batch_size: int = 16
    max_epochs: int = 300
    patience: int = 30
    sampler: str = "random"
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    clip_grad_norm: Optional[float] = None
    seed: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be non-negative, got {self.max_epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be non-negative, got {self.patience}")
        if self.max_epochs > 0 and self.patience > self.max_epochs:
            raise ConfigError(
                f"patience {self.patience} exceeds max_epochs {self.max_epochs}"
            )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "sampler": self.sampler,
            "augment": self.augment.to_dict() if self.augment else None,
            "clip_grad_norm": self.clip_grad_norm,
            "seed": self.seed,
            "eval_batch_size": self.eval_batch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls().to_dict())
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        kwargs = dict(d)
        if "model" in kwargs:
            kwargs["model"] = ModelConfig.from_dict(kwargs["model"])
        if kwargs.get("augment") is not None:
            kwargs["augment"] = AugmentConfig.from_dict(kwargs["augment"])
        return cls(**kwargs)


@dataclass
class RunRecord:
    config: dict
    history: List[dict]
    best_epoch: int
    best_val_nmse: Optional[float]
    checkpoint_path: Optional[str]
    val_report: Optional[dict]
    test_report: Optional[dict]
    epoch_seconds: List[float]

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "config": self.config,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "best_val_nmse": self.best_val_nmse,
            "checkpoint_path": self.checkpoint_path,
            "val_report": self.val_report,
            "test_report": self.test_report,
        }
        if include_timing:
            out["epoch_seconds"] = self.epoch_seconds
        return out


def _clip_gradients(params, max_norm: float) -> None:
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    total = np.sqrt(total)
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale


class _RunLog:
    """metrics.csv (deterministic) plus log.jsonl (timestamps allowed)."""

    def __init__(self, out_dir: Optional[Path]):
        self.out_dir = Path(out_dir) if out_dir else None
        self.csv_file = None
        self.jsonl_file = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.csv_file = open(self.out_dir / "metrics.csv", "w", newline="")
            self.csv_writer = csv.writer(self.csv_file)
            self.csv_writer.writerow(["epoch", "train_loss", "val_nmse"])
            self.jsonl_file = open(self.out_dir / "log.jsonl", "w")

    def epoch(self, record: dict, seconds: float) -> None:
        if self.csv_file:
            self.csv_writer.writerow(
                [record["epoch"], repr(record["train_loss"]), repr(record["val_nmse"])]
            )
            self.csv_file.flush()
        if self.jsonl_file:
            doc = dict(record, seconds=seconds, time=time.time(), event="epoch")
            self.jsonl_file.write(json.dumps(doc) + "\n")
            self.jsonl_file.flush()

    def event(self, kind: str, **fields) -> None:
        if self.jsonl_file:
            doc = dict(fields, time=time.time(), event=kind)
            self.jsonl_file.write(json.dumps(doc) + "\n")
            self.jsonl_file.flush()

    def close(self) -> None:
        if self.csv_file:
            self.csv_file.close()
        if self.jsonl_file:
            self.jsonl_file.close()


def _snapshot_state(model) -> Dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.state_arrays().items()}


def _restore_state(model, snapshot: Dict[str, np.ndarray]) -> None:
    for name, arr in model.state_arrays().items():
        arr[:] = snapshot[name]


def train_model(
    model,
    dataset: SplitDataset,
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    checkpoint_meta: Optional[dict] = None,
) -> RunRecord:
    """Run the optimization protocol and return the full run record.

    The model is left holding the best-validation parameters. The test
    split is consulted exactly once, after that selection. With
    ``max_epochs`` 0 the record holds only the untrained evaluation.
    """
    rng = np.random.default_rng(cfg.seed)
    sampler = make_sampler(cfg.sampler, dataset.train, rng)
    opt = Adam(model.parameters(), lr=cfg.lr)
    names = model.config.outputs
    log = _RunLog(out_dir)
    if log.out_dir:
        (log.out_dir / "config.json").write_text(
            json.dumps(cfg.to_dict(), indent=1, sort_keys=True)
        )

    history: List[dict] = []
    seconds: List[float] = []
    best_val = np.inf
    best_epoch = -1
    best_state = _snapshot_state(model)
    epochs_since_best = 0
    try:
        for epoch in range(cfg.max_epochs):
            t0 = time.perf_counter()
            model.train()
            order = sampler.epoch_indices()
            batch_losses = []
            for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [dataset.train[i] for i in order[start : start + cfg.batch_size]]
                if cfg.augment is not None:
                    batch = [augment_sample(s, cfg.augment, rng) for s in batch]
                rgb, depth, gt = make_batch(batch, names)
                opt.zero_grad()
                pred = model(Tensor(rgb), Tensor(depth))
                loss = nmse_loss(pred, gt)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite training loss {value!r} at epoch {epoch}, batch {bi}"
                    )
                loss.backward()
                if cfg.clip_grad_norm is not None:
                    _clip_gradients(opt.params, cfg.clip_grad_norm)
                opt.step()
                batch_losses.append(value)
            train_loss = float(np.mean(batch_losses))

            val_nmse = None
            if dataset.val:
                val_nmse = evaluate_model(
                    model, dataset.val, batch_size=cfg.eval_batch_size
                ).nmse
            dt = time.perf_counter() - t0
            record = {"epoch": epoch, "train_loss": train_loss, "val_nmse": val_nmse}
            history.append(record)
            seconds.append(dt)
            log.epoch(record, dt)

            tracked = val_nmse if val_nmse is not None else train_loss
            if tracked < best_val:
                best_val = tracked
                best_epoch = epoch
                best_state = _snapshot_state(model)
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if cfg.patience > 0 and epochs_since_best >= cfg.patience:
                    log.event("early_stop", epoch=epoch, best_epoch=best_epoch)
                    break

        assert opt.lr == cfg.lr  # the protocol forbids scheduling
        _restore_state(model, best_state)

        val_report = (
            evaluate_model(model, dataset.val, batch_size=cfg.eval_batch_size).to_dict()
            if dataset.val
            else None
        )
        test_samples = dataset.test  # single read per run, by contract
        test_report = (
            evaluate_model(model, test_samples, batch_size=cfg.eval_batch_size).to_dict()
            if test_samples
            else None
        )

        ckpt_path = None
        if log.out_dir:
            ckpt_path = str(log.out_dir / "best.ckpt")
            meta = dict(checkpoint_meta or {})
            meta.update(
                {
                    "stats": dataset.stats.to_dict(),
                    "split": dataset.spec.to_dict(),
                    "train_config": cfg.to_dict(),
                    "best_epoch": best_epoch,
                    "best_val_nmse": None if not np.isfinite(best_val) else best_val,
                }
            )
            save_model(ckpt_path, model, meta)

        record = RunRecord(
            config=cfg.to_dict(),
            history=history,
            best_epoch=best_epoch,
            best_val_nmse=None if not np.isfinite(best_val) else float(best_val),
            checkpoint_path=ckpt_path,
            val_report=val_report,
            test_report=test_report,
            epoch_seconds=seconds,
        )
        if log.out_dir:
            # The written report stays byte-identical across reruns into
            # different directories, so the checkpoint path inside it is
            # relative to the report's own location.
            doc = record.to_dict()
            if doc["checkpoint_path"] is not None:
                doc["checkpoint_path"] = Path(doc["checkpoint_path"]).name
            (log.out_dir / "report.json").write_text(
                json.dumps(doc, indent=1, sort_keys=True)
            )
        return record
    finally:
        log.close()


def run_training(
    dataset: SplitDataset, cfg: TrainConfig, out_dir: Optional[Path] = None
) -> Tuple[RunRecord, object]:
    """Build the configured model, train it, return (record, model)."""
    model = build_model(cfg.model)
    record = train_model(model, dataset, cfg, out_dir=out_dir)
    return record, model


# ---------------------------------------------------------------------------
# ablation driver


def arch_label(config: ModelConfig) -> str:
    """Table row this config belongs to."""
    fam = config.family
    if fam == "MIMO":
        return "MIMO"
    if fam == "MISO":
        return "MISO"
    suffix = "RGB" if config.inputs == ("rgb",) else "D"
    return f"{fam}-{suffix}"


def run_label(config: ModelConfig) -> str:
    parts = [config.conv_kind, config.family.lower()]
    if len(config.inputs) == 1:
        parts.append(config.inputs[0])
    if len(config.outputs) == 1:
        parts.append(config.outputs[0])
    return "_".join(parts)


def _merge_row(reports: List[EvalReport]) -> dict:
    """Combine per-run reports into one table row.

    Single-output runs contribute their own trait columns; the row NMSE
    is the sum of the runs' NMSE values, which by trait additivity equals
    the multi-trait NMSE over the same predictions.
    """
    mse: Dict[str, float] = {}
    total_nmse = 0.0
    for rep in reports:
        for trait, value in rep.mse.items():
            mse[trait] = value
        total_nmse += rep.nmse
    return {"mse": mse, "nmse": total_nmse}


def run_ablation(
    dataset: SplitDataset,
    conv_kinds: Sequence[str],
    base: TrainConfig,
    out_dir: Optional[Path] = None,
) -> dict:
    """Train the full architecture grid and emit the summary table.

    Rows aggregate by architecture family; the per-trait MSE columns come
    from whichever run predicts that trait, and NMSE sums over a row's
    runs. Rows are scored on the test split when one exists, otherwise on
    validation. Individual run failures leave their cells empty and are
    reported, not fatal.
    """
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    runs: Dict[str, dict] = {}
    errors: Dict[str, str] = {}
    reports: Dict[Tuple[str, str], List[EvalReport]] = {}
    eval_split = "val"
    for kind in conv_kinds:
        for config in enumerate_ablation(kind, base.model):
            label = run_label(config)
            sub_dir = out_dir / "runs" / label if out_dir else None
            cfg = TrainConfig.from_dict({**base.to_dict(), "model": config.to_dict()})
            try:
                model = build_model(config)
                record = train_model(model, dataset, cfg, out_dir=sub_dir)
                runs[label] = record.to_dict()
                # Score each run from its own report; the test split was
                # already read exactly once inside train_model.
                rep_dict = record.test_report or record.val_report
                if record.test_report:
                    eval_split = "test"
                if rep_dict is not None:
                    rep = EvalReport.from_dict(rep_dict)
                    reports.setdefault((arch_label(config), kind), []).append(rep)
            except Exception as e:  # noqa: BLE001 - cell-level isolation
                errors[label] = f"{type(e).__name__}: {e}"

    rows = []
    for arch in ARCH_ROWS:
        for kind in conv_kinds:
            merged = _merge_row(reports.get((arch, kind), []))
            rows.append(
                {
                    "architecture": arch,
                    "conv_kind": kind,
                    "mse": merged["mse"],
                    "nmse": merged["nmse"] if reports.get((arch, kind)) else None,
                }
            )

    result = {
        "rows": rows,
        "eval_split": eval_split,
        "errors": errors,
        "runs": runs,
    }
    if out_dir:
        _write_summary_csv(out_dir / "summary.csv", rows)
        _write_summary_markdown(out_dir / "summary.md", rows, conv_kinds)
        _plot_nmse(out_dir / "nmse_by_architecture.png", rows, conv_kinds)
        (out_dir / "ablation.json").write_text(
            json.dumps(
                {k: v for k, v in result.items() if k != "runs"},
                indent=1,
                sort_keys=True,
            )
        )
    return result


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6g}"


def _write_summary_csv(path: Path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["architecture", "conv_kind"]
            + [f"{t}_mse" for t in TRAIT_NAMES]
            + ["nmse"]
        )
        for row in rows:
            writer.writerow(
                [row["architecture"], row["conv_kind"]]
                + [_fmt(row["mse"].get(t)) for t in TRAIT_NAMES]
                + [_fmt(row["nmse"])]
            )


def _write_summary_markdown(path: Path, rows: List[dict], conv_kinds: Sequence[str]) -> None:
    """Wide table: one row per architecture, column block per conv kind."""
    kind_title = {"standard": "CNN", "deformable": "DCNN"}
    short = {
        "fresh_weight": "Fresh Wt",
        "dry_weight": "Dry Wt",
        "height": "Height",
        "diameter": "Diameter",
        "leaf_area": "Leaf Area",
    }
    by_key = {(r["architecture"], r["conv_kind"]): r for r in rows}
    header = ["Architecture"]
    for kind in conv_kinds:
        title = kind_title.get(kind, kind)
        header += [f"{title} {short[t]} MSE" for t in TRAIT_NAMES]
        header.append(f"{title} All NMSE")
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for arch in ARCH_ROWS:
        cells = [arch]
        for kind in conv_kinds:
            row = by_key.get((arch, kind), {"mse": {}, "nmse": None})
            cells += [_fmt(row["mse"].get(t)) for t in TRAIT_NAMES]
            cells.append(_fmt(row["nmse"]))
        lines.append("| " + " | ".join(cells) + " |")
    Path(path).write_text("\n".join(lines) + "\n")


def _plot_nmse(path: Path, rows: List[dict], conv_kinds: Sequence[str]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_key = {(r["architecture"], r["conv_kind"]): r for r in rows}
    x = np.arange(len(ARCH_ROWS))
    width = 0.8 / max(len(conv_kinds), 1)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for i, kind in enumerate(conv_kinds):
        vals = [
            by_key.get((arch, kind), {}).get("nmse") or np.nan for arch in ARCH_ROWS
        ]
        ax.bar(x + (i - (len(conv_kinds) - 1) / 2) * width, vals, width, label=kind)
    ax.set_xticks(x)
    ax.set_xticklabels(ARCH_ROWS, rotation=20)
    ax.set_ylabel("NMSE")
    ax.set_title("Validation error by architecture")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
