"""Regression metrics: per-trait MSE and normalized MSE.

The normalized error of one trait is the ratio of summed squared errors
to summed squared ground truths; the reported figure is the sum of those
ratios over the traits being predicted. Dividing by the truth's energy
makes traits with different units comparable and the total indifferent
to per-trait rescaling. Over a whole split the ratio is taken after
summing over every sample (a ratio of sums, not a mean of batch ratios);
the differentiable training loss applies the same formula within the
batch it is given.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .autograd import Tensor, no_grad
from .data import Sample, make_batch
from .errors import MetricError


def _check_pair(gt: np.ndarray, pred: np.ndarray) -> None:
    if gt.ndim != 2 or pred.ndim != 2:
        raise MetricError(
            f"expected [N, traits] arrays, got {gt.ndim}-d and {pred.ndim}-d"
        )
    if gt.shape != pred.shape:
        raise MetricError(f"shape mismatch: ground truth {gt.shape} vs prediction {pred.shape}")
    if gt.shape[0] == 0:
        raise MetricError("cannot score zero samples")


def per_trait_mse(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _check_pair(gt, pred)
    return ((gt - pred) ** 2).mean(axis=0)


def nmse(gt: np.ndarray, pred: np.ndarray) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _check_pair(gt, pred)
    sst = (gt**2).sum(axis=0)
    zero = np.nonzero(sst == 0.0)[0]
    if zero.size:
        raise MetricError(
            f"trait column(s) {zero.tolist()} are identically zero; normalized error is undefined"
        )
    sse = ((gt - pred) ** 2).sum(axis=0)
    return float((sse / sst).sum())


def nmse_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable batch NMSE of predictions against constant truths."""
    gt = np.asarray(gt, dtype=np.float64)
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    _check_pair(gt, pred.data)
    sst = (gt**2).sum(axis=0)
    zero = np.nonzero(sst == 0.0)[0]
    if zero.size:
        raise MetricError(
            f"trait column(s) {zero.tolist()} are identically zero; normalized error is undefined"
        )
    sse = ops.sum(ops.pow(ops.sub(pred, gt), 2), axis=0)
    return ops.sum(ops.div(sse, sst))


class NmseAccumulator:
    """Streaming whole-split NMSE and per-trait MSE over many batches."""

    def __init__(self, n_traits: int):
        self.sse = np.zeros(n_traits)
        self.sst = np.zeros(n_traits)
        self.n = 0

    def update(self, gt: np.ndarray, pred: np.ndarray) -> None:
        gt = np.asarray(gt, dtype=np.float64)
        pred = np.asarray(pred, dtype=np.float64)
        _check_pair(gt, pred)
        if gt.shape[1] != self.sse.size:
            raise MetricError(
                f"batch has {gt.shape[1]} traits, accumulator expects {self.sse.size}"
            )
        self.sse += ((gt - pred) ** 2).sum(axis=0)
        self.sst += (gt**2).sum(axis=0)
        self.n += gt.shape[0]

    def mse(self) -> np.ndarray:
        if self.n == 0:
            raise MetricError("cannot score zero samples")
        return self.sse / self.n

    def nmse(self) -> float:
        if self.n == 0:
            raise MetricError("cannot score zero samples")
        zero = np.nonzero(self.sst == 0.0)[0]
        if zero.size:
            raise MetricError(
                f"trait column(s) {zero.tolist()} are identically zero; normalized error is undefined"
            )
        return float((self.sse / self.sst).sum())


@dataclass(frozen=True)
class EvalReport:
    trait_names: tuple
    mse: Dict[str, float]
    nmse: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "trait_names": list(self.trait_names),
            "mse": dict(self.mse),
            "nmse": self.nmse,
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            trait_names=tuple(d["trait_names"]),
            mse={k: float(v) for k, v in d["mse"].items()},
            nmse=float(d["nmse"]),
            n_samples=int(d["n_samples"]),
        )

    @classmethod
    def from_accumulator(cls, acc: NmseAccumulator, trait_names: Sequence[str]) -> "EvalReport":
        mse = acc.mse()
        return cls(
            trait_names=tuple(trait_names),
            mse={n: float(v) for n, v in zip(trait_names, mse)},
            nmse=acc.nmse(),
            n_samples=acc.n,
        )


def evaluate_model(
    model,
    samples: List[Sample],
    batch_size: int = 32,
    trait_names: Optional[Sequence[str]] = None,
) -> EvalReport:
    """Whole-split evaluation in eval mode with gradients off."""
    if not samples:
        raise MetricError("cannot score zero samples")
    names = tuple(trait_names) if trait_names is not None else tuple(model.config.outputs)
    acc = NmseAccumulator(len(names))
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                rgb, depth, gt = make_batch(chunk, names)
                pred = model(Tensor(rgb), Tensor(depth))
                acc.update(gt, pred.data)
    finally:
        if was_training:
            model.train()
    return EvalReport.from_accumulator(acc, names)
