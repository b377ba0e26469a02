"""Dataset handling: manifests, cropping, normalization, augmentation,
sampling, and train/val/test splitting.

Images are RGB-plus-depth pairs. RGB is stored as 8-bit PNG and loaded as
floats in [0, 255]; depth is stored as 16-bit PNG spanning
``DEPTH_RANGE_CM`` and loaded to centimeters. Channel statistics come
from the training split alone and carry the ids of the samples they saw,
so reusing them on overlapping evaluation data is a detectable error
rather than a silent leak.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError

TRAIT_NAMES = ("fresh_weight", "dry_weight", "height", "diameter", "leaf_area")

PIXEL_SCALE_CM = 0.5
DEPTH_RANGE_CM = 50.0

# Fixed capture crop: rows then columns, end-exclusive.
DEFAULT_CROP = (200, 900, 650, 1450)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class TraitVector:
    fresh_weight: float
    dry_weight: float
    height: float
    diameter: float
    leaf_area: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in TRAIT_NAMES])

    def subset(self, names: Sequence[str]) -> np.ndarray:
        for n in names:
            if n not in TRAIT_NAMES:
                raise DataError(f"unknown trait {n!r}, expected one of {TRAIT_NAMES}")
        return np.array([getattr(self, n) for n in names])

    @classmethod
    def from_mapping(cls, d: Dict[str, float]) -> "TraitVector":
        missing = [n for n in TRAIT_NAMES if n not in d]
        if missing:
            raise DataError(f"trait record is missing {missing}")
        extra = [k for k in d if k not in TRAIT_NAMES]
        if extra:
            raise DataError(f"trait record has unknown keys {extra}")
        return cls(**{n: float(d[n]) for n in TRAIT_NAMES})


@dataclass
class Sample:
    rgb: np.ndarray  # [3, H, W]
    depth: np.ndarray  # [1, H, W]
    traits: TraitVector
    source_id: str
    variety: str


# ---------------------------------------------------------------------------
# manifest and image IO


def save_manifest(data_dir: Path, records: List[dict]) -> Path:
    path = Path(data_dir) / MANIFEST_NAME
    doc = {
        "version": MANIFEST_VERSION,
        "pixel_scale_cm": PIXEL_SCALE_CM,
        "depth_range_cm": DEPTH_RANGE_CM,
        "samples": records,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_manifest(data_dir: Path) -> List[dict]:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no {MANIFEST_NAME} under {data_dir}")
    doc = json.loads(path.read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(
            f"manifest version {doc.get('version')!r} unsupported, expected {MANIFEST_VERSION}"
        )
    samples = doc.get("samples")
    if not isinstance(samples, list) or not samples:
        raise DataError("manifest lists no samples")
    ids = [rec.get("source_id") for rec in samples]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise DataError(f"duplicate source ids in manifest: {dupes}")
    return samples


def write_rgb_png(path: Path, rgb: np.ndarray) -> None:
    """rgb is [3, H, W] in [0, 255]."""
    arr = np.clip(np.round(rgb), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def write_depth_png(path: Path, depth: np.ndarray) -> None:
    """depth is [1, H, W] in centimeters, clipped to the sensor range."""
    frac = np.clip(depth[0] / DEPTH_RANGE_CM, 0.0, 1.0)
    arr = np.round(frac * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def read_rgb_png(path: Path) -> np.ndarray:
    """Returns [3, H, W] in [0, 255]; normalization handles the scale."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1)


def read_depth_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"depth image {path} is not single-channel")
    return (arr / 65535.0 * DEPTH_RANGE_CM)[None]


def load_sample(data_dir: Path, record: dict, crop: Optional[tuple] = None) -> Sample:
    data_dir = Path(data_dir)
    try:
        rgb = read_rgb_png(data_dir / record["rgb"])
        depth = read_depth_png(data_dir / record["depth"])
        traits = TraitVector.from_mapping(record["traits"])
        source_id = str(record["source_id"])
        variety = str(record.get("variety", ""))
    except KeyError as e:
        raise DataError(f"manifest record missing field {e.args[0]!r}") from e
    if rgb.shape[1:] != depth.shape[1:]:
        raise DataError(
            f"sample {source_id}: rgb is {rgb.shape[1:]} but depth is {depth.shape[1:]}"
        )
    if crop is not None:
        rgb = crop_image(rgb, crop)
        depth = crop_image(depth, crop)
    return Sample(rgb=rgb, depth=depth, traits=traits, source_id=source_id, variety=variety)


def load_dataset(data_dir: Path, crop: Optional[tuple] = None) -> List[Sample]:
    return [load_sample(data_dir, rec, crop) for rec in load_manifest(data_dir)]


# ---------------------------------------------------------------------------
# cropping


def crop_image(img: np.ndarray, window: tuple = DEFAULT_CROP) -> np.ndarray:
    """Cut the fixed capture window (top, bottom, left, right) out of [C, H, W]."""
    top, bottom, left, right = window
    if not (0 <= top < bottom and 0 <= left < right):
        raise DataError(f"malformed crop window {window}")
    _, h, w = img.shape
    if bottom > h or right > w:
        raise DataError(
            f"crop window {window} does not fit image of size {h}x{w}"
        )
    return img[:, top:bottom, left:right].copy()


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std (3 RGB + 1 depth) plus provenance ids."""

    mean: np.ndarray  # [4]
    std: np.ndarray  # [4]
    source_ids: frozenset = field(default_factory=frozenset)

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "source_ids": sorted(self.source_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            source_ids=frozenset(d.get("source_ids", ())),
        )


def compute_channel_stats(samples: Sequence[Sample]) -> ChannelStats:
    if not samples:
        raise DataError("cannot compute channel statistics from zero samples")
    sums = np.zeros(4)
    sqsums = np.zeros(4)
    count = 0
    for s in samples:
        stacked = np.concatenate([s.rgb, s.depth], axis=0)  # [4, H, W]
        sums += stacked.sum(axis=(1, 2))
        sqsums += (stacked**2).sum(axis=(1, 2))
        count += stacked.shape[1] * stacked.shape[2]
    mean = sums / count
    var = sqsums / count - mean**2
    std = np.sqrt(np.maximum(var, 0.0))
    flat = np.nonzero(std < 1e-12)[0]
    if flat.size:
        raise DataError(
            f"channel(s) {flat.tolist()} have zero variance; statistics would divide by zero"
        )
    return ChannelStats(mean=mean, std=std, source_ids=frozenset(s.source_id for s in samples))


def verify_no_leakage(stats: ChannelStats, held_out: Sequence[Sample]) -> None:
    """Fail if normalization statistics saw any held-out sample."""
    overlap = sorted(stats.source_ids & {s.source_id for s in held_out})
    if overlap:
        raise DataError(
            f"normalization statistics were computed on held-out sample(s) {overlap}"
        )


def normalize_sample(sample: Sample, stats: ChannelStats) -> Sample:
    rgb = (sample.rgb - stats.mean[:3, None, None]) / stats.std[:3, None, None]
    depth = (sample.depth - stats.mean[3, None, None]) / stats.std[3, None, None]
    return replace(sample, rgb=rgb, depth=depth)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True
    vflip: bool = True
    rotate: bool = True
    max_rotate_deg: float = 180.0
    shift: bool = True
    max_shift_frac: float = 0.10

    def to_dict(self) -> dict:
        return {
            "hflip": self.hflip,
            "vflip": self.vflip,
            "rotate": self.rotate,
            "max_rotate_deg": self.max_rotate_deg,
            "shift": self.shift,
            "max_shift_frac": self.max_shift_frac,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        unknown = sorted(set(d) - set(cls().to_dict()))
        if unknown:
            raise DataError(f"unknown augmentation keys: {unknown}")
        return cls(**d)


def augment_sample(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Randomly transform a sample's geometry; traits are unchanged.

    RGB and depth always receive the same flip/rotation/shift so the two
    modalities stay registered. RGB interpolates bilinearly, depth takes
    nearest neighbors to avoid inventing intermediate heights. New pixels
    revealed at the borders are zero, which in normalized space is the
    mean pixel.
    """
    rgb, depth = sample.rgb, sample.depth
    if cfg.hflip and rng.random() < 0.5:
        rgb = rgb[:, :, ::-1]
        depth = depth[:, :, ::-1]
    if cfg.vflip and rng.random() < 0.5:
        rgb = rgb[:, ::-1, :]
        depth = depth[:, ::-1, :]
    if cfg.rotate:
        angle = rng.uniform(-cfg.max_rotate_deg, cfg.max_rotate_deg)
        rgb = np.stack(
            [
                ndimage.rotate(ch, angle, reshape=False, order=1, mode="constant", cval=0.0)
                for ch in rgb
            ]
        )
        depth = np.stack(
            [
                ndimage.rotate(ch, angle, reshape=False, order=0, mode="constant", cval=0.0)
                for ch in depth
            ]
        )
    if cfg.shift:
        h, w = rgb.shape[1], rgb.shape[2]
        dy = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * h
        dx = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * w
        rgb = ndimage.shift(rgb, (0, dy, dx), order=1, mode="constant", cval=0.0)
        depth = ndimage.shift(depth, (0, dy, dx), order=0, mode="constant", cval=0.0)
    return replace(sample, rgb=np.ascontiguousarray(rgb), depth=np.ascontiguousarray(depth))


# ---------------------------------------------------------------------------
# samplers


class RandomSampler:
    """A fresh uniform permutation of all indices each epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise DataError("sampler needs at least one sample")
        self.n = n
        self.rng = rng

    def epoch_indices(self) -> np.ndarray:
        return self.rng.permutation(self.n)


class BalancedFreshWeightSampler:
    """Draw with replacement, weighting each sample inversely to the
    population of its fresh-weight bin so rare weight ranges are seen as
    often as common ones."""

    def __init__(self, fresh_weights: Sequence[float], rng: np.random.Generator, bins: int = 10):
        fw = np.asarray(fresh_weights, dtype=np.float64)
        if fw.size < 1:
            raise DataError("sampler needs at least one sample")
        if bins < 1:
            raise DataError(f"bin count must be positive, got {bins}")
        self.n = fw.size
        self.rng = rng
        lo, hi = fw.min(), fw.max()
        if hi <= lo:
            # Degenerate spread: everything lands in one bin, weights equal.
            assignment = np.zeros(fw.size, dtype=np.int64)
        else:
            edges = np.linspace(lo, hi, bins + 1)
            assignment = np.clip(np.searchsorted(edges, fw, side="right") - 1, 0, bins - 1)
        counts = np.bincount(assignment, minlength=bins)
        weights = 1.0 / counts[assignment]
        self.p = weights / weights.sum()
        self.bin_assignment = assignment

    def epoch_indices(self) -> np.ndarray:
        return self.rng.choice(self.n, size=self.n, replace=True, p=self.p)


class VarietyStratifiedSampler:
    """Visit every sample once per epoch, interleaving varieties so each
    batch prefix holds a near-even variety mix."""

    def __init__(self, varieties: Sequence[str], rng: np.random.Generator):
        if not varieties:
            raise DataError("sampler needs at least one sample")
        self.rng = rng
        self.by_variety: Dict[str, np.ndarray] = {}
        arr = np.asarray(varieties)
        for v in sorted(set(varieties)):
            self.by_variety[v] = np.nonzero(arr == v)[0]

    def epoch_indices(self) -> np.ndarray:
        queues = {v: list(self.rng.permutation(idx)) for v, idx in self.by_variety.items()}
        order = []
        names = sorted(queues)
        while any(queues[v] for v in names):
            for v in names:
                if queues[v]:
                    order.append(queues[v].pop())
        return np.asarray(order, dtype=np.int64)


SAMPLER_KINDS = ("random", "balanced_fresh_weight", "variety_stratified")


def make_sampler(kind: str, samples: Sequence[Sample], rng: np.random.Generator):
    if kind == "random":
        return RandomSampler(len(samples), rng)
    if kind == "balanced_fresh_weight":
        return BalancedFreshWeightSampler([s.traits.fresh_weight for s in samples], rng)
    if kind == "variety_stratified":
        return VarietyStratifiedSampler([s.variety for s in samples], rng)
    raise DataError(f"unknown sampler {kind!r}, expected one of {SAMPLER_KINDS}")


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    """Held-out test ids plus a fractional train/val cut of the rest.

    The test split is pinned by explicit ``test_ids`` (or, as a seeded
    convenience, by ``test_count`` random ids). The remaining samples are
    shuffled by ``seed``; the training set takes ``floor(n * fraction)``
    of them and validation the remainder. ``counts`` replaces the
    fraction with explicit (train, val) sizes of that remainder.
    """

    train_fraction: float = 0.75
    test_ids: Tuple[str, ...] = ()
    test_count: int = 0
    counts: Optional[Tuple[int, int]] = None
    allow_empty_val: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "train_fraction": self.train_fraction,
            "test_ids": list(self.test_ids),
            "test_count": self.test_count,
            "counts": list(self.counts) if self.counts is not None else None,
            "allow_empty_val": self.allow_empty_val,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        counts = d.get("counts")
        return cls(
            train_fraction=float(d.get("train_fraction", 0.75)),
            test_ids=tuple(d.get("test_ids", ())),
            test_count=int(d.get("test_count", 0)),
            counts=tuple(counts) if counts is not None else None,
            allow_empty_val=bool(d.get("allow_empty_val", False)),
            seed=int(d.get("seed", 0)),
        )


def split_samples(
    samples: Sequence[Sample], spec: SplitSpec
) -> Tuple[List[int], List[int], List[int]]:
    """Index triple (train, val, test); test ids never leak into the rest."""
    n = len(samples)
    if n < 1:
        raise DataError("cannot split zero samples")
    ids = [s.source_id for s in samples]
    rng = np.random.default_rng(spec.seed)
    if spec.test_ids:
        wanted = set(spec.test_ids)
        unknown = sorted(wanted - set(ids))
        if unknown:
            raise DataError(f"test ids not present in the dataset: {unknown}")
        test_idx = [i for i, sid in enumerate(ids) if sid in wanted]
        rest = np.asarray([i for i in range(n) if ids[i] not in wanted])
        rest = rest[rng.permutation(rest.size)]
    else:
        if spec.test_count < 0 or spec.test_count >= n:
            raise DataError(
                f"test_count {spec.test_count} out of range for {n} samples"
            )
        perm = rng.permutation(n)
        test_idx = sorted(int(i) for i in perm[: spec.test_count])
        rest = perm[spec.test_count :]
    m = rest.size
    if spec.counts is not None:
        n_train, n_val = spec.counts
        if n_train < 0 or n_val < 0 or n_train + n_val != m:
            raise DataError(
                f"explicit counts {spec.counts} do not sum to the {m} non-test samples"
            )
    else:
        if not (0.0 < spec.train_fraction <= 1.0):
            raise DataError(f"train fraction {spec.train_fraction} outside (0, 1]")
        n_train = int(np.floor(m * spec.train_fraction))
        n_val = m - n_train
    if n_train < 1:
        raise DataError(f"split leaves an empty training set for {n} samples")
    if n_val == 0 and not spec.allow_empty_val:
        raise DataError(
            "split leaves an empty validation set; pass allow_empty_val to permit this"
        )
    train_idx = [int(i) for i in rest[:n_train]]
    val_idx = [int(i) for i in rest[n_train:]]
    return train_idx, val_idx, list(test_idx)


class SplitDataset:
    """Normalized train/val/test splits with a test-access counter.

    The test split is meant to be consulted exactly once per training
    run; ``test_read_count`` lets harness code assert that discipline.
    """

    def __init__(
        self,
        train: List[Sample],
        val: List[Sample],
        test: List[Sample],
        stats: ChannelStats,
        spec: SplitSpec,
    ):
        self.train = train
        self.val = val
        self._test = test
        self.stats = stats
        self.spec = spec
        self.test_read_count = 0

    @property
    def test(self) -> List[Sample]:
        self.test_read_count += 1
        return self._test


def prepare_dataset(
    samples: Sequence[Sample], spec: SplitSpec, stats: Optional[ChannelStats] = None
) -> SplitDataset:
    """Split, fit normalization on the training part, normalize all parts.

    Passing precomputed ``stats`` (e.g. from a checkpoint) skips fitting
    but still runs the leakage check against val and test.
    """
    tr_idx, va_idx, te_idx = split_samples(samples, spec)
    train = [samples[i] for i in tr_idx]
    val = [samples[i] for i in va_idx]
    test = [samples[i] for i in te_idx]
    if stats is None:
        stats = compute_channel_stats(train)
    verify_no_leakage(stats, val)
    verify_no_leakage(stats, test)
    return SplitDataset(
        train=[normalize_sample(s, stats) for s in train],
        val=[normalize_sample(s, stats) for s in val],
        test=[normalize_sample(s, stats) for s in test],
        stats=stats,
        spec=spec,
    )


def make_batch(
    samples: Sequence[Sample], trait_names: Sequence[str]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (rgb [N,3,H,W], depth [N,1,H,W], gt [N,m])."""
    if not samples:
        raise DataError("cannot build a batch from zero samples")
    shapes = {s.rgb.shape for s in samples}
    if len(shapes) > 1:
        raise DataError(f"batch mixes image shapes {sorted(shapes)}")
    rgb = np.stack([s.rgb for s in samples])
    depth = np.stack([s.depth for s in samples])
    gt = np.stack([s.traits.subset(trait_names) for s in samples])
    return rgb, depth, gt
