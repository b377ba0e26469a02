"""Synthetic RGB-plus-depth plant captures with exactly known traits.

Each sample is one elliptical rosette on a soil-toned background. The
depth channel holds a dome over the ellipse, and the RGB shading follows
the dome so that every trait is, in principle, recoverable from either
modality. Traits are derived from the rendered geometry itself, so a
model that reads the images can drive the regression error toward zero:

* leaf_area: mask pixel count times the pixel area,
* height: the dome peak,
* diameter: the larger ellipse diameter,
* fresh_weight: ``K1 * leaf_area * height``,
* dry_weight: fresh weight scaled by a height-dependent dry-matter
  fraction inside [0.03, 0.08].

Generation is fully determined by the seed, including file bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .data import (
    PIXEL_SCALE_CM,
    TraitVector,
    save_manifest,
    write_depth_png,
    write_rgb_png,
)
from .errors import DataError

K1 = 0.02
DRY_FRACTION_RANGE = (0.03, 0.08)
HEIGHT_RANGE_CM = (5.0, 25.0)

VARIETY_COLORS = {
    "aurora": (0.20, 0.55, 0.18),
    "bastion": (0.12, 0.45, 0.22),
    "celadon": (0.30, 0.62, 0.30),
}

SOIL_COLOR = (0.26, 0.19, 0.13)


@dataclass(frozen=True)
class PlantSpec:
    """Geometry and appearance of one rendered plant."""

    center_y: float
    center_x: float
    semi_minor: float  # pixels
    semi_major: float  # pixels
    angle_rad: float
    height_cm: float
    variety: str


def dry_matter_fraction(height_cm: float) -> float:
    """Dry-matter fraction rises linearly with plant height."""
    lo, hi = HEIGHT_RANGE_CM
    t = np.clip((height_cm - lo) / (hi - lo), 0.0, 1.0)
    f0, f1 = DRY_FRACTION_RANGE
    return float(f0 + (f1 - f0) * t)


def sample_plant_spec(
    rng: np.random.Generator, height: int, width: int, variety: str
) -> PlantSpec:
    short = min(height, width)
    semi_minor = rng.uniform(0.09, 0.16) * short
    semi_major = semi_minor * rng.uniform(1.0, 1.6)
    margin = semi_major + 1.0
    cy = rng.uniform(margin, height - margin)
    cx = rng.uniform(margin, width - margin)
    return PlantSpec(
        center_y=cy,
        center_x=cx,
        semi_minor=semi_minor,
        semi_major=semi_major,
        angle_rad=rng.uniform(0.0, np.pi),
        height_cm=rng.uniform(*HEIGHT_RANGE_CM),
        variety=variety,
    )


def render_plant(
    spec: PlantSpec, height: int, width: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, TraitVector]:
    """Render (rgb [3,H,W] in [0,255], depth [1,H,W] in cm) and derive traits."""
    if spec.semi_major + 1.0 > min(spec.center_y, spec.center_x) or (
        spec.center_y + spec.semi_major + 1.0 > height
        or spec.center_x + spec.semi_major + 1.0 > width
    ):
        raise DataError("plant ellipse does not fit inside the image")
    yy, xx = np.mgrid[0:height, 0:width]
    dy = yy - spec.center_y
    dx = xx - spec.center_x
    ca, sa = np.cos(spec.angle_rad), np.sin(spec.angle_rad)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    ellipse = (u / spec.semi_major) ** 2 + (v / spec.semi_minor) ** 2
    # strict: pixels on the rim would carry zero depth, and the area label
    # must count exactly the pixels the depth channel can show
    mask = ellipse < 1.0
    dome = spec.height_cm * np.sqrt(np.clip(1.0 - ellipse, 0.0, None))

    depth = np.where(mask, dome, 0.0)[None]
    shade = 0.6 + 0.4 * (dome / spec.height_cm)
    base = np.asarray(VARIETY_COLORS[spec.variety])
    rgb = np.empty((3, height, width))
    for c in range(3):
        rgb[c] = np.where(mask, base[c] * shade, SOIL_COLOR[c])
    rgb += rng.normal(0.0, 0.01, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0) * 255.0

    leaf_area = float(mask.sum()) * PIXEL_SCALE_CM**2
    plant_height = float(depth.max())
    diameter = 2.0 * spec.semi_major * PIXEL_SCALE_CM
    fresh = K1 * leaf_area * plant_height
    dry = dry_matter_fraction(plant_height) * fresh
    traits = TraitVector(
        fresh_weight=fresh,
        dry_weight=dry,
        height=plant_height,
        diameter=diameter,
        leaf_area=leaf_area,
    )
    return rgb, depth[0:1], traits


def generate_synthetic(
    out_dir: Path,
    n: int,
    seed: int = 0,
    height: int = 64,
    width: int = 64,
    varieties: Optional[Tuple[str, ...]] = None,
) -> List[dict]:
    """Write ``n`` samples plus a manifest under ``out_dir``."""
    if n < 1:
        raise DataError(f"sample count must be positive, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = tuple(varieties) if varieties else tuple(sorted(VARIETY_COLORS))
    for v in names:
        if v not in VARIETY_COLORS:
            raise DataError(f"unknown variety {v!r}, expected one of {sorted(VARIETY_COLORS)}")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        variety = names[i % len(names)]
        spec = sample_plant_spec(rng, height, width, variety)
        rgb, depth, traits = render_plant(spec, height, width, rng)
        rgb_name = f"sample_{i:04d}_rgb.png"
        depth_name = f"sample_{i:04d}_depth.png"
        write_rgb_png(out_dir / rgb_name, rgb)
        write_depth_png(out_dir / depth_name, depth)
        records.append(
            {
                "rgb": rgb_name,
                "depth": depth_name,
                "source_id": f"syn-{i:04d}",
                "variety": variety,
                "traits": {k: float(v) for k, v in zip(
                    ("fresh_weight", "dry_weight", "height", "diameter", "leaf_area"),
                    traits.as_array(),
                )},
            }
        )
    save_manifest(out_dir, records)
    return records
