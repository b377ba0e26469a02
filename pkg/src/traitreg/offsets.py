"""Inspection of learned sampling offsets in deformable convolutions.

The tools here pull the offset field produced by the earliest deformable
layer for one input image, keep the displacements whose magnitude meets a
threshold (3 px by default, inclusive: exactly 3.0 is kept), and draw the
displaced sampling locations over the image, one color per kernel point.

Grid positions map back to input pixels through the standard convolution
arithmetic: kernel point (ky, kx) of output cell (i, j) samples the input
at (i*stride - padding + ky + dy, j*stride - padding + kx + dx). Points
that land outside the image are clamped to the border and drawn with a
distinct marker so they stay visible without lying about their position.

This is a direct read of where the layer samples. The offsets are not
weighted by gradients or activations, so the pictures show attention of
the sampling grid, not attribution of the prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor, no_grad
from .data import TRAIT_NAMES, Sample, make_batch
from .deform import DeformableConv2d, split_offset_field
from .errors import ConfigError, DataError, ShapeError

# Colorblind-safe fixed palette; kernel points take colors in list order.
PALETTE = (
    "#e41a1c",
    "#377eb8",
    "#4daf4a",
    "#984ea3",
    "#ff7f00",
    "#a65628",
    "#f781bf",
    "#999999",
)

DEFAULT_THRESHOLD_PX = 3.0
DEFAULT_MAX_KERNEL_POINTS = 4


@dataclass(frozen=True)
class OffsetField:
    """One layer's offset output for one image, plus the geometry needed
    to map grid cells back to input pixels."""

    data: np.ndarray  # [1, 2*kH*kW*G, H', W']
    kernel_size: int
    stride: int
    padding: int
    offset_groups: int
    input_hw: Tuple[int, int]
    layer_path: str

    @property
    def kernel_points(self) -> int:
        return self.kernel_size * self.kernel_size

    @property
    def grid_hw(self) -> Tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    def split(self) -> Tuple[np.ndarray, np.ndarray]:
        """Vertical and horizontal displacement maps, each [G, K, H', W']."""
        dy, dx = split_offset_field(self.data, self.kernel_size, self.offset_groups)
        return dy[0], dx[0]


class _CaptureHit(Exception):
    """Internal: unwinds the forward pass once the probed layer is reached."""


def first_deformable_layer(model) -> Tuple[str, DeformableConv2d]:
    for name, mod in model.named_modules():
        if isinstance(mod, DeformableConv2d):
            return name, mod
    raise ConfigError("model has no deformable convolution layer to inspect")


def extract_offsets(model, sample: Sample) -> OffsetField:
    """Run the image through the model and capture the offset field of the
    earliest deformable layer, at that layer's input resolution.

    The pass is aborted as soon as the probed layer sees its input, so
    only the layers in front of it are actually computed. The model is
    evaluated in eval mode with gradients off and is left unchanged.
    """
    path, layer = first_deformable_layer(model)
    rgb, depth, _ = make_batch([sample], TRAIT_NAMES)
    box: dict = {}

    def trap(x):
        box["input"] = x
        raise _CaptureHit

    was_training = model.training
    layer.forward = trap  # instance attribute shadows the class method
    model.eval()
    try:
        with no_grad():
            try:
                model(Tensor(rgb), Tensor(depth))
            except _CaptureHit:
                pass
            if "input" not in box:
                raise ConfigError(
                    f"deformable layer {path!r} was never reached by the forward pass"
                )
            offsets = layer.offset_conv(box["input"])
    finally:
        del layer.forward
        if was_training:
            model.train()

    x = box["input"]
    return OffsetField(
        data=offsets.data.copy(),
        kernel_size=layer.kernel_size,
        stride=layer.stride,
        padding=layer.padding,
        offset_groups=layer.offset_groups,
        input_hw=(x.data.shape[2], x.data.shape[3]),
        layer_path=path,
    )


# ---------------------------------------------------------------------------
# strong-offset filtering


@dataclass(frozen=True)
class StrongOffset:
    """One displacement that met the threshold."""

    kernel_point: int
    group: int
    y: int  # output-grid row
    x: int  # output-grid column
    dy: float
    dx: float
    magnitude: float


@dataclass(frozen=True)
class StrongOffsetSet:
    """All displacements of one field whose magnitude is >= threshold,
    ordered kernel point first, carrying the field's grid geometry."""

    threshold: float
    entries: Tuple[StrongOffset, ...]
    kernel_size: int
    stride: int
    padding: int
    offset_groups: int
    input_hw: Tuple[int, int]
    grid_hw: Tuple[int, int]
    layer_path: str

    def __post_init__(self):
        for e in self.entries:
            if e.magnitude < self.threshold:
                raise DataError(
                    f"entry at grid ({e.y}, {e.x}) has magnitude {e.magnitude:.4g} "
                    f"below the threshold {self.threshold:.4g}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def by_kernel_point(self) -> Dict[int, Tuple[StrongOffset, ...]]:
        out: Dict[int, List[StrongOffset]] = {}
        for e in self.entries:
            out.setdefault(e.kernel_point, []).append(e)
        return {k: tuple(v) for k, v in out.items()}

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
            "offset_groups": self.offset_groups,
            "input_hw": list(self.input_hw),
            "grid_hw": list(self.grid_hw),
            "layer_path": self.layer_path,
            "entries": [
                {
                    "kernel_point": e.kernel_point,
                    "group": e.group,
                    "y": e.y,
                    "x": e.x,
                    "dy": e.dy,
                    "dx": e.dx,
                    "magnitude": e.magnitude,
                }
                for e in self.entries
            ],
        }


def filter_strong(
    field: OffsetField, threshold: float = DEFAULT_THRESHOLD_PX
) -> StrongOffsetSet:
    """Keep the displacements with magnitude >= threshold.

    The comparison is inclusive, so a displacement of exactly the
    threshold is kept. Entries come back sorted by kernel point, then
    offset group, then grid position.
    """
    if not threshold >= 0:  # also rejects NaN
        raise ConfigError(f"threshold must be non-negative, got {threshold!r}")
    if field.data.shape[0] != 1:
        raise ShapeError(
            f"expected a single-image field, got batch size {field.data.shape[0]}"
        )
    dy, dx = field.split()  # [G, K, H', W']
    mag = np.sqrt(dy**2 + dx**2)
    # kernel-point-major scan order
    kept = np.argwhere(np.transpose(mag, (1, 0, 2, 3)) >= threshold)
    entries = tuple(
        StrongOffset(
            kernel_point=int(k),
            group=int(g),
            y=int(i),
            x=int(j),
            dy=float(dy[g, k, i, j]),
            dx=float(dx[g, k, i, j]),
            magnitude=float(mag[g, k, i, j]),
        )
        for k, g, i, j in kept
    )
    return StrongOffsetSet(
        threshold=float(threshold),
        entries=entries,
        kernel_size=field.kernel_size,
        stride=field.stride,
        padding=field.padding,
        offset_groups=field.offset_groups,
        input_hw=field.input_hw,
        grid_hw=field.grid_hw,
        layer_path=field.layer_path,
    )


# ---------------------------------------------------------------------------
# grid-to-pixel mapping


def kernel_point_rc(kernel_size: int, kernel_point: int) -> Tuple[int, int]:
    """Row and column of a kernel point inside its kernel window."""
    k2 = kernel_size * kernel_size
    if not 0 <= kernel_point < k2:
        raise ConfigError(
            f"kernel point {kernel_point} out of range for a "
            f"{kernel_size}x{kernel_size} kernel (0..{k2 - 1})"
        )
    return divmod(kernel_point, kernel_size)


def default_kernel_points(kernel_size: int, count: int = DEFAULT_MAX_KERNEL_POINTS) -> Tuple[int, ...]:
    """The corner points of the kernel window, up to ``count`` of them."""
    k = kernel_size
    corners = [0, k - 1, (k - 1) * k, k * k - 1]
    unique = sorted(set(corners))
    return tuple(unique[:count])


def displaced_positions(
    strong_set: StrongOffsetSet, entries: Optional[Sequence[StrongOffset]] = None
) -> np.ndarray:
    """Input-pixel coordinates for the given entries (all of them by default).

    Returns [m, 4] rows of (base y, base x, sampled y, sampled x), where
    base is where a rigid convolution would read and sampled adds the
    learned displacement.
    """
    if entries is None:
        entries = strong_set.entries
    rows = np.zeros((len(entries), 4))
    for idx, e in enumerate(entries):
        ky, kx = kernel_point_rc(strong_set.kernel_size, e.kernel_point)
        base_y = e.y * strong_set.stride - strong_set.padding + ky
        base_x = e.x * strong_set.stride - strong_set.padding + kx
        rows[idx] = (base_y, base_x, base_y + e.dy, base_x + e.dx)
    return rows


# ---------------------------------------------------------------------------
# rendering


def _as_display_image(image) -> np.ndarray:
    """Accept a Sample, [3,H,W], [H,W,3] or [H,W] array; return [H,W,3] in 0..1."""
    if isinstance(image, Sample):
        image = image.rgb
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = np.transpose(arr, (1, 2, 0))
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ShapeError(f"cannot display an image of shape {np.asarray(image).shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    if arr.max() > 1.0:
        arr = arr / 255.0
    return np.clip(arr, 0.0, 1.0)


def render_overlay(
    image,
    strong_set: StrongOffsetSet,
    out_path,
    kernel_points: Optional[Sequence[int]] = None,
    max_kernel_points: int = DEFAULT_MAX_KERNEL_POINTS,
    title: Optional[str] = None,
) -> Path:
    """Draw the displaced sampling locations over the image and save a PNG.

    Each selected kernel point gets one palette color; the legend lists
    the points with their in-window row and column and the number of
    strong offsets drawn. Displacements landing outside the image are
    clamped to the border and drawn as open triangles. Rendering more
    than ``max_kernel_points`` at once is refused because the overlay
    becomes unreadable, not because it would be unsound.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.lines import Line2D

    base = _as_display_image(image)
    h, w = base.shape[:2]
    if (h, w) != tuple(strong_set.input_hw):
        raise ShapeError(
            f"image is {h}x{w} but the offsets were computed on a "
            f"{strong_set.input_hw[0]}x{strong_set.input_hw[1]} input"
        )

    if kernel_points is None:
        kernel_points = default_kernel_points(strong_set.kernel_size, max_kernel_points)
    kernel_points = list(dict.fromkeys(int(k) for k in kernel_points))
    for k in kernel_points:
        kernel_point_rc(strong_set.kernel_size, k)  # range check
    if len(kernel_points) > max_kernel_points:
        raise ConfigError(
            f"{len(kernel_points)} kernel points requested but at most "
            f"{max_kernel_points} are rendered at once; raise max_kernel_points "
            "to override"
        )

    grouped = strong_set.by_kernel_point()
    fig, ax = plt.subplots(figsize=(max(4.0, w / 80), max(4.0, h / 80)))
    ax.imshow(base, interpolation="nearest")
    handles = []
    any_clamped = False
    for color_idx, k in enumerate(kernel_points):
        color = PALETTE[color_idx % len(PALETTE)]
        entries = grouped.get(k, ())
        if entries:
            pos = displaced_positions(strong_set, entries)
            py, px = pos[:, 2], pos[:, 3]
            outside = (py < 0) | (py > h - 1) | (px < 0) | (px > w - 1)
            py = np.clip(py, 0, h - 1)
            px = np.clip(px, 0, w - 1)
            if (~outside).any():
                ax.scatter(px[~outside], py[~outside], s=12, c=color, marker="o",
                           linewidths=0)
            if outside.any():
                any_clamped = True
                ax.scatter(px[outside], py[outside], s=24, marker="^",
                           facecolors="none", edgecolors=color, linewidths=1.0)
        ky, kx = kernel_point_rc(strong_set.kernel_size, k)
        handles.append(
            Line2D([], [], marker="o", linestyle="", color=color,
                   label=f"kernel point {k} at ({ky},{kx}), n={len(entries)}")
        )
    if any_clamped:
        handles.append(
            Line2D([], [], marker="^", linestyle="", markerfacecolor="none",
                   markeredgecolor="black", color="black",
                   label="clamped (landed outside the image)")
        )
    ax.legend(handles=handles, loc="upper right", fontsize=7, framealpha=0.85)
    if title is None:
        title = (
            f"sampling displacements >= {strong_set.threshold:g} px, "
            f"layer {strong_set.layer_path}"
        )
    ax.set_title(title, fontsize=9)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, metadata={"Software": None})
    plt.close(fig)
    return out_path
