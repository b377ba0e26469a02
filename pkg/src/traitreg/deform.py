"""Deformable 2-d convolution.

A companion convolution (same kernel geometry as the main one) predicts a
per-location, per-kernel-point offset field. The main convolution then
reads its inputs at those fractionally displaced positions through
bilinear interpolation instead of on the rigid grid. Positions outside
the image see zero-valued phantom pixels. Both the sampled values and the
sampling coordinates carry gradient.

Offset field layout, shape [N, 2*kH*kW*G, H', W'] with G offset groups:
channel ``g*(2*kH*kW) + 2*k + 0`` is the vertical shift (dy) and
``... + 1`` the horizontal shift (dx) for kernel point ``k = a*kW + b``
applied to input-channel group ``g``.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from . import ops
from .autograd import Function, Tensor
from .errors import ConfigError, ShapeError
from .layers import Conv2d, Module


def offset_channel_count(kernel_size: int, offset_groups: int) -> int:
    return 2 * kernel_size * kernel_size * offset_groups


def resolve_offset_groups(in_channels: int, requested: int) -> int:
    """Largest divisor of ``in_channels`` not exceeding ``requested``.

    Group counts must divide the channel count; when the requested count
    does not, fall back to the nearest feasible one below it.
    """
    if requested < 1:
        raise ConfigError(f"offset group count must be positive, got {requested}")
    g = min(requested, in_channels)
    while in_channels % g:
        g -= 1
    return g


def split_offset_field(offsets: np.ndarray, kernel_size: int, offset_groups: int):
    """View an offset field as (dy, dx), each [N, G, kH*kW, H', W']."""
    n, ch, oh, ow = offsets.shape
    k2 = kernel_size * kernel_size
    expected = 2 * k2 * offset_groups
    if ch != expected:
        raise ShapeError(
            f"offset field channel axis is {ch}, expected {expected} "
            f"(2 * {k2} kernel points * {offset_groups} groups)"
        )
    field = offsets.reshape(n, offset_groups, k2, 2, oh, ow)
    return field[:, :, :, 0], field[:, :, :, 1]


def _bilinear_corners(py, px, h, w):
    """Corner indices, weights and in-bounds masks for bilinear reads."""
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    ty = py - y0
    tx = px - x0
    my0 = (y0 >= 0) & (y0 < h)
    my1 = (y1 >= 0) & (y1 < h)
    mx0 = (x0 >= 0) & (x0 < w)
    mx1 = (x1 >= 0) & (x1 < w)
    corners = (
        (y0, x0, (1.0 - ty) * (1.0 - tx), my0 & mx0),
        (y0, x1, (1.0 - ty) * tx, my0 & mx1),
        (y1, x0, ty * (1.0 - tx), my1 & mx0),
        (y1, x1, ty * tx, my1 & mx1),
    )
    return corners, ty, tx


class _BilinearSample(Function):
    """Sample [N,C,H,W] at fractional points [N,P,2] (y, x) -> [N,C,P]."""

    def forward(self, x, coords):
        if x.ndim != 4 or coords.ndim != 3 or coords.shape[2] != 2:
            raise ShapeError(
                f"bilinear_sample expects [N,C,H,W] and [N,P,2], got {x.shape} and {coords.shape}"
            )
        if coords.shape[0] != x.shape[0]:
            raise ShapeError(
                f"bilinear_sample: batch axis differs ({x.shape[0]} vs {coords.shape[0]})"
            )
        n, c, h, w = x.shape
        py, px = coords[:, :, 0], coords[:, :, 1]
        corners, ty, tx = _bilinear_corners(py, px, h, w)
        xf = x.reshape(n, c, h * w)
        out = np.zeros((n, c, py.shape[1]))
        vals = []
        for yy, xx, wt, m in corners:
            lin = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
            v = np.take_along_axis(xf, lin[:, None, :], axis=2) * m[:, None, :]
            vals.append(v)
            out += wt[:, None, :] * v
        self.cache = (x.shape, corners, ty, tx, vals)
        return out

    def backward(self, grad):
        (n, c, h, w), corners, ty, tx, vals = self.cache
        gxf = np.zeros(n * c * h * w)
        base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
        for yy, xx, wt, m in corners:
            lin = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
            contrib = grad * wt[:, None, :] * m[:, None, :]
            idx = base[:, :, None] + lin[:, None, :]
            gxf += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=gxf.size)
        v00, v01, v10, v11 = vals
        dvdy = (1.0 - tx)[:, None, :] * (v10 - v00) + tx[:, None, :] * (v11 - v01)
        dvdx = (1.0 - ty)[:, None, :] * (v01 - v00) + ty[:, None, :] * (v11 - v10)
        gcoords = np.stack(
            [(grad * dvdy).sum(axis=1), (grad * dvdx).sum(axis=1)], axis=2
        )
        return gxf.reshape(n, c, h, w), gcoords


def bilinear_sample(x, coords) -> Tensor:
    return _BilinearSample.apply(x, coords)


class _DeformConv2d(Function):
    def forward(self, x, offsets, w, b=None, *, stride, padding, offset_groups):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(
                f"deform_conv2d expects 4-d input and weight, got {x.ndim}-d and {w.ndim}-d"
            )
        n, c, h, wd = x.shape
        f, cw, kh, kw = w.shape
        if kh != kw:
            raise ShapeError(f"deform_conv2d requires a square kernel, got {kh}x{kw}")
        if c != cw:
            raise ShapeError(
                f"deform_conv2d: input channel axis has size {c}, weight expects {cw}"
            )
        g = offset_groups
        if c % g:
            raise ShapeError(f"offset group count {g} does not divide {c} channels")
        oh = ops.conv_output_size(h, kh, stride, padding)
        ow = ops.conv_output_size(wd, kw, stride, padding)
        k2 = kh * kw
        if offsets.shape != (n, 2 * k2 * g, oh, ow):
            raise ShapeError(
                f"offset field must be {(n, 2 * k2 * g, oh, ow)}, got {offsets.shape}"
            )
        dy, dx = split_offset_field(offsets, kh, g)

        # Base sampling grid of the rigid kernel, [K, oh, ow].
        ky, kx = np.divmod(np.arange(k2), kw)
        base_y = (
            np.arange(oh)[None, :, None] * stride - padding + ky[:, None, None]
        ).astype(np.float64)
        base_x = (
            np.arange(ow)[None, None, :] * stride - padding + kx[:, None, None]
        ).astype(np.float64)
        py = base_y[None, None] + dy  # [N, G, K, oh, ow]
        px = base_x[None, None] + dx

        corners, ty, tx = _bilinear_corners(py, px, h, wd)
        cg = c // g
        xf = x.reshape(n, g, cg, h * wd)
        ell = oh * ow
        vals = []
        sampled = np.zeros((n, g, cg, k2, ell))
        for yy, xx, wt, m in corners:
            lin = (np.clip(yy, 0, h - 1) * wd + np.clip(xx, 0, wd - 1)).reshape(
                n, g, 1, k2 * ell
            )
            v = np.take_along_axis(xf, lin, axis=3).reshape(n, g, cg, k2, ell)
            v = v * m.reshape(n, g, 1, k2, ell)
            vals.append(v)
            sampled += wt.reshape(n, g, 1, k2, ell) * v

        # Column layout identical to the rigid conv: [N, C*K, L].
        cols = sampled.reshape(n, c, k2, ell).reshape(n, c * k2, ell)
        out = np.tensordot(w.reshape(f, -1), cols, axes=([1], [1]))
        out = out.transpose(1, 0, 2).reshape(n, f, oh, ow)
        if b is not None:
            out = out + b[None, :, None, None]
        self.cache = (x.shape, w, cols, corners, ty, tx, vals, stride, padding, g, oh, ow)
        self.has_bias = b is not None
        return out

    def backward(self, grad):
        x_shape, w, cols, corners, ty, tx, vals, stride, padding, g, oh, ow = self.cache
        n, c, h, wd = x_shape
        f = w.shape[0]
        kh, kw = w.shape[2], w.shape[3]
        k2 = kh * kw
        cg = c // g
        ell = oh * ow

        g2 = grad.reshape(n, f, ell)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.tensordot(w.reshape(f, -1), g2, axes=([0], [1])).transpose(1, 0, 2)
        gs = gcols.reshape(n, g, cg, k2, ell)

        # Scatter value gradients back through the four bilinear corners.
        gxf = np.zeros(n * g * cg * h * wd)
        base = (
            (np.arange(n)[:, None, None] * g + np.arange(g)[None, :, None]) * cg
            + np.arange(cg)[None, None, :]
        ) * (h * wd)
        for (yy, xx, wt, m) in corners:
            lin = (np.clip(yy, 0, h - 1) * wd + np.clip(xx, 0, wd - 1)) * m
            contrib = gs * (wt * m).reshape(n, g, 1, k2, ell)
            idx = base[:, :, :, None, None] + lin.reshape(n, g, 1, k2, ell)
            idx = np.broadcast_to(idx, contrib.shape)
            gxf += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=gxf.size)
        gx = gxf.reshape(x_shape)

        # Coordinate gradients: derivative of the interpolant w.r.t. the
        # sampling point, contracted over the channels of each group.
        v00, v01, v10, v11 = vals
        tx_b = tx.reshape(n, g, 1, k2, ell)
        ty_b = ty.reshape(n, g, 1, k2, ell)
        dvdy = (1.0 - tx_b) * (v10 - v00) + tx_b * (v11 - v01)
        dvdx = (1.0 - ty_b) * (v01 - v00) + ty_b * (v11 - v10)
        g_dy = (gs * dvdy).sum(axis=2).reshape(n, g, k2, oh, ow)
        g_dx = (gs * dvdx).sum(axis=2).reshape(n, g, k2, oh, ow)
        goff = np.stack([g_dy, g_dx], axis=3).reshape(n, 2 * k2 * g, oh, ow)

        gb = grad.sum(axis=(0, 2, 3)) if self.has_bias else None
        return gx, goff, gw, gb


def deform_conv2d(
    x,
    offsets,
    weight,
    bias=None,
    stride: int = 1,
    padding: int = 0,
    offset_groups: int = 1,
) -> Tensor:
    """Convolution whose taps are displaced by a given offset field."""
    if bias is None:
        return _DeformConv2d.apply(
            x, offsets, weight, stride=stride, padding=padding, offset_groups=offset_groups
        )
    return _DeformConv2d.apply(
        x, offsets, weight, bias, stride=stride, padding=padding, offset_groups=offset_groups
    )


class DeformableConv2d(Module):
    """Deformable convolution layer with a zero-initialized offset branch.

    The offset-predicting convolution shares the main convolution's kernel
    size, stride and padding so the two produce aligned spatial maps. Its
    weights and bias start at zero, which makes a freshly built (or
    freshly converted) layer compute exactly what a rigid convolution
    would, and lets training bend the sampling grid away from that point.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        offset_groups: int = 1,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        if in_channels % offset_groups:
            raise ConfigError(
                f"offset group count {offset_groups} does not divide {in_channels} channels"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.offset_groups = offset_groups
        main = Conv2d(
            in_channels, out_channels, kernel_size, stride, padding, bias=bias, rng=rng
        )
        self.weight = main.weight
        self.bias = main.bias if bias else None
        self.offset_conv = Conv2d(
            in_channels,
            offset_channel_count(kernel_size, offset_groups),
            kernel_size,
            stride,
            padding,
            bias=True,
            rng=rng,
        )
        self.offset_conv.weight.data[:] = 0.0
        self.offset_conv.bias.data[:] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        offsets = self.offset_conv(x)
        return deform_conv2d(
            x,
            offsets,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            offset_groups=self.offset_groups,
        )


def convert_conv_to_deformable(
    conv: Conv2d, offset_groups: int, strict_groups: bool = False
) -> DeformableConv2d:
    """Rebuild a trained rigid convolution as a deformable one.

    The main kernel and bias are copied verbatim and the offset branch is
    zero, so the converted layer is function-preserving until trained
    further. ``offset_groups`` falls back to the largest divisor of the
    layer's input channels unless ``strict_groups`` is set.
    """
    g = offset_groups
    if conv.in_channels % g:
        if strict_groups:
            raise ConfigError(
                f"offset group count {g} does not divide {conv.in_channels} channels"
            )
        g = resolve_offset_groups(conv.in_channels, g)
    layer = DeformableConv2d(
        conv.in_channels,
        conv.out_channels,
        conv.kernel_size,
        conv.stride,
        conv.padding,
        bias=conv.bias is not None,
        offset_groups=g,
        rng=np.random.default_rng(0),
    )
    layer.weight.data[:] = conv.weight.data
    if conv.bias is not None:
        layer.bias.data[:] = conv.bias.data
    return layer
