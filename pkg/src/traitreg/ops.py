"""Differentiable tensor operations.

Every public function builds a graph node via ``Function.apply`` so the
result can be differentiated with ``Tensor.backward()``. Convolution uses
an im2col layout internally (strided window view plus one matrix
product); its gradients are checked against a naive loop oracle and
finite differences in the test suite.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .autograd import Function, Tensor, as_tensor, unbroadcast
from .errors import ShapeError

# ---------------------------------------------------------------------------
# elementwise arithmetic


class _Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class _Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad * self.b, a.shape), unbroadcast(grad * self.a, b.shape)


class _Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


class _Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class _Pow(Function):
    def forward(self, a, *, exponent):
        self.a = a
        self.exponent = exponent
        return a**exponent

    def backward(self, grad):
        p = self.exponent
        return (grad * p * self.a ** (p - 1),)


def add(a, b) -> Tensor:
    return _Add.apply(a, b)


def sub(a, b) -> Tensor:
    return _Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return _Mul.apply(a, b)


def div(a, b) -> Tensor:
    return _Div.apply(a, b)


def neg(a) -> Tensor:
    return _Neg.apply(a)


def pow(a, exponent: float) -> Tensor:
    if not isinstance(exponent, (int, float)):
        raise ShapeError("pow exponent must be a plain number")
    return _Pow.apply(a, exponent=float(exponent))


# ---------------------------------------------------------------------------
# reductions and shape ops


class _Sum(Function):
    def forward(self, a, *, axis, keepdims):
        self.in_shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        g = grad
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            for ax in sorted(a % len(self.in_shape) for a in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class _Reshape(Function):
    def forward(self, a, *, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    return _Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    return _Reshape.apply(a, shape=tuple(shape))


class _Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        first = arrays[0]
        for i, arr in enumerate(arrays[1:], start=1):
            if arr.ndim != first.ndim:
                raise ShapeError(
                    f"concat: input 0 has {first.ndim} dims, input {i} has {arr.ndim}"
                )
            for ax in range(first.ndim):
                if ax != axis % first.ndim and arr.shape[ax] != first.shape[ax]:
                    raise ShapeError(
                        f"concat: axis {ax} differs between input 0 "
                        f"(size {first.shape[ax]}) and input {i} (size {arr.shape[ax]})"
                    )
        self.sizes = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    if len(tensors) == 0:
        raise ShapeError("concat requires at least one tensor")
    return _Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# activations


class _Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


def relu(a) -> Tensor:
    return _Relu.apply(a)


# ---------------------------------------------------------------------------
# linear algebra


class _MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-d operands, got {a.ndim}-d and {b.ndim}-d")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"matmul: inner axes disagree ({a.shape[1]} vs {b.shape[0]})"
            )
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


def matmul(a, b) -> Tensor:
    return _MatMul.apply(a, b)


class _Linear(Function):
    def forward(self, x, w, b=None):
        if x.ndim != 2 or w.ndim != 2:
            raise ShapeError(f"linear expects 2-d input and weight, got {x.ndim}-d and {w.ndim}-d")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"linear: feature axis of input is {x.shape[1]}, weight expects {w.shape[1]}"
            )
        self.x, self.w = x, w
        self.has_bias = b is not None
        out = x @ w.T
        if b is not None:
            out = out + b
        return out

    def backward(self, grad):
        gx = grad @ self.w
        gw = grad.T @ self.x
        gb = grad.sum(axis=0) if self.has_bias else None
        return gx, gw, gb


def linear(x, weight, bias=None) -> Tensor:
    if bias is None:
        return _Linear.apply(x, weight)
    return _Linear.apply(x, weight, bias)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"convolution window (kernel {kernel}, padding {padding}) does not fit "
            f"input extent {size}"
        )
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Window view of the padded input, copied to [N, C*kh*kw, oh*ow]."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    # For 1x1 kernels the reshape would be a strided view, and BLAS rounds
    # strided operands differently from contiguous ones; force the copy so
    # rigid and deformable columns feed tensordot identically laid out.
    return np.ascontiguousarray(windows.reshape(n, c * kh * kw, oh * ow))


def _col2im(
    cols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int, oh: int, ow: int
) -> np.ndarray:
    """Scatter-add column gradients back onto the padded input layout."""
    n, c, hp, wp = xp_shape
    gxp = np.zeros(xp_shape)
    gc = cols.reshape(n, c, kh, kw, oh, ow)
    for a in range(kh):
        for b in range(kw):
            gxp[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride] += gc[
                :, :, a, b
            ]
    return gxp


class _Conv2d(Function):
    def forward(self, x, w, b=None, *, stride=1, padding=0):
        if x.ndim != 4:
            raise ShapeError(f"conv2d input must be [N,C,H,W], got {x.ndim}-d")
        if w.ndim != 4:
            raise ShapeError(f"conv2d weight must be [F,C,kH,kW], got {w.ndim}-d")
        n, c, h, wd = x.shape
        f, cw, kh, kw = w.shape
        if c != cw:
            raise ShapeError(
                f"conv2d: input channel axis has size {c}, weight expects {cw}"
            )
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv2d: invalid stride {stride} or padding {padding}")
        oh = conv_output_size(h, kh, stride, padding)
        ow = conv_output_size(wd, kw, stride, padding)
        if padding:
            xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
            xp[:, :, padding : padding + h, padding : padding + wd] = x
        else:
            xp = x
        cols = _im2col(xp, kh, kw, stride, oh, ow)
        out = np.tensordot(w.reshape(f, -1), cols, axes=([1], [1]))  # [F, N, L]
        out = out.transpose(1, 0, 2).reshape(n, f, oh, ow)
        if b is not None:
            if b.shape != (f,):
                raise ShapeError(f"conv2d: bias axis must have size {f}, got {b.shape}")
            out = out + b[None, :, None, None]
        self.cols = cols
        self.w = w
        self.has_bias = b is not None
        self.geom = (xp.shape, x.shape, kh, kw, stride, padding, oh, ow)
        return out

    def backward(self, grad):
        xp_shape, x_shape, kh, kw, stride, padding, oh, ow = self.geom
        n, f = grad.shape[:2]
        g2 = grad.reshape(n, f, oh * ow)
        gw = np.tensordot(g2, self.cols, axes=([0, 2], [0, 2])).reshape(self.w.shape)
        gcols = np.tensordot(self.w.reshape(f, -1), g2, axes=([0], [1]))  # [CKK, N, L]
        gcols = gcols.transpose(1, 0, 2)
        gxp = _col2im(gcols, xp_shape, kh, kw, stride, oh, ow)
        if padding:
            h, wd = x_shape[2], x_shape[3]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        else:
            gx = gxp
        gb = grad.sum(axis=(0, 2, 3)) if self.has_bias else None
        return gx, gw, gb


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Standard 2-d convolution (cross-correlation) with zero padding."""
    if bias is None:
        return _Conv2d.apply(x, weight, stride=stride, padding=padding)
    return _Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# pooling


class _MaxPool2d(Function):
    def forward(self, x, *, kernel, stride, padding):
        n, c, h, w = x.shape
        if kernel > h + 2 * padding or kernel > w + 2 * padding:
            raise ShapeError(
                f"max_pool2d: window {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
            )
        oh = conv_output_size(h, kernel, stride, padding)
        ow = conv_output_size(w, kernel, stride, padding)
        hp, wp = h + 2 * padding, w + 2 * padding
        if padding:
            xp = np.full((n, c, hp, wp), -np.inf)
            xp[:, :, padding : padding + h, padding : padding + w] = x
        else:
            xp = x
        sn, sc, sh, sw = xp.strides
        windows = np.lib.stride_tricks.as_strided(
            xp,
            shape=(n, c, oh, ow, kernel, kernel),
            strides=(sn, sc, stride * sh, stride * sw, sh, sw),
            writeable=False,
        ).reshape(n, c, oh, ow, kernel * kernel)
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        self.geom = (x.shape, (n, c, hp, wp), kernel, stride, padding, oh, ow)
        self.idx = idx
        return out

    def backward(self, grad):
        x_shape, xp_shape, kernel, stride, padding, oh, ow = self.geom
        n, c = x_shape[:2]
        gxp = np.zeros(xp_shape)
        win_y, win_x = self.idx // kernel, self.idx % kernel
        out_y = np.arange(oh)[None, None, :, None] * stride
        out_x = np.arange(ow)[None, None, None, :] * stride
        yy = out_y + win_y
        xx = out_x + win_x
        n_idx = np.arange(n)[:, None, None, None]
        c_idx = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (n_idx, c_idx, yy, xx), grad)
        if padding:
            h, w = x_shape[2], x_shape[3]
            return (gxp[:, :, padding : padding + h, padding : padding + w],)
        return (gxp,)


def max_pool2d(x, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    if stride is None:
        stride = kernel
    return _MaxPool2d.apply(x, kernel=kernel, stride=stride, padding=padding)


class _GlobalAvgPool(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool input must be [N,C,H,W], got {x.ndim}-d")
        self.in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.in_shape
        g = grad[:, :, None, None] / (h * w)
        return (np.broadcast_to(g, self.in_shape).copy(),)


def global_avg_pool(x) -> Tensor:
    """Average over the spatial axes, returning [N, C]."""
    return _GlobalAvgPool.apply(x)


# ---------------------------------------------------------------------------
# batch normalization


class _BatchNorm2d(Function):
    def forward(self, x, gamma, beta, *, running_mean, running_var, training, momentum, eps):
        if x.ndim != 4:
            raise ShapeError(f"batchnorm2d input must be [N,C,H,W], got {x.ndim}-d")
        c = x.shape[1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(
                f"batchnorm2d: scale/shift must have size {c} on the channel axis"
            )
        if training:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            # Running statistics use the same biased variance; momentum is
            # the weight of the current batch.
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
        else:
            mu = running_mean
            var = running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
        self.xhat = xhat
        self.inv_std = inv_std
        self.gamma = gamma
        self.training = training
        return gamma[None, :, None, None] * xhat + beta[None, :, None, None]

    def backward(self, grad):
        xhat, inv_std, gamma = self.xhat, self.inv_std, self.gamma
        ggamma = (grad * xhat).sum(axis=(0, 2, 3))
        gbeta = grad.sum(axis=(0, 2, 3))
        ghat = grad * gamma[None, :, None, None]
        if self.training:
            mean_ghat = ghat.mean(axis=(0, 2, 3), keepdims=True)
            mean_ghat_xhat = (ghat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv_std[None, :, None, None] * (ghat - mean_ghat - xhat * mean_ghat_xhat)
        else:
            gx = ghat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over the channel axis.

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place; in eval mode the op is a pure
    affine transform of its input using the running buffers.
    """
    return _BatchNorm2d.apply(
        x,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
    )
