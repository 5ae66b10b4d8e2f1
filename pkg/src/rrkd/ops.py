"""Differentiable operations on :class:`~rrkd.tensor.Tensor`.

Feature maps are N x C x H x W; convolution kernels are O x C x Kh x Kw.
No implicit broadcasting: binary ops require identical shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor, make_output

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _need(t: Tensor) -> bool:
    return t.requires_grad


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------- conv


def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"conv2d: kernel extent {k} does not fit input extent {size} with pad {pad}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} has {x.shape[1]} channels, kernel {w.shape} expects {w.shape[1]}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / pad {pad}")
    n, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_extent(h, kh, stride, pad)
    wo = conv_output_extent(wd, kw, stride, pad)

    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    geometry = (x.shape, w.shape, stride, pad)
    need_x, need_w = _need(x), _need(w)

    def back(g):
        return _conv2d_backward(g, cols, wmat, geometry, need_x, need_w)

    return make_output(out, (x, w), back)


def _conv2d_backward(g, cols, wmat, geometry, need_x, need_w):
    x_shape, w_shape, stride, pad = geometry
    o, _, kh, kw = w_shape
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gx = gw = None
    if need_w:
        gw = (gmat.T @ cols).reshape(w_shape)
    if need_x:
        gx = kernels.col2im(gmat @ wmat, x_shape, kh, kw, stride, pad)
    return gx, gw


# ----------------------------------------------------------------- batchnorm


@dataclass
class BNStats:
    """Running per-channel statistics for batch normalization."""

    channels: int
    dtype: type = np.float32
    initialized: bool = True
    mean: Optional[np.ndarray] = field(default=None)
    var: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.initialized and self.mean is None:
            self.mean = np.zeros(self.channels, dtype=self.dtype)
            self.var = np.ones(self.channels, dtype=self.dtype)

    def update(self, batch_mean, batch_var_unbiased, momentum):
        if self.mean is None:
            self.mean = batch_mean.astype(self.dtype)
            self.var = batch_var_unbiased.astype(self.dtype)
            self.initialized = True
            return
        self.mean = ((1 - momentum) * self.mean + momentum * batch_mean).astype(self.dtype)
        self.var = ((1 - momentum) * self.var + momentum * batch_var_unbiased).astype(self.dtype)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BNStats, train: bool,
              eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"batchnorm: expected N x C x H x W input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or stats.channels != c:
        raise ShapeError(f"batchnorm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}, "
                         f"stats channels {stats.channels}")
    xd = x.data
    if train:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3))
        stats.update(mean, var * (m / max(m - 1, 1)), momentum)
    else:
        if not stats.initialized or stats.mean is None:
            raise ValueError("batchnorm: eval mode requested before any running statistics were recorded")
        mean, var = stats.mean, stats.var
        centered = xd - mean[None, :, None, None].astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    need_x, need_g, need_b = _need(x), _need(gamma), _need(beta)

    def back(g):
        gx = gg = gb = None
        if need_g:
            gg = np.sum(g * xhat, axis=(0, 2, 3))
        if need_b:
            gb = np.sum(g, axis=(0, 2, 3))
        if need_x:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if train:
                gsum = np.mean(g, axis=(0, 2, 3))[None, :, None, None]
                gxhat = np.mean(g * xhat, axis=(0, 2, 3))[None, :, None, None]
                gx = scale * (g - gsum - xhat * gxhat)
            else:
                gx = g * scale
        return gx, gg, gb

    return make_output(out, (x, gamma, beta), back)


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_output(x.data * mask, (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_output(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return make_output(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_output(a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_output(x * x, (a,), lambda g: (2 * g * x,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_output(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return make_output(np.asarray(a.data.sum(), dtype=dt).reshape(()), (a,),
                       lambda g: (np.full(shape, g, dtype=dt),))


# ----------------------------------------------------------------- reductions


def sum_channels(a: Tensor) -> Tensor:
    """N x C x H x W -> N x 1 x H x W."""
    if a.ndim != 4:
        raise ShapeError(f"sum_channels: expected N x C x H x W, got {a.shape}")
    c = a.shape[1]
    return make_output(a.data.sum(axis=1, keepdims=True), (a,),
                       lambda g: (np.repeat(g, c, axis=1),))


def l2_normalize(a: Tensor) -> Tensor:
    """Flatten each sample and scale it to unit L2 norm; all-zero rows stay zero (gradient 0)."""
    if a.ndim < 1 or a.shape[0] == 0:
        raise ShapeError(f"l2_normalize: expected a batch, got {a.shape}")
    n, in_shape = a.shape[0], a.shape
    flat = a.data.reshape(n, -1)
    norm = np.sqrt(np.sum(flat * flat, axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1)
    live = (norm > 0).astype(flat.dtype)
    y = flat / safe * live

    def back(g):
        proj = np.sum(g * y, axis=1, keepdims=True)
        return (((g - y * proj) / safe * live).reshape(in_shape),)

    return make_output(y, (a,), back)


def global_avg_pool(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected N x C x H x W, got {a.shape}")
    n, c, h, w = a.shape
    inv = a.dtype.type(1.0 / (h * w))

    def back(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).copy(),)

    return make_output(a.data.mean(axis=(2, 3)), (a,), back)


def linear(a: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """N x D times D x K plus bias K."""
    if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes input {a.shape}, weight {w.shape}, bias {b.shape}")
    x, wd = a.data, w.data

    def back(g):
        return (g @ wd.T if _need(a) else None,
                x.T @ g if _need(w) else None,
                g.sum(axis=0) if _need(b) else None)

    return make_output(x @ wd + b.data, (a, w, b), back)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label], stabilized by max subtraction."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected N x K logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {n} logits rows but labels shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return make_output(np.asarray(loss, dtype=logits.dtype).reshape(()), (logits,), back)
