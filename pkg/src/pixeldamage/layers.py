"""Differentiable layer primitives on NCHW arrays.

Each forward function returns its output plus whatever the matching
``*_backward`` needs.  Nothing here holds state between calls, so one set of
parameters can be applied to several inputs (the pyramid scales) and each
call keeps its own cache.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import RngState, ShapeError, draw

TRAIN = "train"
EVAL = "eval"


@dataclass
class ConvParams:
    weights: np.ndarray  # (outC, inC, kH, kW)
    bias: np.ndarray  # (outC,)

    def __post_init__(self):
        o, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("convolution kernels must have odd size", self.weights.shape)
        if self.bias.shape != (o,):
            raise ShapeError("bias length must equal output channels", self.bias.shape, (o,))


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batch-norm epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("batch-norm momentum must lie in (0, 1)")


@dataclass
class DenseParams:
    weights: np.ndarray  # (outDim, inDim)
    bias: np.ndarray  # (outDim,)


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}, got {mode!r}")


# --- convolution -----------------------------------------------------------

_scratch = {}


def _buffer(key, shape, dtype):
    """Reusable work array; avoids page-faulting a fresh multi-MB allocation per call."""
    size = int(np.prod(shape))
    buf = _scratch.get((key, np.dtype(dtype)))
    if buf is None or buf.size < size:
        buf = np.empty(size, dtype)
        _scratch[(key, np.dtype(dtype))] = buf
    return buf[:size].reshape(shape)


def _padded_windows(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))  # N C H W k k


def _im2col_t(x, k):
    """Patch matrix for a same-padded k x k kernel, laid out (C*k*k, N*H*W).

    This layout copies whole image rows, which is much cheaper than the
    row-per-pixel layout.  The result lives in a shared scratch buffer and is
    only valid until the next call.
    """
    n, c, h, w = x.shape
    out = _buffer("cols", (c, k, k, n, h, w), x.dtype)
    np.copyto(out, _padded_windows(x, k).transpose(1, 4, 5, 0, 2, 3))
    return out.reshape(c * k * k, n * h * w)


def _conv_same(x, w):
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError("conv2d: input channels do not match weights", x.shape, w.shape)
    if kh != kw:
        raise ShapeError("conv2d: only square kernels are supported", w.shape)
    out = _im2col_t(x, kh).T @ w.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2))


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Stride-1 convolution with zero "same" padding (cross-correlation form)."""
    out = _conv_same(x, p.weights)
    out += p.bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(dy, x, p: ConvParams, need_dx=True):
    """Gradients with respect to ``x``, the weights and the bias."""
    w = p.weights
    o, c, k, _ = w.shape
    db = dy.sum(axis=(0, 2, 3))
    dy_rows = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (_im2col_t(x, k) @ dy_rows).T.reshape(w.shape)
    dx = None
    if need_dx:
        # correlation of dy with the spatially flipped, channel-transposed kernel
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx = _conv_same(dy, w_flip)
    return dx, dw, db


# --- pooling ---------------------------------------------------------------

def maxpool2(x: np.ndarray):
    """2x2 max pooling, stride 2.  Returns the output and the in-window argmax (0..3)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("maxpool2 needs even spatial dims", x.shape)
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first occurrence in row-major window order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.uint8)


def maxpool2_backward(dy, idx):
    n, c, h2, w2 = dy.shape
    onehot = idx[..., None] == np.arange(4, dtype=np.uint8)
    dwin = onehot * dy[..., None]
    return dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


# --- batch normalization ---------------------------------------------------

def batchnorm(x, p: BatchNormParams, mode: str):
    """Per-channel normalization over (N, H, W).

    In train mode the batch statistics are used and ``p.running_mean`` /
    ``p.running_var`` are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    _check_mode(mode)
    if mode == TRAIN:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean.reshape(1, -1, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + p.eps)
        xhat = xc * inv_std.reshape(1, -1, 1, 1)
        m = p.momentum
        # unbiased batch variance feeds the running estimate
        count = x.size // x.shape[1]
        p.running_mean[...] = m * p.running_mean + (1 - m) * mean
        p.running_var[...] = m * p.running_var + (1 - m) * var * (count / max(count - 1, 1))
        cache = (xhat, inv_std)
    else:
        inv_std = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x - p.running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        cache = (xhat, inv_std, EVAL)
    out = xhat * p.gamma.reshape(1, -1, 1, 1) + p.beta.reshape(1, -1, 1, 1)
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(dy, cache, p: BatchNormParams):
    xhat, inv_std = cache[0], cache[1]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * p.gamma.reshape(1, -1, 1, 1)
    if len(cache) == 3:  # eval mode: affine in x
        return dxhat * inv_std.reshape(1, -1, 1, 1), dgamma, dbeta
    m = dy.size // dy.shape[1]
    mean_dxhat = dxhat.sum(axis=(0, 2, 3)) / m
    mean_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)) / m
    dx = (dxhat - mean_dxhat.reshape(1, -1, 1, 1) - xhat * mean_dxhat_xhat.reshape(1, -1, 1, 1))
    dx *= inv_std.reshape(1, -1, 1, 1)
    return dx, dgamma, dbeta


# --- dropout ---------------------------------------------------------------

def dropout(x, keep_prob: float, mode: str, rng: RngState | None = None):
    """Inverted dropout.  Returns the output and the scaled mask (None when inactive)."""
    _check_mode(mode)
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if mode == EVAL or keep_prob == 1:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs an RngState")
    mask = draw(rng, "bernoulli", x.shape, dtype=x.dtype, p=keep_prob)
    mask /= x.dtype.type(keep_prob)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


# --- per-pixel dense -------------------------------------------------------

def dense_per_pixel(x, p: DenseParams):
    """Apply the same affine map to the channel vector at every pixel."""
    n, c, h, w = x.shape
    out_dim, in_dim = p.weights.shape
    if c != in_dim:
        raise ShapeError("dense_per_pixel: channel count does not match weights", x.shape, p.weights.shape)
    y = np.matmul(p.weights, x.reshape(n, c, h * w))
    y += p.bias.reshape(1, -1, 1)
    return y.reshape(n, out_dim, h, w)


def dense_per_pixel_backward(dy, x, p: DenseParams, need_dx=True):
    n, c, h, w = x.shape
    o = dy.shape[1]
    dy3 = dy.reshape(n, o, h * w)
    x3 = x.reshape(n, c, h * w)
    dw = np.matmul(dy3, x3.transpose(0, 2, 1)).sum(axis=0)
    db = dy3.sum(axis=(0, 2))
    dx = np.matmul(p.weights.T, dy3).reshape(n, c, h, w) if need_dx else None
    return dx, dw, db


# --- residual shortcut -----------------------------------------------------

def residual_add(x, shortcut):
    """``x + shortcut``, zero-padding the shortcut's channels when it has fewer."""
    if x.shape[0] != shortcut.shape[0] or x.shape[2:] != shortcut.shape[2:]:
        raise ShapeError("residual_add: batch/spatial mismatch", x.shape, shortcut.shape)
    cs = shortcut.shape[1]
    if cs > x.shape[1]:
        raise ShapeError("residual_add: shortcut has more channels than the body", x.shape, shortcut.shape)
    out = x.copy()
    out[:, :cs] += shortcut
    return out


def residual_add_backward(dy, shortcut_channels):
    """Returns (d body, d shortcut)."""
    return dy, dy[:, :shortcut_channels]


# --- softmax ---------------------------------------------------------------

def softmax_per_pixel(logits):
    if logits.shape[1] < 2:
        raise ShapeError("softmax needs at least 2 channels", logits.shape)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
