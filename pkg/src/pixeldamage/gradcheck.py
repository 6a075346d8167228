"""Finite-difference verification of every backward pass (float64)."""

from __future__ import annotations

import numpy as np

from . import layers as L
from .tensor import RngState, relu, relu_backward, upsample, upsample_backward
from .training import LossConfig, loss

STEP = 1e-5
TOLERANCE = 1e-4


def numerical_gradient(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i| + |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor))) if a.size else 0.0


def _separated(gen, shape, gap=0.05):
    """Random values with pairwise gaps >= ``gap`` and none near 0, keeping kinks out of reach of the FD step."""
    n = int(np.prod(shape))
    vals = (gen.permutation(n) - n / 2 + 0.5) * gap * 2 + gen.uniform(-gap / 2, gap / 2, n)
    return vals.reshape(shape)


def _dims(gen, lo=1, hi=4):
    return int(gen.integers(lo, hi + 1))


def check_conv2d(gen):
    n, c, o = _dims(gen), _dims(gen), _dims(gen)
    h, w = _dims(gen, 2), _dims(gen, 2)
    k = 3
    x = gen.normal(size=(n, c, h, w))
    p = L.ConvParams(gen.normal(size=(o, c, k, k)), gen.normal(size=o))
    r = gen.normal(size=(n, o, h, w))
    f = lambda: float(np.sum(L.conv2d(x, p) * r))
    dx, dw, db = L.conv2d_backward(r, x, p)
    return max(relative_error(dx, numerical_gradient(f, x)),
               relative_error(dw, numerical_gradient(f, p.weights)),
               relative_error(db, numerical_gradient(f, p.bias)))


def check_maxpool2(gen):
    shape = (_dims(gen), _dims(gen), 2 * _dims(gen, 1, 2), 2 * _dims(gen, 1, 2))
    x = _separated(gen, shape)
    r = gen.normal(size=(shape[0], shape[1], shape[2] // 2, shape[3] // 2))
    f = lambda: float(np.sum(L.maxpool2(x)[0] * r))
    _, idx = L.maxpool2(x)
    return relative_error(L.maxpool2_backward(r, idx), numerical_gradient(f, x))


def check_batchnorm(gen):
    n, c, h, w = _dims(gen, 2), _dims(gen), _dims(gen), _dims(gen)
    x = gen.normal(size=(n, c, h, w)) * gen.uniform(0.5, 2) + gen.normal()
    gamma, beta = gen.normal(size=c), gen.normal(size=c)
    r = gen.normal(size=x.shape)

    def params():
        return L.BatchNormParams(gamma, beta, np.zeros(c), np.ones(c))

    f = lambda: float(np.sum(L.batchnorm(x, params(), L.TRAIN)[0] * r))
    _, cache = L.batchnorm(x, params(), L.TRAIN)
    dx, dg, db = L.batchnorm_backward(r, cache, params())
    return max(relative_error(dx, numerical_gradient(f, x)),
               relative_error(dg, numerical_gradient(f, gamma)),
               relative_error(db, numerical_gradient(f, beta)))


def check_dropout(gen):
    shape = (_dims(gen), _dims(gen), _dims(gen), _dims(gen))
    x = gen.normal(size=shape)
    rng = RngState(int(gen.integers(2**63)))
    _, mask = L.dropout(x, 0.85, L.TRAIN, rng.copy())
    r = gen.normal(size=shape)
    # the mask is held fixed: replay the same stream position on every evaluation
    f = lambda: float(np.sum(L.dropout(x, 0.85, L.TRAIN, rng.copy())[0] * r))
    return relative_error(L.dropout_backward(r, mask), numerical_gradient(f, x))


def check_dense_per_pixel(gen):
    n, c, o, h, w = _dims(gen), _dims(gen), _dims(gen), _dims(gen), _dims(gen)
    x = gen.normal(size=(n, c, h, w))
    p = L.DenseParams(gen.normal(size=(o, c)), gen.normal(size=o))
    r = gen.normal(size=(n, o, h, w))
    f = lambda: float(np.sum(L.dense_per_pixel(x, p) * r))
    dx, dw, db = L.dense_per_pixel_backward(r, x, p)
    return max(relative_error(dx, numerical_gradient(f, x)),
               relative_error(dw, numerical_gradient(f, p.weights)),
               relative_error(db, numerical_gradient(f, p.bias)))


def check_residual_add(gen):
    n, c, h, w = _dims(gen), _dims(gen), _dims(gen), _dims(gen)
    cs = _dims(gen, 1, c)
    x = gen.normal(size=(n, c, h, w))
    s = gen.normal(size=(n, cs, h, w))
    r = gen.normal(size=x.shape)
    f = lambda: float(np.sum(L.residual_add(x, s) * r))
    dx, ds = L.residual_add_backward(r, cs)
    return max(relative_error(dx, numerical_gradient(f, x)), relative_error(ds, numerical_gradient(f, s)))


def check_softmax_cross_entropy(gen):
    n, h, w = _dims(gen), _dims(gen), _dims(gen)
    c = int(gen.choice([2, 7]))
    z = gen.normal(size=(n, c, h, w)) * 2
    labels = gen.integers(0, c, size=(n, h, w))
    cfg = LossConfig(float(gen.uniform(0, 0.01)), gen.uniform(0.2, 3, size=c), c)
    weights = {"a.weight": gen.normal(size=(3, 2)), "b.weight": gen.normal(size=(2, 2, 3, 3))}
    f = lambda: loss(L.softmax_per_pixel(z), labels, cfg, weights)[0]
    _, dz, dw = loss(L.softmax_per_pixel(z), labels, cfg, weights)
    errs = [relative_error(dz, numerical_gradient(f, z))]
    errs += [relative_error(dw[k], numerical_gradient(f, weights[k])) for k in weights]
    return max(errs)


def check_upsample(gen):
    factor = int(gen.integers(1, 4))
    x = gen.normal(size=(_dims(gen), _dims(gen), _dims(gen, 1, 2), _dims(gen, 1, 2)))
    r = gen.normal(size=x.shape[:2] + (x.shape[2] * factor, x.shape[3] * factor))
    f = lambda: float(np.sum(upsample(x, factor) * r))
    return relative_error(upsample_backward(r, factor), numerical_gradient(f, x))


def check_relu(gen):
    shape = (_dims(gen), _dims(gen), _dims(gen), _dims(gen))
    x = _separated(gen, shape)
    r = gen.normal(size=shape)
    f = lambda: float(np.sum(relu(x) * r))
    return relative_error(relu_backward(x, r), numerical_gradient(f, x))


CHECKS = {
    "conv2d": check_conv2d,
    "maxpool2": check_maxpool2,
    "batchnorm": check_batchnorm,
    "dropout": check_dropout,
    "dense_per_pixel": check_dense_per_pixel,
    "residual_add": check_residual_add,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "upsample": check_upsample,
    "relu": check_relu,
}


def run(trials: int = 100, seed: int = 0, ops=None) -> dict:
    """Worst relative error per op over ``trials`` random cases."""
    out = {}
    for i, (name, check) in enumerate(CHECKS.items()):
        if ops and name not in ops:
            continue
        gen = RngState(seed).split(i).generator()
        out[name] = max(check(gen) for _ in range(trials))
    return out
