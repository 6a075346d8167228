"""Dense NCHW array helpers and the counter-based random source.

Tensors are plain ``numpy.ndarray`` objects.  Training and inference use
float32; gradient checking runs the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32

_debug = False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message}: " + " vs ".join(str(s) for s in self.shapes)
        super().__init__(message)


class NumericError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a checked buffer."""


def set_debug(enabled: bool) -> None:
    """Turn NaN/Inf checking of every public op result on or off."""
    global _debug
    _debug = bool(enabled)


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")
    return x


def _out(x, where):
    if _debug:
        check_finite(x, where)
    return x


def _require_shape(a, b, op):
    if np.ndim(b) == 0:
        return
    if a.shape != np.shape(b):
        raise ShapeError(f"{op}: shape mismatch", a.shape, np.shape(b))


def relu(x):
    return _out(np.maximum(x, 0), "relu")


def relu_backward(x, upstream):
    """Pass ``upstream`` through where the forward input was positive."""
    _require_shape(x, upstream, "relu_backward")
    return _out(np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False), "relu_backward")


def elementwise(op: str, a: np.ndarray, b=None) -> np.ndarray:
    """Apply one of ``add, sub, mul, scale, relu, relu_backward``.

    For ``relu_backward`` ``a`` is the forward input and ``b`` the upstream
    gradient.  ``b`` may be a scalar for the arithmetic ops.
    """
    a = np.asarray(a)
    if a.ndim == 0:
        raise ShapeError("zero-dimensional tensors are not allowed")
    if op == "relu":
        return relu(a)
    if op == "relu_backward":
        return relu_backward(a, np.asarray(b))
    if b is None:
        raise ValueError(f"{op} needs a second operand")
    _require_shape(a, b, op)
    if op == "add":
        r = a + b
    elif op == "sub":
        r = a - b
    elif op in ("mul", "scale"):
        r = a * b
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _out(r.astype(a.dtype, copy=False), op)


def upsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling of the two trailing axes."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def upsample_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    """Sum each ``factor x factor`` block of ``grad``."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return grad
    *lead, h, w = grad.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial dims not divisible by {factor}", grad.shape)
    g = grad.reshape(*lead, h // factor, factor, w // factor, factor)
    return g.sum(axis=(-3, -1))


def mean_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Mean of each ``factor x factor`` block.

    Averaged as offsets from the block's first element, so constant blocks
    (anything produced by ``upsample``) come back exactly.
    """
    first = x[..., ::factor, ::factor]
    return first + upsample_backward(x - upsample(first, factor), factor) / (factor * factor)


@dataclass
class RngState:
    """Counter-based generator: draw ``k`` of a stream uses Philox counter block ``k``.

    The same ``(seed, position)`` always yields the same next draw.  Every
    draw advances ``position`` by one regardless of how many numbers it
    consumed.
    """

    seed: int
    position: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) % 2**64
        self.position = int(self.position)

    def generator(self) -> np.random.Generator:
        """Generator for the next draw; advances the stream."""
        bitgen = np.random.Philox(key=self.seed, counter=self.position << 128)
        self.position += 1
        return np.random.Generator(bitgen)

    def split(self, index: int) -> "RngState":
        """Independent sub-stream ``index``; does not advance this stream."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(index),))
        return RngState(int(ss.generate_state(1, np.uint64)[0]))

    def copy(self) -> "RngState":
        return RngState(self.seed, self.position)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "position": self.position}

    @classmethod
    def from_dict(cls, d) -> "RngState":
        return cls(d["seed"], d["position"])


def draw(rng: RngState, dist: str, shape, dtype=DTYPE, **params) -> np.ndarray:
    """Sample ``shape`` values from ``uniform(a, b)``, ``normal(mu, sigma)`` or ``bernoulli(p)``."""
    if dist == "uniform":
        a, b = params.get("a", 0.0), params.get("b", 1.0)
        if not b >= a:
            raise ValueError(f"uniform needs a <= b, got ({a}, {b})")
        out = rng.generator().uniform(a, b, size=shape)
    elif dist == "normal":
        mu, sigma = params.get("mu", 0.0), params.get("sigma", 1.0)
        if sigma < 0:
            raise ValueError(f"normal sigma must be >= 0, got {sigma}")
        out = rng.generator().normal(mu, sigma, size=shape)
    elif dist == "bernoulli":
        p = params["p"]
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"bernoulli p must lie in [0, 1], got {p}")
        out = rng.generator().random(size=shape, dtype=np.float32) < np.float32(p)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return np.asarray(out, dtype=dtype)
