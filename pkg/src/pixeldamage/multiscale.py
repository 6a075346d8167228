"""Three-level Gaussian pyramid and fusion of per-scale trunk features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, upsample, upsample_backward

BINOMIAL_5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
SCALES = (1, 2, 4)
DIVISOR = 16


@dataclass
class Pyramid:
    levels: list  # scale 1, 1/2, 1/4

    def __post_init__(self):
        for a, b in zip(self.levels, self.levels[1:]):
            if b.shape[-2] * 2 != a.shape[-2] or b.shape[-1] * 2 != a.shape[-1]:
                raise ShapeError("pyramid levels must halve", a.shape, b.shape)


def check_divisible(h: int, w: int, divisor: int = DIVISOR) -> None:
    if h % divisor or w % divisor:
        raise ShapeError(f"image height and width must be divisible by {divisor}", (h, w))


def blur_decimate(x: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial blur with reflect padding, then keep every other row/column."""
    k = BINOMIAL_5.astype(x.dtype)
    pad = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, pad + [(2, 2), (0, 0)], mode="reflect")
    h = x.shape[-2]
    rows = sum(k[i] * xp[..., i:i + h:2, :] for i in range(5))
    rp = np.pad(rows, pad + [(0, 0), (2, 2)], mode="reflect")
    w = x.shape[-1]
    return sum(k[i] * rp[..., i:i + w:2] for i in range(5)).astype(x.dtype, copy=False)


def build_pyramid(image: np.ndarray, levels: int = 3) -> Pyramid:
    """Levels at scales 1, 1/2, 1/4 of an (N, 3, H, W) batch."""
    check_divisible(image.shape[-2], image.shape[-1])
    out = [image]
    for _ in range(levels - 1):
        out.append(blur_decimate(out[-1]))
    return Pyramid(out)


def fuse_scales(trunk_outputs, pool_factor: int) -> np.ndarray:
    """Restore each scale's trunk map to full input resolution and concatenate channels.

    Scale ``s`` output is upsampled by ``pool_factor * s`` (nearest neighbour),
    which equals restoring it to its own image size and then applying the
    cross-scale ``s``-fold upsampling.
    """
    return upsample(fuse_coarse(trunk_outputs), pool_factor)


def fuse_coarse(trunk_outputs) -> np.ndarray:
    """Concatenation at the scale-1 trunk resolution (``fuse_scales`` before its last upsampling)."""
    if len(trunk_outputs) != len(SCALES):
        raise ValueError(f"expected {len(SCALES)} trunk outputs, got {len(trunk_outputs)}")
    chans = {t.shape[1] for t in trunk_outputs}
    if len(chans) != 1:
        raise ShapeError("trunk outputs must share a channel count", *(t.shape for t in trunk_outputs))
    base = trunk_outputs[0].shape[2:]
    parts = []
    for s, t in zip(SCALES, trunk_outputs):
        if (t.shape[2] * s, t.shape[3] * s) != base:
            raise ShapeError(f"scale {s} trunk output has the wrong size", t.shape, base)
        parts.append(upsample(t, s))
    return np.concatenate(parts, axis=1)


def fuse_coarse_backward(grad: np.ndarray):
    c = grad.shape[1] // len(SCALES)
    return [upsample_backward(grad[:, i * c:(i + 1) * c], s) for i, s in enumerate(SCALES)]


def fuse_scales_backward(grad: np.ndarray, pool_factor: int):
    return fuse_coarse_backward(upsample_backward(grad, pool_factor))
