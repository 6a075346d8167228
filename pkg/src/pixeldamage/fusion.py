"""Combining segmenter and classifier outputs, confusion matrices, and overlays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES
from .tensor import ShapeError

# per damage class 1..6: cracks, spalls, exposed reinforcement, corrosion, fatigue cracks, asphalt cracks
DEFAULT_THRESHOLDS = (0.1, 0.4, 0.1, 0.5, 0.1, 0.5)
SEGMENTER_THRESHOLD = 0.5

PALETTE = np.array([
    (0, 0, 0),
    (230, 25, 75),  # concrete crack
    (60, 180, 75),  # spall
    (255, 225, 25),  # exposed reinforcement
    (245, 130, 48),  # corrosion
    (145, 30, 180),  # fatigue crack
    (70, 240, 240),  # asphalt crack
], dtype=np.uint8)


@dataclass
class FusionConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    segmenter_threshold: float = SEGMENTER_THRESHOLD

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if len(self.thresholds) != NUM_CLASSES - 1:
            raise ValueError(f"need {NUM_CLASSES - 1} damage-class thresholds, got {len(self.thresholds)}")

    def validate(self):
        """Check the (0, 1) range expected of user-facing configs."""
        for t in self.thresholds + (self.segmenter_threshold,):
            if not 0 < t < 1:
                raise ValueError(f"threshold {t} outside (0, 1)")
        return self

    def to_json(self):
        return {
            "thresholds": {CLASS_NAMES[c]: t for c, t in enumerate(self.thresholds, start=1)},
            "segmenter_threshold": self.segmenter_threshold,
        }


def fuse(classifier_probs, segmenter_probs, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Per-pixel combination of a (N, 7, H, W) classifier and a (N, 2, H, W) segmenter.

    A pixel is damage only if the segmenter's damage probability reaches its
    threshold.  Among damage classes whose classifier probability reaches the
    class threshold, the most probable wins (lowest id on ties); with none
    qualifying the pixel is class 0.
    """
    cp = np.asarray(classifier_probs)
    sp = np.asarray(segmenter_probs)
    if cp.ndim != 4 or cp.shape[1] != NUM_CLASSES or sp.ndim != 4 or sp.shape[1] != 2:
        raise ShapeError("fuse expects (N, 7, H, W) and (N, 2, H, W)", cp.shape, sp.shape)
    if cp.shape[0] != sp.shape[0] or cp.shape[2:] != sp.shape[2:]:
        raise ShapeError("classifier and segmenter maps differ in size", cp.shape, sp.shape)
    damage = cp[:, 1:]
    tau = np.asarray(cfg.thresholds, dtype=damage.dtype).reshape(1, -1, 1, 1)
    qualified = np.where(damage >= tau, damage, -np.inf)
    best = qualified.argmax(axis=1)  # argmax returns the first maximum
    any_q = np.isfinite(qualified).any(axis=1)
    veto = sp[:, 1] < cfg.segmenter_threshold
    return np.where(any_q & ~veto, best + 1, 0).astype(np.uint8)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows true, columns predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def normalized(self) -> np.ndarray:
        """Percent of all evaluated pixels per (true, predicted) cell."""
        return 100.0 * self.counts / max(self.total, 1)

    @property
    def row_normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return 100.0 * np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    @property
    def overall_accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))

    @property
    def per_class_accuracy(self) -> list:
        """Diagonal over row sums; None for classes with no true pixels."""
        rows = self.counts.sum(axis=1)
        return [float(self.counts[c, c] / rows[c]) if rows[c] else None for c in range(len(rows))]


def confusion(pred, true, num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(np.int64)
    true = np.asarray(true).astype(np.int64)
    if pred.shape != true.shape:
        raise ShapeError("predicted and true masks differ in shape", pred.shape, true.shape)
    for name, a in (("predicted", pred), ("true", true)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} label outside [0, {num_classes})")
    flat = true.ravel() * num_classes + pred.ravel()
    counts = np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return ConfusionMatrix(counts)


@dataclass
class Evaluation:
    matrix: ConfusionMatrix
    config: dict = field(default_factory=dict)

    @property
    def overall_accuracy(self):
        return self.matrix.overall_accuracy

    @property
    def per_class_accuracy(self):
        return self.matrix.per_class_accuracy

    def to_json(self) -> dict:
        c = self.matrix
        names = CLASS_NAMES if len(c.counts) == NUM_CLASSES else tuple(f"class {i}" for i in range(len(c.counts)))
        return {
            "classes": list(names),
            "counts": c.counts.tolist(),
            "normalized_percent": c.normalized.tolist(),
            "row_normalized_percent": c.row_normalized.tolist(),
            "per_class_accuracy": c.per_class_accuracy,
            "overall_accuracy": c.overall_accuracy,
            "total_pixels": c.total,
            "config": self.config,
        }


def evaluate(pred, true, num_classes: int = NUM_CLASSES, config: dict | None = None) -> Evaluation:
    return Evaluation(confusion(pred, true, num_classes), dict(config or {}))


REPORT_SCHEMA = {
    "type": "object",
    "required": ["classes", "counts", "normalized_percent", "row_normalized_percent",
                 "per_class_accuracy", "overall_accuracy", "total_pixels", "config"],
    "properties": {
        "classes": {"type": "array", "items": {"type": "string"}},
        "counts": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "normalized_percent": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "row_normalized_percent": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "per_class_accuracy": {"type": "array", "items": {"type": ["number", "null"]}},
        "overall_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "total_pixels": {"type": "integer", "minimum": 0},
        "config": {"type": "object"},
    },
}


def render_overlay(image, mask, alpha: float = 0.5, palette=PALETTE, legend: bool = True) -> np.ndarray:
    """Blend palette colours over damage pixels of an (H, W, 3) uint8 image.

    Class 0 pixels are left untouched.  With ``legend`` a strip of the six
    damage colours is appended below the image.
    """
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[2] != 3:
        img = img.transpose(1, 2, 0)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    mask = np.asarray(mask)
    if mask.shape != img.shape[:2]:
        raise ShapeError("mask does not match image", mask.shape, img.shape)
    out = img.astype(np.float64)
    hit = mask > 0
    out[hit] = (1 - alpha) * out[hit] + alpha * palette[mask[hit]]
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if not legend:
        return out
    h, w = out.shape[:2]
    strip_h = max(4, h // 16)
    strip = np.zeros((strip_h, w, 3), np.uint8)
    edges = np.linspace(0, w, NUM_CLASSES, dtype=int)
    for i, c in enumerate(range(1, NUM_CLASSES)):
        strip[:, edges[i]:edges[i + 1]] = palette[c]
    return np.concatenate([out, strip], axis=0)
