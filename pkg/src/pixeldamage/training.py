"""Class-balanced cross-entropy, SGD with a piecewise learning-rate schedule, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .architectures import Network, decayed_names
from .data import augment
from .tensor import NumericError, RngState, ShapeError

log = logging.getLogger(__name__)

DEFAULT_SEGMENTS = ((70, 1e-3), (50, 1e-4), (25, 1e-5), (15, 1e-6))
BATCH_SIZE = 5


@dataclass
class LossConfig:
    weight_decay: float
    class_weights: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.class_weights.shape != (self.num_classes,):
            raise ShapeError("one class weight per class", self.class_weights.shape, (self.num_classes,))
        if np.any(self.class_weights < 0):
            raise ValueError("class weights must be non-negative")


@dataclass
class Schedule:
    segments: tuple = DEFAULT_SEGMENTS
    batch_size: int = BATCH_SIZE

    def __post_init__(self):
        self.segments = tuple((int(n), float(lr)) for n, lr in self.segments)
        if not self.segments or any(n <= 0 for n, _ in self.segments):
            raise ValueError("schedule segments need positive epoch counts")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")

    @property
    def total_epochs(self) -> int:
        return sum(n for n, _ in self.segments)

    def learning_rate(self, epoch: int) -> float:
        """Rate for 0-based ``epoch``; the last segment's rate persists past the end."""
        start = 0
        for n, lr in self.segments:
            if epoch < start + n:
                return lr
            start += n
        return self.segments[-1][1]

    def to_json(self):
        return {"segments": [list(s) for s in self.segments], "batch_size": self.batch_size}


def class_balance_weights(pixel_counts) -> np.ndarray:
    """Median frequency balancing: ``w_c = median(f) / f_c`` with ``f_c = count_c / total``.

    The median is taken over classes that occur.  Absent classes get weight 0
    and a warning, since they cannot be learned.
    """
    counts = np.asarray(pixel_counts, dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("no labelled pixels")
    freq = counts / counts.sum()
    present = freq > 0
    med = np.median(freq[present])
    weights = np.zeros_like(freq)
    weights[present] = med / freq[present]
    missing = np.flatnonzero(~present)
    if missing.size:
        log.warning("classes %s have no pixels; their loss weight is 0", missing.tolist())
    return weights


def pixel_counts(masks, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in masks:
        counts += np.bincount(np.asarray(m).ravel(), minlength=num_classes)[:num_classes]
    return counts


def _check_labels(labels, num_classes):
    bad = (labels < 0) | (labels >= num_classes)
    if np.any(bad):
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"label {int(labels[pos])} out of range [0, {num_classes}) at pixel {pos}")


def loss(probs, labels, cfg: LossConfig, weights: dict | None = None):
    """Weighted cross-entropy plus L2 decay.

    ``loss = -(1/P) sum_p w[y_p] ln probs[p, y_p] + lambda * sum ||W||^2`` over
    the P pixels of the batch.  Returns ``(value, d loss / d logits, {name: d decay / d W})``
    where the logits gradient is the fused softmax/cross-entropy form.
    """
    n, c, h, w = probs.shape
    if c != cfg.num_classes:
        raise ShapeError("probability channels do not match num_classes", probs.shape, (cfg.num_classes,))
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError("labels must be (N, H, W)", labels.shape, (n, h, w))
    _check_labels(labels, c)
    npix = n * h * w
    cw = cfg.class_weights.astype(probs.dtype)
    pix_w = cw[labels]  # (N, H, W)
    p_true = np.take_along_axis(probs, labels[:, None].astype(np.intp), axis=1)[:, 0]
    tiny = np.finfo(probs.dtype).tiny
    ce = -float(np.sum(pix_w.astype(np.float64) * np.log(np.maximum(p_true, tiny)))) / npix
    dlogits = probs.copy()
    np.put_along_axis(dlogits, labels[:, None].astype(np.intp), p_true[:, None] - 1, axis=1)
    dlogits *= (pix_w / npix)[:, None]
    decay_value, decay_grads = 0.0, {}
    if weights and cfg.weight_decay > 0:
        for name in decayed_names(weights):
            wt = weights[name]
            decay_value += cfg.weight_decay * float(np.sum(wt.astype(np.float64) ** 2))
            decay_grads[name] = (2 * cfg.weight_decay) * wt
    return ce + decay_value, dlogits, decay_grads


class SGD:
    """``v = momentum * v + g``; ``w -= lr * v``.  With momentum 0 this is ``w -= lr * g``."""

    def __init__(self, momentum: float = 0.0):
        self.momentum = momentum
        self.velocity = {}

    def step(self, params: dict, grads: dict, lr: float):
        for name, g in grads.items():
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            params[name] -= params[name].dtype.type(lr) * g


def batches(n: int, batch_size: int, rng: RngState):
    """Shuffled index batches.  A trailing singleton joins the previous batch (batch norm needs >= 2)."""
    order = rng.generator().permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def channel_stats(images):
    """Per-channel mean and std over a list of (3, H, W) images."""
    s = np.zeros(3)
    s2 = np.zeros(3)
    count = 0
    for im in images:
        im = np.asarray(im, dtype=np.float64)
        s += im.sum(axis=(1, 2))
        s2 += (im ** 2).sum(axis=(1, 2))
        count += im.shape[1] * im.shape[2]
    mean = s / count
    std = np.sqrt(np.maximum(s2 / count - mean ** 2, 0))
    return mean, np.maximum(std, 1e-3)


def normalize(images, mean, std, dtype=np.float32):
    x = np.asarray(images, dtype=np.float64)
    return ((x - np.reshape(mean, (1, 3, 1, 1))) / np.reshape(std, (1, 3, 1, 1))).astype(dtype)


def predict_masks(net: Network, images, mean, std, batch_size: int = BATCH_SIZE):
    out = []
    for i in range(0, len(images), batch_size):
        x = normalize(np.stack(images[i:i + batch_size]), mean, std, net.dtype)
        out.append(net.predict(x))
    return np.concatenate(out) if out else np.zeros((0,), np.int64)


def predict_proba(net: Network, images, mean, std, batch_size: int = BATCH_SIZE):
    out = []
    for i in range(0, len(images), batch_size):
        x = normalize(np.stack(images[i:i + batch_size]), mean, std, net.dtype)
        out.append(net.predict_proba(x))
    return np.concatenate(out)


def pixel_accuracy(pred, true) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(true)))


@dataclass
class TrainConfig:
    schedule: Schedule = field(default_factory=Schedule)
    momentum: float = 0.0
    weight_decay: float | None = None  # None: the architecture default
    augment: bool = True
    checkpoint_every: int = 0  # 0: only at the end
    eval_every: int = 1  # 0: only after the final epoch
    class_balance: bool = True


@dataclass
class TrainState:
    net: Network
    mean: np.ndarray
    std: np.ndarray
    class_weights: np.ndarray
    rng: RngState
    epoch: int = 0
    optimizer: SGD | None = None
    history: list = field(default_factory=list)


def train(net: Network, train_samples, test_samples, cfg: TrainConfig, rng: RngState,
          out_dir: str | Path | None = None, metrics_path: str | Path | None = None,
          label_fn=None) -> TrainState:
    """Fit ``net`` on ``train_samples`` (objects with ``image`` and ``mask``).

    ``label_fn`` maps a sample's mask to the training target (the binary
    mask for a segmenter).  Returns the final state; ``history`` holds one
    metrics record per epoch, also appended to ``metrics_path`` as JSON lines.
    """
    from .checkpoint import save_checkpoint  # avoid an import cycle at module load

    if not train_samples:
        raise ValueError("training set is empty")
    label_fn = label_fn or (lambda m: m)
    ncls = net.spec.num_classes
    targets = [label_fn(s.mask) for s in train_samples]
    top = max(int(t.max()) for t in targets)
    if top >= ncls:
        raise ValueError(f"labels reach {top} but the {net.spec.role} head has {ncls} classes")
    mean, std = channel_stats([s.image for s in train_samples])
    if cfg.class_balance:
        cw = class_balance_weights(pixel_counts(targets, ncls))
    else:
        cw = np.ones(ncls)
    decay = net.spec.weight_decay if cfg.weight_decay is None else cfg.weight_decay
    loss_cfg = LossConfig(decay, cw, ncls)
    state = TrainState(net, mean, std, cw, rng, optimizer=SGD(cfg.momentum))
    aug_rng = rng.split(1)
    drop_rng = rng.split(2)
    shuffle_rng = rng.split(3)
    metrics_file = Path(metrics_path) if metrics_path else None
    if metrics_file:
        metrics_file.parent.mkdir(parents=True, exist_ok=True)
        metrics_file.write_text("")
    total = cfg.schedule.total_epochs
    for epoch in range(total):
        lr = cfg.schedule.learning_rate(epoch)
        losses, correct, seen = [], 0, 0
        for bi, idx in enumerate(batches(len(train_samples), cfg.schedule.batch_size, shuffle_rng)):
            imgs, labs = [], []
            for i in idx:
                s = train_samples[i]
                if cfg.augment:
                    s = augment(s, aug_rng.split(epoch * 1_000_003 + int(i)), size=s.image.shape[-1])
                imgs.append(s.image)
                labs.append(label_fn(s.mask))
            x = normalize(np.stack(imgs), mean, std, net.dtype)
            y = np.stack(labs).astype(np.int64)
            logits = net.forward(x, L.TRAIN, drop_rng)
            probs = L.softmax_per_pixel(logits)
            value, dlogits, dgrads = loss(probs, y, loss_cfg, net.params)
            if not math.isfinite(value):
                raise NumericError(f"loss is {value} at epoch {epoch}, batch {bi} (samples {idx.tolist()})")
            grads = net.backward(dlogits)
            for name, g in dgrads.items():
                grads[name] += g
            state.optimizer.step(net.params, grads, lr)
            losses.append(value)
            correct += int(np.sum(probs.argmax(axis=1) == y))
            seen += y.size
        record = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "train_batch_accuracy": correct / seen}
        last = epoch == total - 1
        if last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
            pred = predict_masks(net, [s.image for s in train_samples], mean, std)
            record["train_accuracy"] = pixel_accuracy(pred, np.stack(targets))
            if test_samples:
                pred = predict_masks(net, [s.image for s in test_samples], mean, std)
                record["test_accuracy"] = pixel_accuracy(pred, np.stack([label_fn(s.mask) for s in test_samples]))
        state.epoch = epoch + 1
        state.history.append(record)
        log.info("epoch %d lr %g loss %.5f %s", epoch, lr, record["loss"],
                 " ".join(f"{k} {v:.4f}" for k, v in record.items() if k.endswith("accuracy")))
        if metrics_file:
            with metrics_file.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        if out_dir and (last or (cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0)):
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            name = "final.ckpt" if last else f"epoch_{state.epoch:04d}.ckpt"
            save_checkpoint(out / name, state, cfg.schedule)
    return state
