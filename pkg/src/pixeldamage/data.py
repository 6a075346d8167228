"""Dataset format, preprocessing, augmentation, train/test split and a synthetic generator.

A dataset directory holds pairs ``image_XXXX.png`` (RGB) and ``mask_XXXX.png``
(8-bit single channel, pixel value = class id).
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import RngState, draw

log = logging.getLogger(__name__)

CLASS_NAMES = (
    "no damage", "concrete crack", "concrete spall", "exposed reinforcement",
    "steel corrosion", "steel fatigue crack", "asphalt crack",
)
NUM_CLASSES = len(CLASS_NAMES)
INPUT_SIZE = 288
NOISE_SIGMA = 2.0
SCALE_RANGE = (0.75, 1.25)
MAX_ROTATION = 15.0
TRAIN_FRACTION = 0.8

_PAIR = re.compile(r"^(image|mask)_(.+)\.png$")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 255]
    mask: np.ndarray  # (H, W) uint8 class ids
    source_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape[1:]}")
        if self.mask.size and int(self.mask.max()) >= NUM_CLASSES:
            raise ValueError(f"mask value {int(self.mask.max())} is not a class id")


class DataError(ValueError):
    pass


# --- loading ---------------------------------------------------------------

def _resize(image: np.ndarray, mask: np.ndarray, size: int):
    img = Image.fromarray(np.clip(np.rint(image.transpose(1, 2, 0)), 0, 255).astype(np.uint8))
    img = np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32).transpose(2, 0, 1)
    msk = np.asarray(Image.fromarray(mask).resize((size, size), Image.NEAREST))
    return np.ascontiguousarray(img), msk


def read_pair(image_path, mask_path, size: int = INPUT_SIZE, source_id: str = "") -> Sample:
    """Load and validate one pair, resizing square inputs larger than ``size`` down to it."""
    with Image.open(image_path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1)
    with Image.open(mask_path) as im:
        if im.mode not in ("L", "P"):
            raise DataError(f"mask must be 8-bit single channel, got mode {im.mode}")
        mask = np.asarray(im, dtype=np.uint8)
    h, w = mask.shape
    if image.shape[1:] != (h, w):
        raise DataError(f"size mismatch: image {image.shape[1:]} vs mask {(h, w)}")
    if h != w or h < size:
        raise DataError(f"need a square input of at least {size}px, got {h}x{w}")
    if int(mask.max()) >= NUM_CLASSES:
        raise DataError(f"mask value {int(mask.max())} is >= {NUM_CLASSES}")
    if h != size:
        image, mask = _resize(image, mask, size)
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), source_id)


def load_dataset(directory, size: int = INPUT_SIZE, errors: list | None = None) -> list:
    """Load every valid pair in ``directory``.

    Invalid pairs are skipped; each problem is logged and, when ``errors`` is
    given, appended to it as ``(source_id, message)``.
    """
    directory = Path(directory)
    found = {}
    for p in sorted(directory.iterdir()):
        m = _PAIR.match(p.name)
        if m:
            found.setdefault(m.group(2), {})[m.group(1)] = p
    samples = []
    for sid, files in sorted(found.items()):
        try:
            if set(files) != {"image", "mask"}:
                missing = ({"image", "mask"} - set(files)).pop()
                raise DataError(f"missing {missing} file")
            samples.append(read_pair(files["image"], files["mask"], size, sid))
        except (DataError, OSError) as e:
            log.warning("skipping %s: %s", sid, e)
            if errors is not None:
                errors.append((sid, str(e)))
    return samples


def write_sample(sample: Sample, directory, stem: str | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or sample.source_id
    rgb = np.clip(np.rint(sample.image), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(rgb).save(directory / f"image_{stem}.png")
    Image.fromarray(sample.mask.astype(np.uint8), mode="L").save(directory / f"mask_{stem}.png")


def write_dataset(samples, directory):
    for s in samples:
        write_sample(s, directory)


def derive_binary_mask(mask: np.ndarray) -> np.ndarray:
    """1 where the pixel shows any damage class, else 0."""
    return (np.asarray(mask) > 0).astype(np.uint8)


# --- augmentation ----------------------------------------------------------

@dataclass
class AugmentParams:
    scale: float = 1.0
    angle: float = 0.0  # degrees
    flip: bool = False
    noise_sigma: float = 0.0


def draw_augment_params(rng: RngState) -> AugmentParams:
    scale = float(draw(rng, "uniform", (), np.float64, a=SCALE_RANGE[0], b=SCALE_RANGE[1]))
    angle = float(draw(rng, "uniform", (), np.float64, a=-MAX_ROTATION, b=MAX_ROTATION))
    flip = bool(draw(rng, "bernoulli", (), np.float64, p=0.5))
    return AugmentParams(scale, angle, flip, NOISE_SIGMA)


def _crop_or_pad(a, size):
    """Center-crop or reflect-pad the two trailing axes to ``size``."""
    for axis in (-2, -1):
        n = a.shape[axis]
        if n > size:
            start = (n - size) // 2
            a = np.take(a, np.arange(start, start + size), axis=axis)
        elif n < size:
            before = (size - n) // 2
            pad = [(0, 0)] * a.ndim
            pad[axis] = (before, size - n - before)
            a = np.pad(a, pad, mode="reflect" if n > 1 else "edge")
    return a


def augment(sample: Sample, rng: RngState, size: int = INPUT_SIZE, params: AugmentParams | None = None) -> Sample:
    """Random resize, rotation, horizontal flip and additive noise, then back to ``size``.

    Image and mask share every geometric parameter; the mask always uses
    nearest-neighbour sampling and fills rotated-in corners with class 0.
    """
    p = params or draw_augment_params(rng)
    img = sample.image.astype(np.float32)
    msk = sample.mask
    if p.scale != 1.0:
        img = ndimage.zoom(img, (1, p.scale, p.scale), order=1, mode="nearest", grid_mode=True)
        msk = ndimage.zoom(msk, p.scale, order=0, mode="nearest", grid_mode=True)
    if p.angle != 0.0:
        img = ndimage.rotate(img, p.angle, axes=(2, 1), reshape=False, order=1, mode="reflect")
        msk = ndimage.rotate(msk, p.angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
    if p.flip:
        img = img[:, :, ::-1]
        msk = msk[:, ::-1]
    if p.noise_sigma > 0:
        img = np.clip(img + draw(rng, "normal", img.shape, np.float32, sigma=p.noise_sigma), 0, 255)
    img = _crop_or_pad(img, size)
    msk = _crop_or_pad(msk, size)
    return Sample(np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(msk, dtype=np.uint8),
                  sample.source_id)


# --- train/test split ------------------------------------------------------

@dataclass
class SplitManifest:
    train: list
    test: list
    seed: int

    def __post_init__(self):
        if set(self.train) & set(self.test):
            raise ValueError("train and test ids overlap")

    def to_json(self):
        return {"train": list(self.train), "test": list(self.test), "seed": self.seed}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(d["train"], d["test"], d["seed"])


def split(dataset, seed: int, train_fraction: float = TRAIN_FRACTION) -> SplitManifest:
    """Seeded shuffle, then the first ``floor(train_fraction * n)`` ids train and the rest test."""
    ids = [s.source_id if isinstance(s, Sample) else str(s) for s in dataset]
    if len(set(ids)) != len(ids):
        raise ValueError("dataset ids are not unique")
    order = RngState(seed).generator().permutation(len(ids))
    n_train = math.floor(train_fraction * len(ids) + 1e-9)
    return SplitManifest([ids[i] for i in order[:n_train]], [ids[i] for i in order[n_train:]], seed)


def apply_split(samples, manifest: SplitManifest):
    by_id = {s.source_id: s for s in samples}
    return [by_id[i] for i in manifest.train], [by_id[i] for i in manifest.test]


# --- synthetic data --------------------------------------------------------

BACKGROUND = {
    "concrete": (165.0, 162.0, 155.0),
    "steel": (70.0, 95.0, 140.0),
    "asphalt": (90.0, 84.0, 78.0),
}
CLASS_COLORS = {
    1: (45.0, 45.0, 45.0),  # concrete crack
    2: (210.0, 192.0, 160.0),  # spall
    3: (125.0, 65.0, 40.0),  # exposed rebar
    4: (180.0, 98.0, 35.0),  # corrosion
    5: (20.0, 30.0, 75.0),  # fatigue crack
    6: (18.0, 10.0, 4.0),  # asphalt crack
}
MATERIALS = ("concrete", "steel", "asphalt")


def _polyline(grid, gen, label, length):
    g = grid.shape[0]
    y, x = gen.uniform(0.15 * g, 0.85 * g, size=2)
    theta = gen.uniform(0, 2 * np.pi)
    for _ in range(int(length)):
        theta += gen.normal(0, 0.35)
        y = float(np.clip(y + np.sin(theta), 0, g - 1))
        x = float(np.clip(x + np.cos(theta), 0, g - 1))
        grid[int(round(y)), int(round(x))] = label


def _blob(g, gen, rmin, rmax):
    cy, cx = gen.uniform(0.2 * g, 0.8 * g, size=2)
    ry, rx = gen.uniform(rmin, rmax, size=2)
    phase = gen.uniform(0, 2 * np.pi, size=2)
    yy, xx = np.mgrid[0:g, 0:g] + 0.5
    ang = np.arctan2(yy - cy, xx - cx)
    wobble = 1 + 0.18 * np.sin(3 * ang + phase[0]) + 0.1 * np.sin(5 * ang + phase[1])
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= wobble ** 2


def _synthetic_layout(material, g, gen):
    grid = np.zeros((g, g), np.uint8)
    if material == "concrete":
        if gen.random() < 0.8:
            spall = _blob(g, gen, 0.12 * g, 0.25 * g)
            grid[spall] = 2
            if gen.random() < 0.7:
                bars = np.zeros_like(spall)
                off = int(gen.integers(0, 3))
                if gen.random() < 0.5:
                    bars[off::3, :] = True
                else:
                    bars[:, off::3] = True
                grid[spall & bars & ndimage.binary_erosion(spall)] = 3
        for _ in range(int(gen.integers(1, 3))):
            _polyline(grid, gen, 1, gen.uniform(0.5, 0.9) * g)
    elif material == "steel":
        for _ in range(int(gen.integers(1, 3))):
            grid[_blob(g, gen, 0.08 * g, 0.2 * g)] = 4
        _polyline(grid, gen, 5, gen.uniform(0.5, 0.9) * g)
    else:
        for _ in range(int(gen.integers(1, 4))):
            _polyline(grid, gen, 6, gen.uniform(0.5, 0.9) * g)
    return grid


def synthetic_sample(index: int, rng: RngState, size: int = INPUT_SIZE, cell: int = 4) -> Sample:
    """One textured image with damage-like primitives and its exact label mask.

    Labels are drawn on a grid of ``cell``-pixel squares, so every label
    boundary falls on a multiple of ``cell``.
    """
    if size % cell:
        raise ValueError(f"size {size} is not a multiple of cell {cell}")
    gen = rng.split(index).generator()
    material = MATERIALS[index % len(MATERIALS)]
    grid = _synthetic_layout(material, size // cell, gen)
    mask = np.repeat(np.repeat(grid, cell, axis=0), cell, axis=1)
    palette = np.array([BACKGROUND[material]] + [CLASS_COLORS[c] for c in range(1, NUM_CLASSES)], np.float64)
    image = palette[mask].transpose(2, 0, 1)
    shade = 1 + 0.08 * np.linspace(-1, 1, size)[None, :] * gen.uniform(-1, 1) \
        + 0.08 * np.linspace(-1, 1, size)[:, None] * gen.uniform(-1, 1)
    image = image * shade * gen.uniform(0.95, 1.05)
    image += gen.normal(0, 6.0, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.float32)
    return Sample(image, mask.astype(np.uint8), f"{index:04d}")


def generate_synthetic(n: int, rng: RngState, size: int = INPUT_SIZE, cell: int = 4) -> list:
    """``n`` synthetic samples; sample ``i`` depends only on ``(rng.seed, i)``."""
    return [synthetic_sample(i, rng, size, cell) for i in range(n)]
