"""Datasets: the CIFAR-100 binary reader plus a synthetic shapes task."""

from __future__ import annotations

import functools
import logging
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import DataError

log = logging.getLogger(__name__)

CIFAR_RECORD = 3074
CIFAR_RECORDS = {"train": 50000, "test": 10000}
CIFAR_FILES = {"train": "train.bin", "test": "test.bin"}

SHAPES = ("square", "circle", "cross", "triangle", "ring", "diamond", "hbar", "vbar")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W)
    labels: np.ndarray  # (N,) int64
    classes: int
    crop_pad: int = 0  # random-crop augmentation when > 0

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3 or self.images.shape[2] != self.images.shape[3]:
            raise DataError(f"images must be (N, 3, H, H), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def batches(self, batch_size: int, shuffle_rng=None, augment_rng=None, dtype=None,
                drop_singletons=True):
        """Yield (Tensor images, int labels).

        A trailing one-sample batch is dropped unless ``drop_singletons`` is off;
        batch statistics of a single sample are degenerate.
        """
        n = len(self)
        order = shuffle_rng.permutation(n) if shuffle_rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if drop_singletons and len(idx) < 2 and n >= 2:
                continue
            x = self.images[idx]
            if self.crop_pad and augment_rng is not None:
                x = random_crop(x, self.crop_pad, augment_rng)
            yield Tensor(x.astype(dtype or x.dtype, copy=False)), self.labels[idx]


def random_crop(images: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = np.empty_like(images)
    for k, (dy, dx) in enumerate(offsets):
        out[k] = padded[k, :, dy:dy + h, dx:dx + w]
    return out


# ---- preprocessing -----------------------------------------------------------

def preprocess(train: Dataset, test: Dataset, mode: str) -> tuple[Dataset, Dataset]:
    """Apply ``normalize`` / ``zero-center`` / ``unit-range`` using train-split statistics only."""
    if mode == "unit-range":
        return train, test
    if mode == "zero-center":
        mu = train.images.mean(axis=(0, 2, 3), keepdims=True)
        sd = 1.0
    elif mode == "normalize":
        mu = train.images.mean(axis=(0, 2, 3), keepdims=True)
        sd = train.images.std(axis=(0, 2, 3), keepdims=True)
        sd = np.where(sd > 0, sd, 1.0)
    else:
        raise ValueError(f"unknown preprocessing {mode!r}")
    return (Dataset((train.images - mu) / sd, train.labels, train.classes, train.crop_pad),
            Dataset((test.images - mu) / sd, test.labels, test.classes, test.crop_pad))


# ---- CIFAR-100 binary ------------------------------------------------------------

def _resolve(path) -> str:
    if path:
        return os.fspath(path)
    env = os.environ.get("DPCN_DATA_DIR")
    if not env:
        raise DataError("no dataset path given and DPCN_DATA_DIR is unset")
    return env


def load_cifar100(path, split: str = "train", subset=None, strict: bool = True) -> Dataset:
    """Read CIFAR-100 binary records (coarse byte, fine byte, 3072 R/G/B plane bytes).

    ``path`` may be the file itself or the directory holding train.bin/test.bin.
    Pixels are scaled to [0, 1]; fine labels are used and remapped densely when
    ``subset`` selects classes. ``strict`` also demands the official record count.
    """
    if split not in CIFAR_FILES:
        raise DataError(f"unknown split {split!r}")
    path = _resolve(path)
    if os.path.isdir(path):
        path = os.path.join(path, CIFAR_FILES[split])
    if not os.path.exists(path):
        raise DataError(f"CIFAR-100 file not found: {path}")
    size = os.path.getsize(path)
    if size == 0 or size % CIFAR_RECORD:
        raise DataError(f"{path}: length {size} is not a multiple of the {CIFAR_RECORD}-byte record")
    n = size // CIFAR_RECORD
    if strict and n != CIFAR_RECORDS[split]:
        raise DataError(f"{path}: {n} records, expected {CIFAR_RECORDS[split]} for the {split} split")
    raw = np.fromfile(path, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    fine = raw[:, 1].astype(np.int64)
    if fine.max() >= 100:
        raise DataError(f"{path}: fine label byte {fine.max()} >= 100")
    classes = 100
    if subset is not None:
        subset = list(subset)
        keep = np.isin(fine, subset)
        raw, fine = raw[keep], fine[keep]
        remap = {c: i for i, c in enumerate(subset)}
        fine = np.array([remap[c] for c in fine], dtype=np.int64)
        classes = len(subset)
    images = raw[:, 2:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    log.info("loaded %d %s images from %s", len(fine), split, path)
    return Dataset(images, fine, classes)


@functools.lru_cache(maxsize=4)
def _cifar_pair(path, subset, preprocessing, strict):
    train = load_cifar100(path, "train", subset, strict)
    test = load_cifar100(path, "test", subset, strict)
    return preprocess(train, test, preprocessing)


def load_cifar100_pair(path, subset=None, preprocessing="normalize", strict=True):
    """Train/test splits with normalization constants from the train split (cached per process)."""
    subset = tuple(subset) if subset is not None else None
    return _cifar_pair(_resolve(path), subset, preprocessing, strict)


# ---- synthetic shapes --------------------------------------------------------------

def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "cross":
        return ((np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r)) | ((np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r))
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if kind == "hbar":
        return (np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r)
    raise ValueError(kind)


def synth_shapes(classes: int, n: int, size: int = 16, sigma: float = 0.0, seed: int = 0,
                 train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
    """``n`` images of ``classes`` shape kinds, split 80/20 per class.

    Each image is one randomly coloured filled shape with jittered position
    and radius on a black background, plus Gaussian pixel noise ``sigma``.
    """
    if not 2 <= classes <= len(SHAPES):
        raise DataError(f"synthetic shapes support 2..{len(SHAPES)} classes, got {classes}")
    if size < 8:
        raise DataError("synthetic images need size >= 8")
    rng = np.random.default_rng(seed)
    per_class = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
    images = np.zeros((n, 3, size, size))
    labels = np.repeat(np.arange(classes), per_class)
    jitter = size / 8
    for k, label in enumerate(labels):
        cy, cx = size / 2 - 0.5 + rng.uniform(-jitter, jitter, size=2)
        r = size * rng.uniform(0.25, 0.33)
        mask = _shape_mask(SHAPES[label], size, cy, cx, r)
        colour = rng.uniform(0.5, 1.0, size=3)
        images[k] = mask[None] * colour[:, None, None]
    if sigma > 0:
        images += rng.normal(0.0, sigma, images.shape)
    train_idx, test_idx = [], []
    start = 0
    for c, count in enumerate(per_class):
        idx = np.arange(start, start + count)
        cut = int(round(train_fraction * count))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
        start += count
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    return (Dataset(images[train_idx], labels[train_idx], classes),
            Dataset(images[test_idx], labels[test_idx], classes))
