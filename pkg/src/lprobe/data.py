"""Dataset ingestion: CIFAR-10 binary batches, MNIST IDX, synthetic generator.

The synthetic generator is the fast CI dataset: class identity is carried by
two Gaussian blobs at class-specific positions with a class hue, under heavy
nuisance variation (whole-pattern translation, jitter, per-channel
brightness, noise). The cues themselves are robust at the standard attack
budget; conventional training is still easy to attack because the fragility
of standard training is model-induced, which is exactly the regime the
block-wise retraining experiments probe. An optional faint class grating
(``fragile_amplitude``) can plant an in-budget ambiguous shortcut cue, but it
defaults to off: a planted shortcut poisons partial-retraining experiments,
since no robust early encoder can recover a cue the attack can rewrite.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .rng import derive_rng

CIFAR10_CLASS_NAMES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*1024 channel-planar pixels


class DatasetFormatError(ValueError):
    """Malformed dataset file (size, magic number, or field range)."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str
    class_names: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"images must be (N,C,H,W) matching {self.labels.shape[0]} labels, "
                f"got {self.images.shape}"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError(
                f"labels must lie in [0, {len(self.class_names)}), "
                f"got range [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[indices], labels=self.labels[indices])

    def pad_to(self, size: int) -> "Dataset":
        """Zero-pad spatial extents up to size x size (e.g. MNIST 28 -> 32)."""
        n, c, h, w = self.images.shape
        if h > size or w > size:
            raise ValueError(f"cannot pad {h}x{w} images down to {size}x{size}")
        if (h, w) == (size, size):
            return self
        out = np.zeros((n, c, size, size), dtype=np.float64)
        dy, dx = (size - h) // 2, (size - w) // 2
        out[:, :, dy : dy + h, dx : dx + w] = self.images
        return replace(self, images=out)


def load_cifar10(path: str, split: str = "train") -> Dataset:
    """Parse the CIFAR-10 binary batches under ``path``.

    Records are 3073 bytes: one label byte then 3x1024 channel-planar,
    row-major pixels, scaled by 1/255.
    """
    if split == "train":
        files = [os.path.join(path, f"data_batch_{i}") for i in range(1, 6)]
    elif split == "test":
        files = [os.path.join(path, "test_batch")]
    else:
        raise ValueError(f"unknown split {split!r}")

    images, labels = [], []
    for fname in files:
        with open(fname, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            expected = (len(raw) // CIFAR_RECORD_BYTES + 1) * CIFAR_RECORD_BYTES
            raise DatasetFormatError(
                f"{fname}: truncated file, expected a multiple of {CIFAR_RECORD_BYTES} bytes "
                f"(e.g. {expected}), got {len(raw)}"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        batch_labels = arr[:, 0]
        bad = np.nonzero(batch_labels > 9)[0]
        if bad.size:
            offset = int(bad[0]) * CIFAR_RECORD_BYTES
            raise DatasetFormatError(
                f"{fname}: label byte {batch_labels[bad[0]]} > 9 at byte offset {offset}"
            )
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
        labels.append(batch_labels.astype(np.int64))
    return Dataset(np.concatenate(images), np.concatenate(labels), split, CIFAR10_CLASS_NAMES)


def _read_idx(path: str, expected_magic: int, expected_dims: int) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 + 4 * expected_dims:
        raise DatasetFormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DatasetFormatError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(f">{expected_dims}I", raw[4 : 4 + 4 * expected_dims])
    payload = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * expected_dims)
    if payload.size != int(np.prod(dims)):
        raise DatasetFormatError(
            f"{path}: payload holds {payload.size} bytes but dimensions {dims} "
            f"require {int(np.prod(dims))}"
        )
    return payload.reshape(dims)


def load_mnist_idx(path: str, split: str = "train") -> Dataset:
    """Parse MNIST IDX files under ``path`` (big-endian magic and dims)."""
    prefix = {"train": "train", "test": "t10k"}.get(split)
    if prefix is None:
        raise ValueError(f"unknown split {split!r}")
    images = _read_idx(os.path.join(path, f"{prefix}-images-idx3-ubyte"), 0x00000803, 3)
    labels = _read_idx(os.path.join(path, f"{prefix}-labels-idx1-ubyte"), 0x00000801, 1)
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"image/label count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    imgs = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(imgs, labels.astype(np.int64), split, [str(d) for d in range(10)])


def _class_blueprint(k: int, classes: int, size: int):
    """Deterministic per-class pattern constants, independent of the seed."""
    angle = 2.0 * np.pi * k / classes
    c = (size - 1) / 2.0
    # Alternating ring radii keep same-ring neighbors two angular steps apart,
    # so blob supports stay separated (the robust margin survives the attack
    # budget); hue and the dark blob offset add further robust cues.
    r_bright = (0.33 if k % 2 == 0 else 0.19) * size
    pos_bright = (c + r_bright * np.sin(angle), c + r_bright * np.cos(angle))
    dark_angle = angle + (2.4 if k % 2 == 0 else -2.4)
    pos_dark = (c + 0.15 * size * np.sin(dark_angle), c + 0.15 * size * np.cos(dark_angle))
    hue = 0.5 + 0.5 * np.sin(angle + 2.0 * np.pi * np.arange(3) / 3.0)
    hue = 0.40 + 0.60 * hue / hue.max()
    grate_angle = np.pi * (k + 0.5) / classes
    wavevec = (2.0 * np.pi / 4.0) * np.array([np.cos(grate_angle), np.sin(grate_angle)])
    return pos_bright, pos_dark, hue, wavevec


def make_synthetic(classes: int, samples_per_class: int, image_size: int = 32,
                   seed: int = 0, channels: int = 3, noise: float = 0.035,
                   fragile_amplitude: float = 0.0, split: str = "train") -> Dataset:
    """Deterministic class-conditional blob + texture images.

    Class pattern constants depend only on the class index, so datasets drawn
    with different seeds (train/test splits) share the same class structure.
    Per-channel brightness jitter dominates raw-pixel distances (keeping the
    class-mean classifier honest) without touching the local structure that
    convolutional models use.
    """
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")
    rng = derive_rng(seed, "synthetic")
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)

    n = classes * samples_per_class
    images = np.empty((n, channels, image_size, image_size))
    labels = np.repeat(np.arange(classes), samples_per_class).astype(np.int64)

    sigma_b = image_size / 7.5
    sigma_d = image_size / 9.0
    jitter = image_size / 16.0
    shift_max = max(2, image_size // 8)
    i = 0
    for k in range(classes):
        pos_b, pos_d, hue, wavevec = _class_blueprint(k, classes, image_size)
        hue = hue[:channels] if channels <= 3 else np.resize(hue, channels)
        for _ in range(samples_per_class):
            # Shared translation of the whole pattern: wrecks raw-pixel
            # template matching, costs a convolutional model nothing.
            shift = rng.uniform(-shift_max, shift_max, 2)
            jb = shift + rng.uniform(-jitter, jitter, 2)
            jd = shift + rng.uniform(-jitter, jitter, 2)
            amp = rng.uniform(0.85, 1.15)
            base = rng.uniform(0.32, 0.58, channels)
            phase = rng.uniform(0.0, 2.0 * np.pi)

            bright = np.exp(-(((yy - pos_b[0] - jb[0]) ** 2 + (xx - pos_b[1] - jb[1]) ** 2)
                              / (2.0 * sigma_b ** 2)))
            dark = np.exp(-(((yy - pos_d[0] - jd[0]) ** 2 + (xx - pos_d[1] - jd[1]) ** 2)
                            / (2.0 * sigma_d ** 2)))
            pattern = 0.65 * amp * bright - 0.50 * amp * dark
            grate = fragile_amplitude * np.sin(wavevec[0] * xx + wavevec[1] * yy + phase)

            img = base[:, None, None] + hue[:, None, None] * pattern[None] + grate[None]
            img = img + rng.normal(0.0, noise, img.shape)
            images[i] = np.clip(img, 0.0, 1.0)
            i += 1

    class_names = [f"class_{k}" for k in range(classes)]
    return Dataset(images, labels, split, class_names)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of the class-mean pixel classifier (generator calibration oracle)."""
    classes = len(train.class_names)
    centroids = np.stack([
        train.images[train.labels == k].reshape(-1, train.images[0].size).mean(axis=0)
        for k in range(classes)
    ])
    flat = test.images.reshape(len(test), -1)
    d2 = ((flat[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == test.labels).mean())
