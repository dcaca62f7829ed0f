"""Dataset ingestion: CIFAR binary records and a seeded synthetic image generator."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .ensemble import write_labels, write_logits

CIFAR_SHAPE = (3, 32, 32)
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)
CIFAR100_TRAIN_FILES = ("train.bin",)
CIFAR100_TEST_FILES = ("test.bin",)

# difficulty -> (class-specific component weight, pixel noise level)
DIFFICULTY = {"easy": (0.6, 0.8), "medium": (0.35, 0.8), "hard": (0.2, 1.0)}


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (n, channels, H, W); uint8 on ingest, float after normalization
    labels: np.ndarray  # (n,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (n, channels, H, W), got shape {self.images.shape}")
        n = self.images.shape[0]
        if n == 0:
            raise DatasetFormatError("dataset is empty")
        if self.labels.shape != (n,):
            raise DatasetFormatError(f"{n} images but labels have shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DatasetFormatError(f"labels must lie in [0, {self.classes})")
        if self.split not in ("train", "test"):
            raise DatasetFormatError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


def _split_from_name(path: Path) -> str:
    return "test" if "test" in path.name else "train"


def _read_records(path, label_bytes: int, classes: int, shape: tuple, split: Optional[str]) -> LabeledImageSet:
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    pixels = int(np.prod(shape))
    rec = label_bytes + pixels
    if raw.size == 0:
        raise DatasetFormatError(f"{path}: empty file")
    if raw.size % rec:
        raise DatasetFormatError(f"{path}: size {raw.size} is not a multiple of the {rec}-byte record length")
    records = raw.reshape(-1, rec)
    labels = records[:, label_bytes - 1].astype(np.int64)  # fine label is the last label byte
    bad = labels >= classes
    if bad.any():
        first = int(np.argmax(bad))
        raise DatasetFormatError(f"{path}: record {first} has label {labels[first]} >= {classes}")
    images = records[:, label_bytes:].reshape((-1,) + tuple(shape)).copy()
    return LabeledImageSet(images, labels, classes, split or _split_from_name(path))


def load_cifar10(path, split: Optional[str] = None, shape: tuple = CIFAR_SHAPE) -> LabeledImageSet:
    """One CIFAR-10 binary file: records of 1 label byte + channel-major pixels."""
    return _read_records(path, 1, 10, shape, split)


def load_cifar100(path, split: Optional[str] = None, shape: tuple = CIFAR_SHAPE) -> LabeledImageSet:
    """One CIFAR-100 binary file: records of coarse byte, fine byte, pixels. Fine labels are kept."""
    return _read_records(path, 2, 100, shape, split)


def _concat(sets: list, split: str) -> LabeledImageSet:
    return LabeledImageSet(
        np.concatenate([s.images for s in sets]),
        np.concatenate([s.labels for s in sets]),
        sets[0].classes,
        split,
    )


def load_cifar_dir(root, name: str = "cifar10") -> tuple:
    """Load the (train, test) pair from a directory of standard binary files."""
    root = Path(root)
    if name == "cifar10":
        loader, train_files, test_files = load_cifar10, CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILES
    elif name == "cifar100":
        loader, train_files, test_files = load_cifar100, CIFAR100_TRAIN_FILES, CIFAR100_TEST_FILES
    else:
        raise ValueError(f"unknown CIFAR variant {name!r}")
    train = _concat([loader(root / f, "train") for f in train_files], "train")
    test = _concat([loader(root / f, "test") for f in test_files], "test")
    return train, test


def default_data_dir() -> Optional[str]:
    return os.environ.get("CE_DATA_DIR")


def write_cifar10(path, dataset: LabeledImageSet) -> None:
    _write_records(path, dataset, coarse=None)


def write_cifar100(path, dataset: LabeledImageSet, coarse: Optional[np.ndarray] = None) -> None:
    _write_records(path, dataset, coarse=np.zeros(len(dataset), np.uint8) if coarse is None else coarse)


def _write_records(path, dataset: LabeledImageSet, coarse) -> None:
    images = np.asarray(dataset.images)
    if images.dtype != np.uint8:
        raise DatasetFormatError("only 8-bit images can be written in CIFAR binary format")
    n = len(dataset)
    cols = [] if coarse is None else [np.asarray(coarse, dtype=np.uint8).reshape(n, 1)]
    cols.append(dataset.labels.astype(np.uint8).reshape(n, 1))
    cols.append(images.reshape(n, -1))
    np.concatenate(cols, axis=1).tofile(path)


# ---------------------------------------------------------------------------
# synthetic data


def _blob_image(rng: np.random.Generator, channels: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((channels, size, size))
    for _ in range(3):
        cy, cx = rng.uniform(1, size - 1, size=2)
        sigma = rng.uniform(size / 10, size / 4)
        amp = rng.normal(0.0, 1.0, size=channels)
        img += amp[:, None, None] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return img / np.sqrt(np.mean(img**2))


def synthetic_dataset(
    seed: int,
    n: int,
    classes: int,
    size: int = 16,
    difficulty: str = "easy",
    n_test: Optional[int] = None,
    channels: int = 3,
) -> tuple:
    """Class-conditional Gaussian-blob images as a balanced (train, test) pair of uint8 sets.

    All classes share one blob background; each class adds its own blob
    pattern, weighted by ``difficulty``. Samples get a random contrast, a
    spatial jitter of up to one pixel and Gaussian pixel noise.
    """
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    if difficulty not in DIFFICULTY:
        raise ValueError(f"difficulty must be one of {sorted(DIFFICULTY)}, got {difficulty!r}")
    n_test = max(classes, n // 2) if n_test is None else n_test
    rng = np.random.default_rng(seed)
    weight, noise = DIFFICULTY[difficulty]
    base = _blob_image(rng, channels, size)
    protos = np.stack([base + weight * _blob_image(rng, channels, size) for _ in range(classes)])

    def draw(count: int, split: str) -> LabeledImageSet:
        labels = rng.permutation(np.arange(count) % classes)
        contrast = rng.uniform(0.7, 1.3, size=(count, 1, 1, 1))
        shifts = rng.integers(-1, 2, size=(count, 2))
        x = protos[labels] * contrast
        for i, (dy, dx) in enumerate(shifts):
            x[i] = np.roll(x[i], (dy, dx), axis=(1, 2))
        x += noise * rng.standard_normal((count, channels, size, size))
        pixels = np.clip(np.rint(128.0 + 40.0 * x), 0, 255).astype(np.uint8)
        return LabeledImageSet(pixels, labels, classes, split)

    return draw(n, "train"), draw(n_test, "test")


# ---------------------------------------------------------------------------
# logit export


def export_logits(model, dataset: LabeledImageSet, out_path, batch_size: int = 256) -> np.ndarray:
    """Write eval-mode branch scores of ``dataset`` as a CELG file plus a ``.labels`` sidecar.

    ``dataset`` must already be normalized the way the model was trained.
    """
    if model.config.classes != dataset.classes:
        raise ValueError(f"model predicts {model.config.classes} classes, dataset has {dataset.classes}")
    scores = model.scores(dataset.images, batch_size=batch_size)
    write_logits(out_path, scores)
    write_labels(labels_path(out_path), dataset.labels)
    return scores


def labels_path(logit_path) -> Path:
    p = Path(logit_path)
    return p.with_name(p.name + ".labels")
