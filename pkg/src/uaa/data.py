"""Dataset loading, the [0,1] pixel contract, and soft-label encoding.

Every image tensor in this package is float32, shaped ``[N, C, H, W]`` with
values in the closed interval [0, 1]; 8-bit sources are divided by 255 on
load. Labels are int64 class indices in ``{0..K-1}``.

Besides the standard benchmarks (CIFAR-10/100, SVHN via torchvision), a
built-in synthetic dataset of Gaussian-blob class patterns is provided so
the test suite never needs downloads.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
import torch

from .utils import derive_seed, numpy_generator

__all__ = [
    "ImageBatch",
    "SoftLabelBatch",
    "DatasetSplit",
    "DatasetNotFoundError",
    "load_dataset",
    "make_soft_labels",
    "DATASET_NAMES",
]

DATASET_NAMES = ("cifar10", "cifar100", "svhn", "synthetic")

#: environment variable pointing at the dataset root directory
DATA_ROOT_ENV = "UAA_DATA_ROOT"
DEFAULT_DATA_ROOT = "./data"

# Synthetic dataset geometry: 4 Gaussian-blob classes on a gray background.
# Amplitude/noise are balanced so a linear probe separates the classes while
# small-margin features remain for adversarial trends to act on.
SYNTHETIC_CLASSES = 4
SYNTHETIC_SHAPE = (3, 32, 32)
SYNTHETIC_BLOB_CENTERS = ((8, 8), (8, 24), (24, 8), (24, 24))
SYNTHETIC_BLOB_SIGMA = 4.0
SYNTHETIC_BLOB_AMPLITUDE = 0.30
SYNTHETIC_NOISE_STD = 0.12
SYNTHETIC_SPLIT_SIZES = {"train": 4096, "test": 1024}
_SYNTHETIC_BASE_SEED = 1234


class DatasetNotFoundError(RuntimeError):
    """Raised when a benchmark's files are missing from the data root."""


@dataclass
class ImageBatch:
    """A batch of images with integer class labels.

    ``pixels``: float tensor [N, C, H, W], values in [0, 1].
    ``labels``: int64 tensor [N], entries in {0..K-1}.
    """

    pixels: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be [N,C,H,W], got shape {tuple(self.pixels.shape)}")
        if self.labels.dim() != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            raise ValueError("labels must be a vector aligned with pixels")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def validate(self, num_classes: Optional[int] = None) -> "ImageBatch":
        """Assert the value-range and label-range invariants; returns self."""
        lo, hi = self.pixels.min().item(), self.pixels.max().item()
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0,1]: min={lo}, max={hi}")
        if num_classes is not None and len(self) > 0:
            if int(self.labels.min()) < 0 or int(self.labels.max()) >= num_classes:
                raise ValueError("labels out of range for class count")
        return self

    def clone(self) -> "ImageBatch":
        return ImageBatch(self.pixels.clone(), self.labels.clone())

    def to(self, device) -> "ImageBatch":
        return ImageBatch(self.pixels.to(device), self.labels.to(device))


@dataclass
class SoftLabelBatch:
    """Per-sample probability vectors: 1-lambda on the true class, the rest
    spread uniformly over the other K-1 classes."""

    probs: torch.Tensor
    smoothing: float

    def __len__(self) -> int:
        return self.probs.shape[0]

    def validate(self) -> "SoftLabelBatch":
        rows = self.probs.sum(dim=1)
        if not torch.allclose(rows, torch.ones_like(rows), atol=1e-6):
            raise ValueError("soft-label rows must sum to 1")
        if self.probs.min().item() < 0:
            raise ValueError("soft-label entries must be nonnegative")
        return self


def make_soft_labels(labels: torch.Tensor, num_classes: int, smoothing: float) -> SoftLabelBatch:
    """Encode integer labels as label-smoothed probability rows.

    Row i carries ``1 - smoothing`` at ``labels[i]`` and
    ``smoothing / (num_classes - 1)`` everywhere else. ``smoothing`` must lie
    in [0, 1); at 0 this reduces to one-hot.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0,1), got {smoothing}")
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(labels) > 0 and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError("labels out of range")
    off_value = smoothing / (num_classes - 1)
    probs = torch.full((labels.shape[0], num_classes), off_value, dtype=torch.float32)
    probs.scatter_(1, labels.view(-1, 1), 1.0 - smoothing)
    return SoftLabelBatch(probs=probs, smoothing=float(smoothing))


class DatasetSplit:
    """An in-memory dataset split exposing deterministic batch iteration.

    Iteration order is a pure function of the shuffle seed, independent of
    worker count or prefetching, so twin runs can share data order exactly.
    """

    def __init__(self, name: str, split: str, pixels: torch.Tensor,
                 labels: torch.Tensor, num_classes: int):
        self.name = name
        self.split = split
        self.pixels = pixels
        self.labels = labels
        self.num_classes = num_classes

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_shape(self):
        return tuple(self.pixels.shape[1:])

    def as_batch(self) -> ImageBatch:
        return ImageBatch(self.pixels, self.labels)

    def subset(self, size: int, seed: int) -> "DatasetSplit":
        """Deterministic random subset; same (size, seed) -> same images."""
        if size > len(self):
            raise ValueError(f"subset_size {size} exceeds split size {len(self)}")
        idx = numpy_generator(seed).permutation(len(self))[:size]
        idx = torch.from_numpy(np.ascontiguousarray(idx))
        return DatasetSplit(self.name, self.split, self.pixels[idx],
                            self.labels[idx], self.num_classes)

    def batches(self, batch_size: int, shuffle_seed: Optional[int] = None,
                drop_last: bool = False) -> Iterator[ImageBatch]:
        order = np.arange(len(self))
        if shuffle_seed is not None:
            order = numpy_generator(shuffle_seed).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                return
            idx = torch.from_numpy(np.ascontiguousarray(idx))
            yield ImageBatch(self.pixels[idx], self.labels[idx])


def _gaussian_blob(center, sigma: float, height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    cy, cx = center
    return np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma ** 2))


def _synthetic_split(split: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Generate the fixed synthetic split (stable across calls and runs)."""
    n = SYNTHETIC_SPLIT_SIZES[split]
    c, h, w = SYNTHETIC_SHAPE
    rng = numpy_generator(derive_seed(_SYNTHETIC_BASE_SEED, split))
    labels = rng.integers(0, SYNTHETIC_CLASSES, size=n)
    templates = np.stack([
        _gaussian_blob(center, SYNTHETIC_BLOB_SIGMA, h, w)
        for center in SYNTHETIC_BLOB_CENTERS
    ])  # [K, H, W]
    images = np.full((n, c, h, w), 0.5, dtype=np.float64)
    images += SYNTHETIC_BLOB_AMPLITUDE * templates[labels][:, None, :, :]
    images += rng.normal(0.0, SYNTHETIC_NOISE_STD, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    return (torch.from_numpy(images.astype(np.float32)),
            torch.from_numpy(labels.astype(np.int64)))


def _resolve_root(root: Optional[str]) -> str:
    return root or os.environ.get(DATA_ROOT_ENV, DEFAULT_DATA_ROOT)


def _load_torchvision(name: str, split: str, root: str, download: bool):
    import torchvision

    train = split == "train"
    try:
        if name == "cifar10":
            ds = torchvision.datasets.CIFAR10(root, train=train, download=download)
            data = ds.data  # [N, 32, 32, 3] uint8
            labels = np.asarray(ds.targets)
            pixels = np.transpose(data, (0, 3, 1, 2))
            num_classes = 10
        elif name == "cifar100":
            ds = torchvision.datasets.CIFAR100(root, train=train, download=download)
            pixels = np.transpose(ds.data, (0, 3, 1, 2))
            labels = np.asarray(ds.targets)
            num_classes = 100
        elif name == "svhn":
            ds = torchvision.datasets.SVHN(root, split="train" if train else "test",
                                           download=download)
            pixels = ds.data  # already [N, 3, 32, 32] uint8
            labels = np.asarray(ds.labels)
            num_classes = 10
        else:  # pragma: no cover - guarded by caller
            raise ValueError(name)
    except RuntimeError as exc:
        raise DatasetNotFoundError(
            f"{name} files not found under '{root}'. Download them first, e.g. "
            f"load_dataset({name!r}, ..., download=True) with network access, or "
            f"point {DATA_ROOT_ENV} at an existing copy."
        ) from exc
    return (torch.from_numpy(pixels.astype(np.float32) / 255.0),
            torch.from_numpy(labels.astype(np.int64)),
            num_classes)


def load_dataset(name: str, split: str, subset_size: Optional[int] = None,
                 seed: int = 0, root: Optional[str] = None,
                 download: bool = False) -> DatasetSplit:
    """Load a dataset split with pixels scaled to [0, 1].

    ``subset_size`` draws a deterministic random subset under ``seed``; the
    same (name, split, subset_size, seed) always yields byte-identical data.
    The ``synthetic`` dataset is generated in-process and needs no files.
    """
    if name not in DATASET_NAMES:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASET_NAMES}")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")

    if name == "synthetic":
        pixels, labels = _synthetic_split(split)
        num_classes = SYNTHETIC_CLASSES
    else:
        pixels, labels, num_classes = _load_torchvision(
            name, split, _resolve_root(root), download)

    ds = DatasetSplit(name, split, pixels, labels, num_classes)
    if subset_size is not None:
        ds = ds.subset(subset_size, seed)
    return ds
