"""CIFAR-10 ingestion, seeded train/validation split and pad-and-crop augmentation."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import DataError, FormatError, UsageError

RECORD_BYTES = 1 + 3 * 32 * 32
NUM_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
DATA_ENV_VAR = "CIFAR10_ROOT"
AUGMENT_SHIFT = 4


@dataclass
class Dataset:
    images: np.ndarray  # N×3×32×32 uint8
    labels: np.ndarray  # N int64
    role: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        if len(idx) and (idx.min() < 0 or idx.max() >= len(self)):
            raise DataError(f"subset index out of range [0, {len(self)})")
        return replace(self, images=self.images[idx], labels=self.labels[idx])


@dataclass
class SplitDataset:
    train: Dataset
    validation: Dataset
    train_indices: np.ndarray
    validation_indices: np.ndarray


def parse_cifar_bytes(raw: bytes, source: str = "<bytes>") -> Dataset:
    """Parse records of one label byte followed by 3072 pixel bytes (R, G, B planes)."""
    if len(raw) % RECORD_BYTES:
        n_full = len(raw) // RECORD_BYTES
        raise FormatError(
            f"{source}: truncated record at byte offset {n_full * RECORD_BYTES} "
            f"({len(raw)} bytes is not a multiple of {RECORD_BYTES})"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if len(bad):
        raise DataError(
            f"{source}: label {labels[bad[0]]} >= {NUM_CLASSES} in record {bad[0]} "
            f"(byte offset {bad[0] * RECORD_BYTES})"
        )
    images = arr[:, 1:].reshape(-1, 3, 32, 32).copy()
    return Dataset(images, labels)


def load_cifar_batch(path) -> Dataset:
    path = Path(path)
    return parse_cifar_bytes(path.read_bytes(), str(path))


def resolve_data_root(path=None) -> Path:
    """``path`` if given, else the ``CIFAR10_ROOT`` environment variable."""
    if path is None or str(path) == "":
        path = os.environ.get(DATA_ENV_VAR)
        if not path:
            raise FileNotFoundError(f"no dataset path given and ${DATA_ENV_VAR} is not set")
    root = Path(path)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    return root


def load_cifar10(path=None, split: str = "train") -> Dataset:
    """Load the training (five batches) or test batch from a CIFAR-10 binary directory.

    ``path`` may also name a single batch file.
    """
    root = resolve_data_root(path)
    if root.is_file():
        ds = load_cifar_batch(root)
    else:
        names = {"train": TRAIN_FILES, "test": TEST_FILES}.get(split)
        if names is None:
            raise UsageError(f"split must be 'train' or 'test', got {split!r}")
        missing = [n for n in names if not (root / n).is_file()]
        if missing:
            raise FileNotFoundError(f"{root}: missing CIFAR-10 batch files {missing}")
        parts = [load_cifar_batch(root / n) for n in names]
        ds = Dataset(np.concatenate([p.images for p in parts]),
                     np.concatenate([p.labels for p in parts]))
    ds.role = "test" if split == "test" else "train"
    return ds


def write_cifar_batch(path, images: np.ndarray, labels) -> None:
    """Write records in the CIFAR-10 binary format (used for fixtures and subsets)."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), -1)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.hstack([labels, images]).tobytes())


def split(dataset: Dataset, fraction: float = 0.1, seed: int = 0) -> SplitDataset:
    """Seeded shuffle; the last ``ceil(fraction * N)`` shuffled examples validate."""
    if not 0 < fraction < 1:
        raise DataError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    n_val = math.ceil(round(fraction * n, 9))
    perm = np.random.default_rng(seed).permutation(n)
    tr, va = perm[: n - n_val], perm[n - n_val:]
    train = dataset.subset(tr)
    train.role = "train"
    val = dataset.subset(va)
    val.role = "validation"
    return SplitDataset(train, val, tr, va)


def sample_augmentation(n: int, rng: np.random.Generator):
    """Per-image vertical shift, horizontal shift (pixels in [-4, 4]) and flip flag."""
    dy = rng.integers(-AUGMENT_SHIFT, AUGMENT_SHIFT + 1, size=n)
    dx = rng.integers(-AUGMENT_SHIFT, AUGMENT_SHIFT + 1, size=n)
    flip = rng.random(n) < 0.5
    return dy, dx, flip


def apply_augmentation(batch: np.ndarray, dy, dx, flip) -> np.ndarray:
    """Zero-pad by 4, crop so content moves by ``(dy, dx)``, then mirror flagged images.

    A shift of ``(+4, +4)`` moves the top-left of the input to the bottom-right.
    """
    n, _, h, w = batch.shape
    p = AUGMENT_SHIFT
    padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)))
    rows = (p - np.asarray(dy))[:, None] + np.arange(h)[None, :]
    cols = (p - np.asarray(dx))[:, None] + np.arange(w)[None, :]
    out = padded[np.arange(n)[:, None, None, None], np.arange(batch.shape[1])[None, :, None, None],
                 rows[:, None, :, None], cols[:, None, None, :]]
    flip = np.asarray(flip, dtype=bool)
    out[flip] = out[flip][..., ::-1]
    return out


def augment(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return apply_augmentation(batch, *sample_augmentation(len(batch), rng))


def to_float(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Scale uint8 pixels to [0, 1]."""
    if images.dtype == np.uint8:
        return images.astype(dtype) / np.asarray(255.0, dtype=dtype)
    return images.astype(dtype, copy=False)


def iterate_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None,
                    augment_rng: np.random.Generator | None = None, dtype=np.float32):
    """Yield ``(images, labels)`` float batches; shuffled when ``rng`` is given.

    Augmentation is applied only when ``augment_rng`` is given, and only to
    training data.
    """
    if augment_rng is not None and dataset.role != "train":
        raise UsageError(f"refusing to augment {dataset.role} data")
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        images = dataset.images[idx]
        if augment_rng is not None:
            images = augment(images, augment_rng)
        yield to_float(images, dtype), dataset.labels[idx]


def read_manifest(path) -> np.ndarray:
    """Record indices, one per line; blank lines and ``#`` comments ignored."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            try:
                out.append(int(line))
            except ValueError:
                raise FormatError(f"{path}: bad manifest line {line!r}") from None
    return np.asarray(out, dtype=np.int64)


def write_manifest(path, indices) -> None:
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices))


def subset_indices(dataset: Dataset, size: int, seed: int = 0) -> np.ndarray:
    """Class-balanced random subset of ``size`` record indices, in ascending order."""
    if not 0 < size <= len(dataset):
        raise DataError(f"subset size {size} outside (0, {len(dataset)}]")
    rng = np.random.default_rng(seed)
    classes = np.unique(dataset.labels)
    per_class = size // len(classes)
    chosen, rest = [], []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        chosen.append(idx[:per_class])
        rest.append(idx[per_class:])
    pool = rng.permutation(np.concatenate(rest))
    chosen.append(pool[: size - sum(len(c) for c in chosen)])
    out = np.sort(np.concatenate(chosen))
    if len(out) != size:
        raise DataError(f"could not draw {size} records from {len(dataset)}")
    return out
