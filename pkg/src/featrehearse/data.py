"""Dataset ingestion (IDX, CIFAR binary), class-incremental task splits and
mini-batching.

Images are kept as ``(N, H, W, C)`` uint8 and converted to normalized float
NCHW only when fed to a network.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 32 * 32 * 3
DATA_ENV = "FEATREHEARSE_DATA"


class DataFormatError(ValueError):
    pass


class DataConsistencyError(ValueError):
    pass


class EmptyDatasetError(DataFormatError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray    # (N, H, W, C) uint8
    labels: np.ndarray    # (N,) int64
    class_count: int

    def __post_init__(self):
        if self.images.shape[0] == 0:
            raise EmptyDatasetError("dataset is empty")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataConsistencyError("image and label counts differ")
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DataFormatError("images must be (N, H, W, C) uint8")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataConsistencyError("label outside [0, class_count)")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.images[idx].copy(), self.labels[idx].copy(), self.class_count)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read one IDX file of unsigned bytes; returns its n-d array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DataFormatError(f"{path}: bad IDX magic {raw[:4].hex()}")
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) != need:
        raise DataFormatError(f"{path}: expected {need} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx_dataset(images_path, labels_path=None, class_count: int | None = None) -> LabeledDataset:
    """Load an IDX image/label file pair.

    ``images_path`` may also be a prefix such as ``root/train`` resolving to
    ``train-images-idx3-ubyte`` / ``train-labels-idx1-ubyte`` (optionally
    ``.gz``).
    """
    if labels_path is None:
        images_path, labels_path = _resolve_idx_pair(images_path)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if _magic(images_path) != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: not a 3-d image file")
    if _magic(labels_path) != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: not a 1-d label file")
    if images.shape[0] != labels.shape[0]:
        raise DataConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    labels = labels.astype(np.int64)
    k = class_count if class_count is not None else int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(images[..., None].copy(), labels, k)


def _magic(path) -> int:
    with _open(path) as fh:
        return struct.unpack(">I", fh.read(4))[0]


def _resolve_idx_pair(prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    for suffix in ("", ".gz"):
        img = prefix.parent / f"{prefix.name}-images-idx3-ubyte{suffix}"
        lab = prefix.parent / f"{prefix.name}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return img, lab
    raise FileNotFoundError(f"no IDX pair for prefix {prefix}")


def save_idx_dataset(data: LabeledDataset, prefix) -> None:
    prefix = Path(prefix)
    if data.images.shape[-1] != 1:
        raise DataFormatError("IDX image files hold single-channel images")
    write_idx(prefix.parent / f"{prefix.name}-images-idx3-ubyte", data.images[..., 0])
    write_idx(prefix.parent / f"{prefix.name}-labels-idx1-ubyte", data.labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# CIFAR binary
# ---------------------------------------------------------------------------


def load_cifar_binary(path, label_bytes: int = 1, class_count: int | None = None) -> LabeledDataset:
    """Read CIFAR binary records: label byte(s) then R, G, B 32x32 planes.

    With ``label_bytes=2`` (CIFAR-100) the second byte, the fine label, is
    used.  ``path`` may be a list of batch files.
    """
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    rec = label_bytes + CIFAR_PIXELS
    images, labels = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) == 0:
            raise EmptyDatasetError(f"{p}: empty file")
        if len(raw) % rec:
            raise DataFormatError(f"{p}: length {len(raw)} is not a multiple of {rec}")
        arr = np.frombuffer(raw, np.uint8).reshape(-1, rec)
        labels.append(arr[:, label_bytes - 1].astype(np.int64))
        images.append(arr[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    labels_all = np.concatenate(labels)
    k = class_count if class_count is not None else (100 if label_bytes == 2 else 10)
    return LabeledDataset(np.ascontiguousarray(np.concatenate(images)), labels_all, k)


def write_cifar_binary(path, data: LabeledDataset) -> None:
    planes = data.images.transpose(0, 3, 1, 2).reshape(len(data), -1)
    recs = np.concatenate([data.labels.astype(np.uint8)[:, None], planes], axis=1)
    Path(path).write_bytes(recs.tobytes())


# ---------------------------------------------------------------------------
# task stream
# ---------------------------------------------------------------------------


@dataclass
class TaskSplit:
    task_index: int
    classes: tuple[int, ...]
    seen_classes: tuple[int, ...]
    _train: LabeledDataset
    _test: LabeledDataset
    _train_rows: np.ndarray
    _test_rows: np.ndarray
    access_log: list | None = field(default=None, repr=False)

    def _log(self, what: str) -> None:
        if self.access_log is not None:
            self.access_log.append((self.task_index, what))

    @property
    def train_indices(self) -> np.ndarray:
        """Row indices of this task's examples in the full training set."""
        return self._train_rows

    @property
    def train_images(self) -> np.ndarray:
        self._log("train")
        return self._train.images[self._train_rows]

    @property
    def train_labels(self) -> np.ndarray:
        return self._train.labels[self._train_rows]

    @property
    def test_images(self) -> np.ndarray:
        self._log("test")
        return self._test.images[self._test_rows]

    @property
    def test_labels(self) -> np.ndarray:
        return self._test.labels[self._test_rows]

    def __len__(self) -> int:
        return self._train_rows.shape[0]


@dataclass
class TaskStream:
    tasks: list[TaskSplit]
    class_order: np.ndarray
    classes_per_task: int
    train: LabeledDataset
    test: LabeledDataset

    @property
    def task_count(self) -> int:
        return len(self.tasks)

    def enable_access_log(self) -> list:
        log: list = []
        for t in self.tasks:
            t.access_log = log
        return log

    def source_images(self, rows: np.ndarray) -> np.ndarray:
        """Raw training images by global row; diagnostics only."""
        return self.train.images[rows]


def split_tasks(data: LabeledDataset, test: LabeledDataset, M: int, seed: int) -> TaskStream:
    """Partition classes into tasks of ``M`` following a seeded permutation.

    When ``M`` does not divide the class count the last task takes the
    remainder.
    """
    K = data.class_count
    if M < 1 or M > K:
        raise ConfigurationError(f"classes per task M={M} must lie in [1, {K}]")
    order = np.random.default_rng(seed).permutation(K)
    tasks = []
    for t, start in enumerate(range(0, K, M), start=1):
        cls = tuple(int(c) for c in order[start:start + M])
        seen = tuple(int(c) for c in order[:start + M])
        train_rows = np.flatnonzero(np.isin(data.labels, cls))
        test_rows = np.flatnonzero(np.isin(test.labels, seen))
        tasks.append(TaskSplit(t, cls, seen, data, test, train_rows, test_rows))
    return TaskStream(tasks, order, M, data, test)


def batches(split, batch_size: int, epoch_seed: int):
    """Yield shuffled index arrays covering ``split`` once.

    ``split`` is a TaskSplit or an integer example count; indices are
    positions within the split.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    n = split if isinstance(split, (int, np.integer)) else len(split)
    perm = np.random.default_rng(epoch_seed).permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def stratified_holdout(data: LabeledDataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random holdout; returns (kept rows, held-out rows)."""
    rng = np.random.default_rng(seed)
    keep, hold = [], []
    for c in range(data.class_count):
        rows = np.flatnonzero(data.labels == c)
        rows = rows[rng.permutation(rows.size)]
        n_hold = int(round(fraction * rows.size))
        hold.append(rows[:n_hold])
        keep.append(rows[n_hold:])
    return np.sort(np.concatenate(keep)), np.sort(np.concatenate(hold))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


@dataclass
class Normalizer:
    """Scale to [0, 1] then standardize per channel with frozen statistics."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images: np.ndarray) -> "Normalizer":
        x = images.astype(np.float64) / 255.0
        mean = x.mean(axis=(0, 1, 2))
        std = x.std(axis=(0, 1, 2))
        return cls(mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32))

    def __call__(self, images: np.ndarray, dtype=np.float32) -> np.ndarray:
        x = images.astype(dtype) / dtype(255.0)
        x = (x - self.mean.astype(dtype)) / self.std.astype(dtype)
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and pad-and-crop on uint8 NHWC images."""
    n, h, w, _ = images.shape
    out = images.copy()
    flip = rng.random(n) < 0.5
    out[flip] = out[flip][:, :, ::-1]
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    for i in range(n):
        out[i] = padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


# ---------------------------------------------------------------------------
# dataset registry
# ---------------------------------------------------------------------------


def data_root(explicit=None) -> Path:
    root = explicit or os.environ.get(DATA_ENV)
    if not root:
        raise FileNotFoundError(f"no data root given and ${DATA_ENV} unset")
    return Path(root)


def load_named(name: str, root) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/test pair for ``mnist`` (any IDX pair named train/t10k),
    ``cifar10`` or ``cifar100`` binary releases under ``root``."""
    root = Path(root)
    if name == "mnist":
        return (load_idx_dataset(root / "train", class_count=10),
                load_idx_dataset(root / "t10k", class_count=10))
    if name == "cifar10":
        base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").exists() else root
        train = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
        return load_cifar_binary(train), load_cifar_binary(base / "test_batch.bin")
    if name == "cifar100":
        base = root / "cifar-100-binary" if (root / "cifar-100-binary").exists() else root
        return (load_cifar_binary(base / "train.bin", label_bytes=2),
                load_cifar_binary(base / "test.bin", label_bytes=2))
    raise ConfigurationError(f"unknown dataset {name!r}")
