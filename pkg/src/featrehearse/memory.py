"""Rehearsal memory: per-class feature descriptors, image exemplars, herding
and storage accounting."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .nn import l2_normalize

MEM_MAGIC = b"FRMEM1"
MEM_VERSION = 1
NORM_TOL = 1e-5


class ConsistencyError(ValueError):
    pass


class EmptyClassError(ValueError):
    pass


class CorruptArtifactError(ValueError):
    pass


def herding_select(features: np.ndarray, budget: int) -> np.ndarray:
    """Greedy ordering whose running mean tracks the mean of ``features``.

    Step k picks the unused row minimizing ``||mu - mean(selected + [row])||``;
    ties go to the lowest index.  Returns ``min(budget, N)`` distinct indices.
    """
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyClassError("herding needs at least one feature vector")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    return _kernels.herding(x.astype(np.float64), int(budget))


@dataclass
class ClassSlot:
    descriptors: np.ndarray       # (n, d) float32, unit rows
    adapt_count: np.ndarray       # (n,) int32
    source: np.ndarray            # (n,) int64 index into the training set, -1 if unknown

    def __len__(self) -> int:
        return self.descriptors.shape[0]


@dataclass
class FeatureMemory:
    dim: int
    budget: int
    slots: dict[int, ClassSlot] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.slots)

    def counts(self) -> dict[int, int]:
        return {c: len(self.slots[c]) for c in self.classes}

    def __len__(self) -> int:
        return sum(len(s) for s in self.slots.values())

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Descriptors and labels stacked in ascending class order."""
        if not self.slots:
            return np.zeros((0, self.dim), np.float32), np.zeros(0, np.int64)
        feats = [self.slots[c].descriptors for c in self.classes]
        labels = [np.full(len(self.slots[c]), c, dtype=np.int64) for c in self.classes]
        return np.concatenate(feats), np.concatenate(labels)

    def check(self) -> None:
        for c, slot in self.slots.items():
            if len(slot) > self.budget:
                raise ConsistencyError(f"class {c} holds {len(slot)} > {self.budget} descriptors")
            norms = np.linalg.norm(slot.descriptors.astype(np.float64), axis=1)
            if len(slot) and np.max(np.abs(norms - 1.0)) > NORM_TOL:
                raise ConsistencyError(f"class {c} holds non-unit descriptors")
            if np.any(slot.adapt_count < 0):
                raise ConsistencyError("negative adapt_count")

    def copy(self) -> "FeatureMemory":
        return FeatureMemory(self.dim, self.budget, {
            c: ClassSlot(s.descriptors.copy(), s.adapt_count.copy(), s.source.copy())
            for c, s in self.slots.items()})


def store_task_features(mem: FeatureMemory, features: np.ndarray, labels: np.ndarray,
                        task_classes=None, sources: np.ndarray | None = None) -> FeatureMemory:
    """Herd each class of the current task down to the budget and add it.

    Returns a new memory; ``mem`` is not modified.
    """
    labels = np.asarray(labels, dtype=np.int64)
    feats, _ = l2_normalize(np.asarray(features, dtype=np.float64), axis=1)
    allowed = set(np.unique(labels).tolist()) if task_classes is None else set(int(c) for c in task_classes)
    bad = set(np.unique(labels).tolist()) - allowed
    if bad:
        raise ConsistencyError(f"labels {sorted(bad)} are outside the current task")
    if sources is None:
        sources = np.full(labels.shape[0], -1, dtype=np.int64)
    out = mem.copy()
    if mem.budget == 0:
        return out
    for c in sorted(allowed):
        rows = np.flatnonzero(labels == c)
        if rows.size == 0:
            continue
        if c in out.slots:
            raise ConsistencyError(f"class {c} already present in memory")
        keep = rows[herding_select(feats[rows], mem.budget)]
        out.slots[c] = ClassSlot(
            descriptors=feats[keep].astype(np.float32),
            adapt_count=np.zeros(keep.size, dtype=np.int32),
            source=np.asarray(sources, dtype=np.int64)[keep],
        )
    return out


@dataclass
class ImageExemplarStore:
    budget: int
    images: dict[int, np.ndarray] = field(default_factory=dict)   # class -> (n, H, W, C) uint8
    source: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.images)

    def counts(self) -> dict[int, int]:
        return {c: self.images[c].shape[0] for c in self.classes}

    def add(self, cls: int, images: np.ndarray, source: np.ndarray | None = None) -> None:
        if images.shape[0] > self.budget:
            raise ConsistencyError(f"{images.shape[0]} exemplars exceed budget {self.budget}")
        self.images[int(cls)] = np.asarray(images, dtype=np.uint8)
        self.source[int(cls)] = (np.full(images.shape[0], -1, np.int64) if source is None
                                 else np.asarray(source, np.int64))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.images:
            return np.zeros((0, 0, 0, 0), np.uint8), np.zeros(0, np.int64)
        imgs = np.concatenate([self.images[c] for c in self.classes])
        labels = np.concatenate([np.full(self.images[c].shape[0], c, np.int64) for c in self.classes])
        return imgs, labels


# ---------------------------------------------------------------------------
# footprint
# ---------------------------------------------------------------------------


def to_kib(n_bytes: int) -> float:
    return n_bytes / 1024


def to_kb(n_bytes: int) -> float:
    return n_bytes / 1000


def to_mib(n_bytes: int) -> float:
    return n_bytes / 2 ** 20


@dataclass
class FootprintReport:
    feature_bytes: int
    image_bytes: int
    total_bytes: int
    per_class: dict[int, dict[str, int]]

    def to_json(self) -> dict:
        return {
            "feature_bytes": self.feature_bytes,
            "image_bytes": self.image_bytes,
            "total_bytes": self.total_bytes,
            "total_mib": to_mib(self.total_bytes),
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
        }


def footprint_from_counts(feature_counts: dict[int, int], image_counts: dict[int, int], dim: int,
                          image_shape: tuple[int, ...], bytes_per_feature_element: int = 4) -> FootprintReport:
    """Uncompressed bytes: descriptors are ``d`` floats, images are uint8 H*W*C.

    Stored labels are not counted.
    """
    per_image = int(np.prod(image_shape)) if image_shape else 0
    per_feature = dim * bytes_per_feature_element
    per_class = {}
    for c in sorted(set(feature_counts) | set(image_counts)):
        fb = feature_counts.get(c, 0) * per_feature
        ib = image_counts.get(c, 0) * per_image
        per_class[int(c)] = {"feature_bytes": fb, "image_bytes": ib}
    fbytes = sum(v["feature_bytes"] for v in per_class.values())
    ibytes = sum(v["image_bytes"] for v in per_class.values())
    return FootprintReport(fbytes, ibytes, fbytes + ibytes, per_class)


def footprint(mem: FeatureMemory | None, imgs: ImageExemplarStore | None, image_shape,
              bytes_per_feature_element: int = 4) -> FootprintReport:
    fc = mem.counts() if mem is not None else {}
    ic = imgs.counts() if imgs is not None else {}
    dim = mem.dim if mem is not None else 0
    return footprint_from_counts(fc, ic, dim, tuple(image_shape), bytes_per_feature_element)


# ---------------------------------------------------------------------------
# snapshot file
# ---------------------------------------------------------------------------
#
# little-endian:
#   b"FRMEM1" | u16 version | u32 d | u32 budget | u32 n_classes
#   per class: i32 class_id | u32 count | i32[count] adapt_count | f32[count*d]


def save_memory(mem: FeatureMemory, path) -> None:
    parts = [MEM_MAGIC, struct.pack("<HIII", MEM_VERSION, mem.dim, mem.budget, len(mem.slots))]
    for c in mem.classes:
        slot = mem.slots[c]
        parts.append(struct.pack("<iI", c, len(slot)))
        parts.append(slot.adapt_count.astype("<i4").tobytes())
        parts.append(slot.descriptors.astype("<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_memory(path) -> FeatureMemory:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:6] != MEM_MAGIC:
        raise CorruptArtifactError(f"{path}: bad magic")
    try:
        version, dim, budget, n_classes = struct.unpack_from("<HIII", raw, 6)
        if version != MEM_VERSION:
            raise CorruptArtifactError(f"{path}: unsupported version {version}")
        off = 6 + 14
        mem = FeatureMemory(dim, budget)
        for _ in range(n_classes):
            c, n = struct.unpack_from("<iI", raw, off)
            off += 8
            counts = np.frombuffer(raw, "<i4", n, off).astype(np.int32)
            off += 4 * n
            desc = np.frombuffer(raw, "<f4", n * dim, off).reshape(n, dim).astype(np.float32)
            off += 4 * n * dim
            mem.slots[c] = ClassSlot(desc, counts, np.full(n, -1, np.int64))
    except struct.error as exc:
        raise CorruptArtifactError(f"{path}: truncated ({exc})") from exc
    except ValueError as exc:
        if isinstance(exc, CorruptArtifactError):
            raise
        raise CorruptArtifactError(f"{path}: truncated ({exc})") from exc
    if off != len(raw):
        raise CorruptArtifactError(f"{path}: {len(raw) - off} trailing bytes")
    return mem
