"""One-vs-rest linear SVM trained on memory descriptors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memory import ConsistencyError, FeatureMemory

UNIT_TOL = 1e-3


@dataclass
class FeatureClassifier:
    weights: np.ndarray        # (d, K)
    bias: np.ndarray           # (K,)
    classes: np.ndarray        # (K,) class ids, ascending
    c_reg: float = 1.0

    def scores(self, features: np.ndarray) -> np.ndarray:
        return np.atleast_2d(features) @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return classify(self, features)


@dataclass
class HeadClassifier:
    """Classify with the network's own cosine head (baseline modes)."""
    head: object               # nn.CosineHead
    classes: np.ndarray        # class id of each head column

    def scores(self, features: np.ndarray) -> np.ndarray:
        return self.head.forward(np.atleast_2d(features).astype(self.head.dtype))

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(features), axis=1)]


def balanced_indices(labels: np.ndarray, seed: int) -> np.ndarray:
    """Seeded subsample giving every class the minimum class count."""
    classes, counts = np.unique(labels, return_counts=True)
    m = counts.min()
    rng = np.random.default_rng(seed)
    keep = []
    for c in classes:
        rows = np.flatnonzero(labels == c)
        keep.append(np.sort(rng.choice(rows, size=m, replace=False)) if rows.size > m else rows)
    return np.concatenate(keep)


def train_svm(features: np.ndarray, labels: np.ndarray, seed: int = 0, c_reg: float = 1.0,
              epochs: int = 100, batch_size: int = 128, learning_rate: float = 0.1,
              standardize: bool = True) -> FeatureClassifier:
    """Minimize ``||w||^2 / (2 C n) + mean hinge`` per class by mini-batch subgradient descent.

    Step size decays as ``lr / sqrt(1 + epoch)``; the bias is unregularized.
    With ``standardize`` the descent runs on per-dimension standardized
    inputs (unit-norm descriptors sit in a narrow cone, which stalls plain
    subgradient steps) and the affine map is folded back into the returned
    weights, so the classifier still scores raw features.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    n, d = x.shape
    if standardize:
        mu = x.mean(axis=0)
        sd = x.std(axis=0) + 1e-8
    else:
        mu, sd = np.zeros(d), np.ones(d)
    x = (x - mu) / sd
    y = np.where(labels[:, None] == classes[None, :], 1.0, -1.0)
    w = np.zeros((d, classes.size))
    b = np.zeros(classes.size)
    lam = 1.0 / (c_reg * n)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        lr = learning_rate / np.sqrt(1.0 + epoch)
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            rows = perm[i:i + batch_size]
            xb, yb = x[rows], y[rows]
            active = (yb * (xb @ w + b)) < 1.0
            coef = yb * active
            gw = lam * w - xb.T @ coef / rows.size
            gb = -coef.sum(axis=0) / rows.size
            w -= lr * gw
            b -= lr * gb
    w = w / sd[:, None]
    return FeatureClassifier(w, b - mu @ w, classes, c_reg)


def train_feature_classifier(mem: FeatureMemory, seed: int = 0, balanced: bool = True,
                             extra_features: np.ndarray | None = None, extra_labels: np.ndarray | None = None,
                             **svm_kwargs) -> FeatureClassifier:
    """Train on all memory descriptors plus an optional extra pool.

    ``extra_*`` carries exact features of stored images (hybrid mode) or the
    full new-class pool (unbalanced ablation).
    """
    for c, slot in mem.slots.items():
        if len(slot) == 0:
            raise ConsistencyError(f"class {c} has no descriptors")
    feats, labels = mem.arrays()
    if extra_features is not None and len(extra_features):
        feats = np.concatenate([feats, np.asarray(extra_features, feats.dtype)])
        labels = np.concatenate([labels, np.asarray(extra_labels, np.int64)])
    if labels.size == 0:
        raise ConsistencyError("classifier needs a non-empty memory")
    if balanced:
        keep = balanced_indices(labels, seed)
        feats, labels = feats[keep], labels[keep]
    return train_svm(feats, labels, seed=seed, **svm_kwargs)


def classify(clf: FeatureClassifier, features: np.ndarray) -> np.ndarray:
    """Argmax class id per row; ties resolve to the lowest class id.

    Rows must already be unit length.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    norms = np.linalg.norm(feats, axis=1)
    if feats.shape[0] and np.any((np.abs(norms - 1.0) > UNIT_TOL) & (norms > 0)):
        raise ValueError("classify expects l2-normalized features")
    return clf.classes[np.argmax(clf.scores(feats), axis=1)]
