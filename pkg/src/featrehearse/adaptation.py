"""Feature adaptation: learn a map from the previous extractor's feature
space to the current one, then carry the memory across."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConfigurationError, batches
from .losses import loss_adapter_backward, loss_fd
from .memory import ClassSlot, FeatureMemory
from .nn import SGD, AdapterNetwork, CosineHead, DimensionError, Extractor, SgdConfig, extract, l2_normalize


@dataclass
class FeaturePairSet:
    v_old: np.ndarray   # (n, d) unit rows from the previous extractor
    v_new: np.ndarray   # (n, d) unit rows from the current extractor
    labels: np.ndarray  # (n,) head column indices

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class AdapterTrainConfig:
    alpha: float = 100.0
    epochs: int = 40
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    hidden: int | None = None   # defaults to 16 * d
    depth: int = 2
    init: str = "identity"
    holdout: float = 0.1

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")


def build_pairs(old_extractor: Extractor, new_extractor: Extractor, task_images: np.ndarray,
                labels: np.ndarray | None = None) -> FeaturePairSet:
    """Features of the same preprocessed images under both extractors."""
    if old_extractor.output_dim != new_extractor.output_dim:
        raise DimensionError("old and new extractors disagree on feature dim")
    n = task_images.shape[0]
    v_old, _ = l2_normalize(extract(old_extractor, task_images), axis=1)
    v_new, _ = l2_normalize(extract(new_extractor, task_images), axis=1)
    labels = np.zeros(n, np.int64) if labels is None else np.asarray(labels, np.int64)
    return FeaturePairSet(v_old, v_new, labels)


def train_adapter(pairs: FeaturePairSet, frozen_head: CosineHead, config: AdapterTrainConfig,
                  history: list | None = None) -> AdapterNetwork:
    """Mini-batch SGD on the adaptation loss; ``frozen_head`` is never updated.

    A seeded ``config.holdout`` fraction of pairs is kept aside; its mean
    similarity loss per epoch is appended to ``history`` when given.
    """
    n = len(pairs)
    if n == 0:
        raise ConfigurationError("cannot train an adapter on an empty pair set")
    dtype = pairs.v_old.dtype
    dim = pairs.v_old.shape[1]
    adapter = AdapterNetwork(dim, config.hidden, config.depth, seed=config.seed, dtype=dtype,
                             init=config.init)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_hold = int(config.holdout * n) if n >= 10 else 0
    hold, fit = perm[:n_hold], np.sort(perm[n_hold:])
    opt = SGD(SgdConfig(learning_rate=config.learning_rate, weight_decay=0.0,
                        momentum=config.momentum, epochs=config.epochs, milestones=()))
    params = dict(adapter.named_parameters())
    for epoch in range(config.epochs):
        for idx in batches(fit.shape[0], config.batch_size, config.seed * 1_000_003 + epoch):
            rows = fit[idx]
            adapter.zero_grad()
            loss_adapter_backward(pairs.v_old[rows], pairs.v_new[rows], pairs.labels[rows],
                                  frozen_head, adapter, config.alpha)
            opt.step(params, dict(adapter.named_grads()), epoch)
        if history is not None:
            val = (loss_fd(adapter.forward(pairs.v_old[hold]), pairs.v_new[hold])
                   if n_hold else float("nan"))
            history.append(val)
    return adapter


def adapt_memory(mem: FeatureMemory, adapter: AdapterNetwork) -> FeatureMemory:
    """Map every stored descriptor through ``adapter`` and renormalize."""
    if adapter.dim != mem.dim:
        raise DimensionError("adapter and memory dims differ")
    out = FeatureMemory(mem.dim, mem.budget)
    for c in mem.classes:
        slot = mem.slots[c]
        if len(slot):
            mapped = adapter.forward(slot.descriptors.astype(adapter.layers[0].params["w"].dtype))
            mapped, _ = l2_normalize(mapped.astype(np.float64), axis=1)
        else:
            mapped = slot.descriptors
        out.slots[c] = ClassSlot(mapped.astype(np.float32), slot.adapt_count + 1, slot.source.copy())
    return out
