"""Training objectives and their gradients.

Score-based losses are binary cross-entropy over sigmoid outputs, written in
logit space.  Batched inputs are ``(N, K)``; per-example losses are summed
over classes and averaged over the batch.  1-D inputs count as one example.
Every ``*_grad`` function returns ``(value, gradient)`` for the same value its
plain counterpart returns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import AdapterNetwork, CosineHead, DimensionError, Network, l2_normalize, l2_normalize_backward

LOGIT_CLAMP = 100.0


class OrchestrationError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_kd: float = 1.0
    gamma_fd: float = 0.05
    alpha_sim: float = 100.0

    def __post_init__(self):
        if min(self.lambda_kd, self.gamma_fd, self.alpha_sim) < 0:
            raise ValueError("loss weights must be non-negative")


def sigmoid(s: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def softplus(s: np.ndarray) -> np.ndarray:
    return np.maximum(s, 0) + np.log1p(np.exp(-np.abs(s)))


def _rows(a) -> np.ndarray:
    a = np.asarray(a)
    return a[None, :] if a.ndim == 1 else a


def _bce(scores, targets) -> tuple[float, np.ndarray]:
    s = np.clip(_rows(scores), -LOGIT_CLAMP, LOGIT_CLAMP)
    y = _rows(targets).astype(s.dtype, copy=False)
    n = s.shape[0]
    # -[y log sig(s) + (1-y) log(1-sig(s))] == softplus(s) - y*s
    value = float((softplus(s) - y * s).sum() / n)
    grad = (sigmoid(s) - y) / n
    # gradient of the clamp itself is zero outside the window
    grad = np.where(np.abs(_rows(scores)) > LOGIT_CLAMP, 0.0, grad).astype(s.dtype, copy=False)
    return value, grad


def one_hot(labels, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def loss_ce_grad(scores, target) -> tuple[float, np.ndarray]:
    value, grad = _bce(scores, target)
    return value, grad.reshape(np.shape(scores))


def loss_ce(scores, target) -> float:
    return loss_ce_grad(scores, target)[0]


def loss_kd_grad(new_scores, old_scores) -> tuple[float, np.ndarray]:
    """BCE of sigmoid(new) against soft targets sigmoid(old).

    ``new_scores`` may be wider than ``old_scores``; only the leading
    old-class columns enter the loss and the remaining gradient is zero.
    """
    new = _rows(new_scores)
    old = _rows(old_scores)
    k_old = old.shape[1]
    if new.shape[0] != old.shape[0] or new.shape[1] < k_old:
        raise DimensionError(f"kd shapes incompatible: new {new.shape}, old {old.shape}")
    targets = sigmoid(np.clip(old, -LOGIT_CLAMP, LOGIT_CLAMP))
    value, g = _bce(new[:, :k_old], targets)
    grad = np.zeros_like(new)
    grad[:, :k_old] = g
    return value, grad.reshape(np.shape(new_scores))


def loss_kd(new_scores, old_scores) -> float:
    if np.ndim(new_scores) == np.ndim(old_scores) and np.shape(new_scores)[-1] != np.shape(old_scores)[-1]:
        raise DimensionError("kd expects matching old-class score vectors")
    return loss_kd_grad(new_scores, old_scores)[0]


def cosine_grad(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine similarity and its gradient w.r.t. ``a``."""
    a, b = _rows(a), _rows(b)
    ahat, anorm = l2_normalize(a, axis=1)
    bhat, _ = l2_normalize(b, axis=1)
    cos = (ahat * bhat).sum(axis=1)
    return cos, l2_normalize_backward(a, anorm, bhat, axis=1)


def loss_fd_grad(v_new, v_old) -> tuple[float, np.ndarray]:
    """Mean ``1 - cos(v_new, v_old)``; gradient w.r.t. ``v_new`` only."""
    if np.shape(v_new) != np.shape(v_old):
        raise DimensionError("feature distillation expects equal shapes")
    cos, dcos = cosine_grad(v_new, v_old)
    n = cos.shape[0]
    value = float(np.clip(1.0 - cos, 0.0, 2.0).mean())
    return value, (-dcos / n).reshape(np.shape(v_new))


def loss_fd(v_new, v_old) -> float:
    return loss_fd_grad(v_new, v_old)[0]


def loss_total_backward(x, y, model: Network, frozen: Network | None, weights: LossWeights,
                        task_index: int = 1, n_old: int | None = None) -> tuple[float, dict]:
    """Forward + backward of the combined objective.

    ``y`` holds head column indices.  Gradients are accumulated into
    ``model``; ``frozen`` is only read.  Returns the total and its parts.
    """
    if task_index >= 2 and frozen is None:
        raise OrchestrationError("frozen previous model required for task >= 2")
    v, s = model.forward(x)
    target = one_hot(y, s.shape[1], dtype=s.dtype)
    ce, ds = loss_ce_grad(s, target)
    parts = {"ce": ce, "kd": 0.0, "fd": 0.0}
    dv = None
    if task_index >= 2:
        v_old, s_old = frozen.forward(x)
        if n_old is not None:
            s_old = s_old[:, :n_old]
        kd, dkd = loss_kd_grad(s, s_old)
        fd, dfd = loss_fd_grad(v, v_old)
        parts["kd"], parts["fd"] = kd, fd
        ds = ds + weights.lambda_kd * dkd
        dv = weights.gamma_fd * dfd
    model.backward(ds, dv)
    if task_index >= 2:
        total = ce + weights.lambda_kd * parts["kd"] + weights.gamma_fd * parts["fd"]
    else:
        total = ce
    return total, parts


def loss_total(x, y, model: Network, frozen: Network | None, weights: LossWeights,
               task_index: int = 1, n_old: int | None = None) -> float:
    """Combined objective value: CE alone at the first task, CE + KD + FD after."""
    if task_index >= 2 and frozen is None:
        raise OrchestrationError("frozen previous model required for task >= 2")
    v, s = model.forward(x)
    ce = loss_ce(s, one_hot(y, s.shape[1], dtype=s.dtype))
    if task_index < 2:
        return ce
    v_old, s_old = frozen.forward(x)
    if n_old is not None:
        s_old = s_old[:, :n_old]
    return ce + weights.lambda_kd * loss_kd_grad(s, s_old)[0] + weights.gamma_fd * loss_fd(v, v_old)


def loss_adapter_backward(v_old, v_new, y, head: CosineHead, adapter: AdapterNetwork,
                          alpha: float) -> tuple[float, dict]:
    """``alpha * (1 - cos(v_new, phi(v_old))) + BCE(head(phi(v_old)), y)``.

    Gradients are accumulated into ``adapter`` only; the head's parameters
    and gradient buffers are left untouched.
    """
    v_old, v_new = _rows(v_old), _rows(v_new)
    mapped = adapter.forward(v_old)
    sim, dsim = loss_fd_grad(mapped, v_new)
    saved = {k: g.copy() for k, g in head.grads.items()}
    s = head.forward(mapped)
    cls, ds = loss_ce_grad(s, one_hot(y, s.shape[1], dtype=s.dtype))
    dmapped = head.backward(ds)
    head.grads = saved
    adapter.backward(alpha * dsim + dmapped)
    return alpha * sim + cls, {"sim": sim, "cls": cls}


def loss_adapter(v_old, v_new, y, head: CosineHead, adapter: AdapterNetwork, alpha: float) -> float:
    mapped = adapter.forward(_rows(v_old))
    s = head.forward(mapped)
    return alpha * loss_fd(mapped, _rows(v_new)) + loss_ce(s, one_hot(y, s.shape[1], dtype=s.dtype))
