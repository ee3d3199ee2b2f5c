"""Hot inner loops: im2col/col2im, 2x2 max pooling, herding.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature and the same results.  The numba path is used when numba is
importable and ``FEATREHEARSE_NO_NUMBA`` is unset (or ``0``).
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None

ENV_FLAG = "FEATREHEARSE_NO_NUMBA"


def numba_enabled() -> bool:
    return nb is not None and os.environ.get(ENV_FLAG, "0") in ("", "0")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def im2col_np(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, OH, OW, C*k*k) patches for a stride-1 valid conv."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, OH, OW, k, k
    oh, ow = h - k + 1, w - k + 1
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh, ow, c * k * k)


def col2im_np(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    n, oh, ow, _ = cols.shape
    cols6 = cols.reshape(n, oh, ow, c, k, k)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + oh, j:j + ow] += cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def maxpool2_np(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pool. Returns (out, argmax within window in 0..3).

    Ties go to the first position in row-major window order.  Odd trailing
    rows/columns are dropped.
    """
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    win = x[:, :, :oh * 2, :ow * 2].reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2_backward_np(dout: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c, oh, ow = dout.shape
    win = np.zeros((n, c, oh, ow, 4), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    win = win.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * 2, ow * 2)
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    dx[:, :, :oh * 2, :ow * 2] = win
    return dx


def herding_np(x: np.ndarray, budget: int) -> np.ndarray:
    n = x.shape[0]
    mu = x.mean(axis=0)
    running = np.zeros_like(mu)
    taken = np.zeros(n, dtype=bool)
    order = np.empty(min(budget, n), dtype=np.int64)
    for step in range(order.shape[0]):
        cand = (running[None, :] + x) / (step + 1)
        dist = np.sqrt(((mu[None, :] - cand) ** 2).sum(axis=1))
        dist[taken] = np.inf
        best = int(np.argmin(dist))
        order[step] = best
        taken[best] = True
        running = running + x[best]
    return order


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if nb is not None:

    @nb.njit(cache=True)
    def _im2col_nb(x, k):
        n, c, h, w = x.shape
        oh, ow = h - k + 1, w - k + 1
        cols = np.empty((n, oh, ow, c * k * k), dtype=x.dtype)
        for b in range(n):
            for y in range(oh):
                for z in range(ow):
                    p = 0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                cols[b, y, z, p] = x[b, ch, y + i, z + j]
                                p += 1
        return cols

    @nb.njit(cache=True)
    def _col2im_nb(cols, c, h, w, k):
        n, oh, ow, _ = cols.shape
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for b in range(n):
            for y in range(oh):
                for z in range(ow):
                    p = 0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                out[b, ch, y + i, z + j] += cols[b, y, z, p]
                                p += 1
        return out

    @nb.njit(cache=True)
    def _maxpool2_nb(x):
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        idx = np.empty((n, c, oh, ow), dtype=np.int8)
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for z in range(ow):
                        best = x[b, ch, 2 * y, 2 * z]
                        arg = 0
                        for q in range(1, 4):
                            v = x[b, ch, 2 * y + q // 2, 2 * z + q % 2]
                            if v > best:
                                best = v
                                arg = q
                        out[b, ch, y, z] = best
                        idx[b, ch, y, z] = arg
        return out, idx

    @nb.njit(cache=True)
    def _maxpool2_backward_nb(dout, idx, h, w):
        n, c, oh, ow = dout.shape
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for z in range(ow):
                        q = idx[b, ch, y, z]
                        dx[b, ch, 2 * y + q // 2, 2 * z + q % 2] = dout[b, ch, y, z]
        return dx

    @nb.njit(cache=True)
    def _herding_nb(x, budget):
        n, d = x.shape
        mu = np.zeros(d, dtype=x.dtype)
        for i in range(n):
            for j in range(d):
                mu[j] += x[i, j]
        for j in range(d):
            mu[j] /= n
        running = np.zeros(d, dtype=x.dtype)
        taken = np.zeros(n, dtype=np.bool_)
        m = min(budget, n)
        order = np.empty(m, dtype=np.int64)
        for step in range(m):
            best = -1
            best_dist = np.inf
            for i in range(n):
                if taken[i]:
                    continue
                acc = 0.0
                for j in range(d):
                    diff = mu[j] - (running[j] + x[i, j]) / (step + 1)
                    acc += diff * diff
                dist = np.sqrt(acc)
                if dist < best_dist:
                    best_dist = dist
                    best = i
            order[step] = best
            taken[best] = True
            for j in range(d):
                running[j] += x[best, j]
        return order


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    if numba_enabled():
        return _im2col_nb(np.ascontiguousarray(x), k)
    return im2col_np(x, k)


def col2im(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    if numba_enabled():
        return _col2im_nb(np.ascontiguousarray(cols), c, h, w, k)
    return col2im_np(cols, c, h, w, k)


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if numba_enabled():
        return _maxpool2_nb(np.ascontiguousarray(x))
    return maxpool2_np(x)


def maxpool2_backward(dout: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    if numba_enabled():
        return _maxpool2_backward_nb(np.ascontiguousarray(dout), idx, h, w)
    return maxpool2_backward_np(dout, idx, h, w)


def herding(x: np.ndarray, budget: int) -> np.ndarray:
    if numba_enabled():
        return _herding_nb(np.ascontiguousarray(x), budget)
    return herding_np(x, budget)
