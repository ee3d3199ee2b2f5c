"""Small layer library with hand-written backward passes.

Feature extractor, cosine-normalized head, feature adaptation MLP and an SGD
optimizer.  Arrays are NCHW; dense weights are stored ``(in, out)``.  Every
layer caches what its backward pass needs during ``forward``; calling
``backward`` without a preceding ``forward`` is an error.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import _kernels

EPS = 1e-12


class DimensionError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def l2_normalize(x: np.ndarray, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x / (||x|| + eps), ||x||)``; norm keeps a trailing axis."""
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    return x / (norm + EPS), norm


def l2_normalize_backward(x: np.ndarray, norm: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient of ``x / (||x|| + eps)`` pulled back from ``grad``."""
    denom = norm + EPS
    proj = (x * grad).sum(axis=axis, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    radial = np.where(norm > 0, proj / (safe * denom * denom), 0.0)
    return grad / denom - x * radial


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv2D(Layer):
    """Stride-1 'valid' convolution."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        fan_in = in_ch * k * k
        self.params["w"] = _uniform_fan_in(rng, (fan_in, out_ch), fan_in, dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)
        self.zero_grad()

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise DimensionError(f"conv expects {self.in_ch} channels, got {c}")
        return self.out_ch, h - self.k + 1, w - self.k + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(f"conv expects (N, {self.in_ch}, H, W), got {x.shape}")
        self._xshape = x.shape
        self._cols = _kernels.im2col(x, self.k)
        out = self._cols @ self.params["w"] + self.params["b"]
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, dout):
        n, c, h, w = self._xshape
        d = np.ascontiguousarray(dout.transpose(0, 2, 3, 1))  # N, OH, OW, F
        flat_cols = self._cols.reshape(-1, self._cols.shape[-1])
        flat_d = d.reshape(-1, self.out_ch)
        self.grads["w"] += flat_cols.T @ flat_d
        self.grads["b"] += flat_d.sum(axis=0)
        dcols = d @ self.params["w"].T
        return _kernels.col2im(dcols, c, h, w, self.k)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params["w"] = _uniform_fan_in(rng, (n_in, n_out), n_in, dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)
        self.zero_grad()

    def out_shape(self, shape):
        if int(np.prod(shape)) != self.n_in:
            raise DimensionError(f"dense expects {self.n_in} inputs, got {shape}")
        return (self.n_out,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"dense expects (N, {self.n_in}), got {x.shape}")
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dout):
        self.grads["w"] += self._x.T @ dout
        self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["w"].T


class ReLU(Layer):
    def out_shape(self, shape):
        return shape

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class MaxPool2(Layer):
    def out_shape(self, shape):
        c, h, w = shape
        return c, h // 2, w // 2

    def forward(self, x):
        self._hw = x.shape[2:]
        out, self._idx = _kernels.maxpool2(x)
        return out

    def backward(self, dout):
        return _kernels.maxpool2_backward(np.ascontiguousarray(dout), self._idx, *self._hw)


class Flatten(Layer):
    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Sequential:
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                yield f"{i}.{k}", v

    def named_grads(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                yield f"{i}.{k}", layer.grads[k]

    def param_count(self) -> int:
        return sum(v.size for _, v in self.named_parameters())


# ---------------------------------------------------------------------------
# feature extractor
# ---------------------------------------------------------------------------

# conv-relu-pool x2, dense to d
DEFAULT_ARCH = ("conv:8:5", "relu", "pool", "conv:16:5", "relu", "pool", "flatten", "dense:64")


def parse_arch(arch) -> list[tuple]:
    """``"conv:8:5"`` style tokens -> ``[("conv", 8, 5), ...]``."""
    out = []
    for tok in arch:
        kind, *args = tok.split(":")
        if kind not in ("conv", "dense", "relu", "pool", "flatten"):
            raise ValueError(f"unknown layer token {tok!r}")
        out.append((kind, *[int(a) for a in args]))
    return out


class Extractor(Sequential):
    """Feature extractor mapping a (C, H, W) float image to a d-vector."""

    def __init__(self, arch, input_shape: tuple[int, int, int], seed: int = 0, dtype=np.float32):
        self.arch = tuple(arch)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        layers: list[Layer] = []
        shape = self.input_shape
        for kind, *args in parse_arch(self.arch):
            if kind == "conv":
                layer = Conv2D(shape[0], args[0], args[1], rng, dtype)
            elif kind == "dense":
                layer = Dense(int(np.prod(shape)), args[0], rng, dtype)
            elif kind == "relu":
                layer = ReLU()
            elif kind == "pool":
                layer = MaxPool2()
            else:
                layer = Flatten()
            shape = layer.out_shape(shape)
            layers.append(layer)
        if len(shape) != 1:
            raise DimensionError(f"architecture does not end in a vector: {shape}")
        self.output_dim = shape[0]
        super().__init__(layers)

    def forward(self, x):
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"extractor expects (N, {self.input_shape}), got {x.shape}")
        return super().forward(x)

    __call__ = forward


def extract(extractor: Extractor, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Eval-mode features for a preprocessed float batch, computed in chunks."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != extractor.input_shape:
        raise DimensionError(f"extractor expects (N, {extractor.input_shape}), got {batch.shape}")
    if batch.shape[0] == 0:
        return np.zeros((0, extractor.output_dim), dtype=extractor.dtype)
    parts = [extractor.forward(batch[i:i + chunk].astype(extractor.dtype, copy=False))
             for i in range(0, batch.shape[0], chunk)]
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# cosine head
# ---------------------------------------------------------------------------


class CosineHead:
    """Scores ``eta * cos(v, W[:, k])`` for every column ``k``."""

    def __init__(self, dim: int, n_classes: int, seed: int = 0, scale: float | None = 10.0,
                 learn_scale: bool = True, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.dtype = np.dtype(dtype)
        self.learn_scale = learn_scale and scale is not None
        self.params = {
            "w": _uniform_fan_in(rng, (dim, n_classes), dim, dtype),
            "scale": np.array([1.0 if scale is None else scale], dtype=dtype),
        }
        self.zero_grad()

    @property
    def n_classes(self) -> int:
        return self.params["w"].shape[1]

    @property
    def scale(self) -> float:
        return float(self.params["scale"][0])

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def widen(self, n_new: int, seed: int) -> None:
        """Append ``n_new`` freshly initialized columns."""
        rng = np.random.default_rng(seed)
        cols = _uniform_fan_in(rng, (self.dim, n_new), self.dim, self.dtype)
        self.params["w"] = np.concatenate([self.params["w"], cols], axis=1)
        self.zero_grad()

    def forward(self, v: np.ndarray) -> np.ndarray:
        if v.ndim != 2 or v.shape[1] != self.dim:
            raise DimensionError(f"head expects (N, {self.dim}), got {v.shape}")
        w = self.params["w"]
        self._v = v
        self._vhat, self._vnorm = l2_normalize(v, axis=1)
        self._w = w
        self._what, self._wnorm = l2_normalize(w, axis=0)
        self._cos = self._vhat @ self._what
        return self.params["scale"][0] * self._cos

    __call__ = forward

    def backward(self, dscores: np.ndarray) -> np.ndarray:
        eta = self.params["scale"][0]
        if self.learn_scale:
            self.grads["scale"] += np.array([(dscores * self._cos).sum()], dtype=self.dtype)
        dcos = eta * dscores
        dvhat = dcos @ self._what.T
        dwhat = self._vhat.T @ dcos
        self.grads["w"] += l2_normalize_backward(self._w, self._wnorm, dwhat, axis=0)
        return l2_normalize_backward(self._v, self._vnorm, dvhat, axis=1)

    def named_parameters(self):
        yield "head.w", self.params["w"]
        if self.learn_scale:
            yield "head.scale", self.params["scale"]

    def named_grads(self):
        yield "head.w", self.grads["w"]
        if self.learn_scale:
            yield "head.scale", self.grads["scale"]


def cosine_scores(head: CosineHead, features: np.ndarray) -> np.ndarray:
    return head.forward(np.atleast_2d(features))


# ---------------------------------------------------------------------------
# network and adapter
# ---------------------------------------------------------------------------


class Network:
    """Extractor followed by a cosine head."""

    def __init__(self, extractor: Extractor, head: CosineHead):
        if extractor.output_dim != head.dim:
            raise DimensionError("extractor output and head input dims differ")
        self.extractor = extractor
        self.head = head

    def forward(self, x):
        v = self.extractor.forward(x)
        return v, self.head.forward(v)

    def backward(self, dscores, dfeatures=None):
        dv = self.head.backward(dscores)
        if dfeatures is not None:
            dv = dv + dfeatures
        return self.extractor.backward(dv)

    def zero_grad(self):
        self.extractor.zero_grad()
        self.head.zero_grad()

    def named_parameters(self):
        yield from (("ext." + k, v) for k, v in self.extractor.named_parameters())
        yield from self.head.named_parameters()

    def named_grads(self):
        yield from (("ext." + k, v) for k, v in self.extractor.named_grads())
        yield from self.head.named_grads()

    def frozen_copy(self) -> "Network":
        return copy.deepcopy(self)


class AdapterNetwork(Sequential):
    """MLP d -> hidden -> ... -> hidden -> d with ReLU between layers.

    ``init="identity"`` (needs hidden >= 2d) routes x through the first 2d
    hidden units as relu(x) and relu(-x) and recombines them at the output,
    so the untrained map is exactly the identity; the remaining units start
    from the usual random fan-in init but feed the output through zero
    weights. ``init="random"`` is a plain fan-in init everywhere.
    """

    def __init__(self, dim: int, hidden: int | None = None, depth: int = 2, seed: int = 0, dtype=np.float32,
                 init: str = "random"):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.hidden = 16 * dim if hidden is None else hidden
        self.depth = depth
        self.init = init
        widths = [dim] + [self.hidden] * depth + [dim]
        layers: list[Layer] = []
        dense: list[Dense] = []
        for i in range(len(widths) - 1):
            dense.append(Dense(widths[i], widths[i + 1], rng, dtype))
            layers.append(dense[-1])
            if i < len(widths) - 2:
                layers.append(ReLU())
        if init == "identity":
            self._identity_init(dense)
        elif init != "random":
            raise ValueError(f"unknown adapter init {init!r}")
        super().__init__(layers)

    def _identity_init(self, dense):
        d, k = self.dim, 2 * self.dim
        if self.hidden < k:
            raise DimensionError(f"identity init needs hidden >= {k}, got {self.hidden}")
        eye = np.eye(d)
        first = dense[0].params["w"]
        first[:, :k] = np.hstack([eye, -eye])
        for layer in dense[1:-1]:
            w = layer.params["w"]
            w[:, :k] = 0
            w[:k, :] = 0
            w[:k, :k] = np.eye(k)
        last = dense[-1].params["w"]
        last[...] = 0
        last[:k] = np.vstack([eye, -eye])

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"adapter expects (N, {self.dim}), got {x.shape}")
        return super().forward(x)

    __call__ = forward


def adapt_forward(adapter: AdapterNetwork, features: np.ndarray) -> np.ndarray:
    return adapter.forward(np.atleast_2d(features))


def param_digest(*models) -> str:
    h = hashlib.sha256()
    for m in models:
        for name, v in m.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class SgdConfig:
    learning_rate: float = 0.1
    weight_decay: float = 1e-5
    momentum: float = 0.9
    epochs: int = 30
    milestones: tuple[int, ...] = (20, 26)
    decay_factor: float = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.milestones = tuple(int(m) for m in self.milestones)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch: divided by decay_factor per milestone passed."""
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.learning_rate / self.decay_factor ** passed


@dataclass
class SGD:
    config: SgdConfig
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], epoch: int) -> None:
        """In-place momentum SGD update with weight decay folded into the gradient."""
        lr = self.config.lr_at(epoch)
        for name, p in params.items():
            if not np.all(np.isfinite(grads[name])):
                raise DivergenceError(f"non-finite gradient for {name}")
        for name, p in params.items():
            g = grads[name] + self.config.weight_decay * p
            if self.config.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.config.momentum * buf + g
                self.buffers[name] = buf
                g = buf
            p -= (lr * g).astype(p.dtype, copy=False)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], config: SgdConfig,
             step_index: int = 0, optimizer: SGD | None = None) -> dict[str, np.ndarray]:
    """Functional wrapper: returns updated copies; ``step_index`` is the epoch."""
    opt = optimizer or SGD(config)
    new = {k: np.array(v, copy=True) for k, v in params.items()}
    opt.step(new, grads, step_index)
    return new
