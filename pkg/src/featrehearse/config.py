"""Run configuration: flat ``key = value`` files plus ``KEY=VALUE`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

from .adaptation import AdapterTrainConfig
from .losses import LossWeights
from .nn import DEFAULT_ARCH, SgdConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


SCHEDULES = {
    # epochs, milestones
    "desk": (10, (7, 9)),
    "cifar_long": (70, (50, 64)),
    "imagenet_long": (60, (20, 30, 40, 50)),
}


@dataclass
class RunConfig:
    dataset: str = "mnist"
    data_root: str | None = None
    out: str | None = None
    M: int = 2
    seed: int = 0
    order_seed: int | None = None        # class order; defaults to seed
    train_per_class: int = 0             # 0 keeps every training image
    L: int = 200
    P: int = 0
    classifier: str = "feature"          # feature | network_head
    balanced: bool = True
    unbalanced_full_pool: bool = False
    lambda_kd: float = 1.0
    gamma_fd: float = 0.05
    alpha_sim: float = 100.0
    feature_dim: int = 64
    arch: str = ""                       # comma-separated layer tokens; empty = default
    cosine_scale: float = 10.0
    learn_scale: bool = True
    schedule: str = "desk"
    epochs: int = 0                      # 0 = take from schedule
    milestones: str = ""                 # empty = take from schedule
    lr: float = 0.1
    lr_decay: float = 5.0
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 128
    augment: bool = False
    adapter_hidden: int = 0              # 0 = 16 * feature_dim
    adapter_depth: int = 2
    adapter_init: str = "identity"      # identity | random
    adapter_epochs: int = 40
    adapter_lr: float = 0.001
    adapter_momentum: float = 0.9
    adapter_batch_size: int = 128
    svm_C: float = 1.0
    svm_epochs: int = 100
    svm_lr: float = 0.1
    track_provenance_images: bool = False
    top_k: int = 1
    checkpoints: bool = True

    def validate(self) -> "RunConfig":
        if self.L < 0 or self.P < 0:
            raise ConfigError("L and P must be >= 0", "L" if self.L < 0 else "P")
        if self.classifier not in ("feature", "network_head"):
            raise ConfigError(f"classifier must be feature or network_head, got {self.classifier!r}", "classifier")
        if self.classifier == "feature" and self.L == 0 and self.P == 0:
            raise ConfigError("feature classifier needs L > 0 or P > 0", "classifier")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}", "schedule")
        if self.M < 1:
            raise ConfigError("M must be >= 1", "M")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.adapter_init not in ("identity", "random"):
            raise ConfigError(f"adapter_init must be identity or random, got {self.adapter_init!r}", "adapter_init")
        for k in ("lambda_kd", "gamma_fd", "alpha_sim"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0", k)
        return self

    # -- derived pieces ---------------------------------------------------

    def arch_tokens(self) -> tuple[str, ...]:
        if self.arch:
            return tuple(t.strip() for t in self.arch.split(",") if t.strip())
        return DEFAULT_ARCH[:-1] + (f"dense:{self.feature_dim}",)

    def sgd(self) -> SgdConfig:
        epochs, milestones = SCHEDULES[self.schedule]
        if self.epochs:
            epochs = self.epochs
        if self.milestones:
            milestones = tuple(int(m) for m in self.milestones.split(",") if m.strip())
        return SgdConfig(self.lr, self.weight_decay, self.momentum, epochs, milestones, self.lr_decay)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_kd, self.gamma_fd, self.alpha_sim)

    def adapter(self, seed: int) -> AdapterTrainConfig:
        return AdapterTrainConfig(alpha=self.alpha_sim, epochs=self.adapter_epochs,
                                  learning_rate=self.adapter_lr, momentum=self.adapter_momentum,
                                  batch_size=self.adapter_batch_size, seed=seed,
                                  hidden=self.adapter_hidden or None, depth=self.adapter_depth,
                                  init=self.adapter_init)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        for k in ("out", "data_root"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}", key)
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "int | None":
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "str | None":
            return None if raw.lower() in ("", "none") else raw
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}", key) from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides=(), **extra) -> RunConfig:
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value)
    values.update({k: v for k, v in extra.items() if v is not None})
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if v is None:
            v = "none"
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
