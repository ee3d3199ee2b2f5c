"""Task-by-task orchestration: network training with distillation, feature
memory, adaptation, feature classifier, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adaptation, memory as mem_mod
from .checkpoint import read_checkpoint, write_checkpoint
from .classifier import FeatureClassifier, HeadClassifier, train_feature_classifier
from .config import RunConfig
from .data import Normalizer, TaskSplit, TaskStream, augment, batches, load_named, split_tasks, data_root
from .evaluation import MetricsRecord, adaptation_quality, evaluate_task
from .losses import OrchestrationError, loss_total_backward
from .memory import ConsistencyError, FeatureMemory, ImageExemplarStore, herding_select, store_task_features
from .nn import SGD, CosineHead, Extractor, Network, extract, l2_normalize

log = logging.getLogger(__name__)

_PURPOSE = {"init": 1, "head": 2, "batches": 3, "adapter": 4, "svm": 5, "augment": 6}


def task_seed(seed: int, task: int, purpose: str) -> int:
    return int(np.random.SeedSequence([seed, task, _PURPOSE[purpose]]).generate_state(1)[0])


@dataclass
class RunState:
    task: int = 0
    model: Network | None = None
    frozen: Network | None = None
    normalizer: Normalizer | None = None
    memory: FeatureMemory | None = None
    exemplars: ImageExemplarStore | None = None
    classifier: FeatureClassifier | HeadClassifier | None = None
    metrics: MetricsRecord = field(default_factory=MetricsRecord)
    seen: tuple[int, ...] = ()


class IncrementalTrainer:
    """Runs the per-task procedure over a TaskStream.

    One trainer owns one RunState; tasks must be fed in stream order.
    """

    def __init__(self, config: RunConfig, stream: TaskStream, out_dir=None, echo=None):
        self.cfg = config.validate()
        self.stream = stream
        self.out = Path(out_dir) if out_dir else None
        self.echo = echo
        self.state = RunState(memory=FeatureMemory(config.feature_dim, config.L),
                              exemplars=ImageExemplarStore(config.P))
        self.dtype = np.float32

    # -- helpers ------------------------------------------------------------

    @property
    def memory_mode(self) -> bool:
        return self.cfg.L > 0

    def _prep(self, images: np.ndarray) -> np.ndarray:
        return self.state.normalizer(images, self.dtype)

    def _features(self, extractor: Extractor, images: np.ndarray) -> np.ndarray:
        feats = extract(extractor, self._prep(images)) if len(images) else np.zeros((0, extractor.output_dim))
        return l2_normalize(feats.astype(np.float64), axis=1)[0]

    def _columns(self, labels: np.ndarray) -> np.ndarray:
        col = {c: i for i, c in enumerate(self.state.seen)}
        return np.array([col[int(c)] for c in labels], dtype=np.int64)

    # -- network training ---------------------------------------------------

    def _train_network(self, t: int, images: np.ndarray, labels: np.ndarray, n_old: int) -> None:
        st, cfg = self.state, self.cfg
        sgd_cfg = cfg.sgd()
        opt = SGD(sgd_cfg)
        params = dict(st.model.named_parameters())
        cols = self._columns(labels)
        aug_rng = np.random.default_rng(task_seed(cfg.seed, t, "augment"))
        inputs = None if cfg.augment else self._prep(images)
        for epoch in range(sgd_cfg.epochs):
            total, nb = 0.0, 0
            for idx in batches(len(labels), cfg.batch_size, task_seed(cfg.seed, t, "batches") + epoch):
                x = self._prep(augment(images[idx], aug_rng)) if cfg.augment else inputs[idx]
                st.model.zero_grad()
                loss, _ = loss_total_backward(x, cols[idx], st.model, st.frozen, cfg.weights(),
                                              task_index=t, n_old=n_old)
                opt.step(params, dict(st.model.named_grads()), epoch)
                scale = st.model.head.params["scale"]
                np.maximum(scale, 1e-3, out=scale)
                total += loss
                nb += 1
            log.debug("task %d epoch %d loss %.4f", t, epoch, total / max(nb, 1))

    # -- one task -----------------------------------------------------------

    def train_task(self, split: TaskSplit) -> RunState:
        st, cfg = self.state, self.cfg
        t = split.task_index
        if t != st.task + 1:
            raise OrchestrationError(f"expected task {st.task + 1}, got {t}")
        if set(split.classes) & set(st.seen):
            raise ConsistencyError("task classes overlap previously seen classes")
        started = time.perf_counter()
        images, labels = split.train_images, split.train_labels
        sources = split.train_indices
        if cfg.train_per_class:
            keep = np.concatenate([np.flatnonzero(labels == c)[:cfg.train_per_class] for c in split.classes])
            images, labels, sources = images[keep], labels[keep], sources[keep]

        n_old = len(st.seen)
        if t == 1:
            st.normalizer = Normalizer.fit(images)
            c, h, w = images.shape[3], images.shape[1], images.shape[2]
            ext = Extractor(cfg.arch_tokens(), (c, h, w), seed=task_seed(cfg.seed, 1, "init"), dtype=self.dtype)
            head = CosineHead(ext.output_dim, len(split.classes), seed=task_seed(cfg.seed, 1, "head"),
                              scale=cfg.cosine_scale, learn_scale=cfg.learn_scale, dtype=self.dtype)
            st.model = Network(ext, head)
            st.frozen = None
        else:
            st.frozen = st.model.frozen_copy()
            st.model.head.widen(len(split.classes), seed=task_seed(cfg.seed, t, "head"))
        st.seen = st.seen + tuple(split.classes)

        ex_images, ex_labels = st.exemplars.arrays()
        if len(ex_labels):
            train_images = np.concatenate([images, ex_images])
            train_labels = np.concatenate([labels, ex_labels])
        else:
            train_images, train_labels = images, labels

        self._train_network(t, train_images, train_labels, n_old)

        # adapter first, then fresh features (order of the reference procedure)
        adapter = None
        if t >= 2 and self.memory_mode:
            pairs = adaptation.build_pairs(st.frozen.extractor, st.model.extractor,
                                           self._prep(train_images), self._columns(train_labels))
            adapter = adaptation.train_adapter(pairs, st.model.head, cfg.adapter(task_seed(cfg.seed, t, "adapter")))

        fresh = self._features(st.model.extractor, images)
        new_mem = FeatureMemory(cfg.feature_dim, cfg.L)
        if self.memory_mode:
            new_mem = store_task_features(new_mem, fresh, labels, split.classes, sources)
            old_mem = adaptation.adapt_memory(st.memory, adapter) if adapter is not None else st.memory
            new_mem.slots.update(old_mem.slots)
        st.memory = new_mem

        if cfg.P > 0:
            for c in split.classes:
                rows = np.flatnonzero(labels == c)
                pick = rows[herding_select(fresh[rows], cfg.P)]
                st.exemplars.add(c, images[pick], sources[pick])

        st.classifier = self._fit_classifier(t, split, fresh, labels)
        st.frozen = None
        st.task = t

        test_inputs = self._prep(split.test_images)
        acc = evaluate_task(st.classifier, st.model.extractor, test_inputs, split.test_labels, cfg.top_k)
        omega_prev, omega_first = self._omega(t)
        fp = mem_mod.footprint(st.memory if self.memory_mode else None, st.exemplars,
                               self.stream.train.image_shape).to_json()
        st.metrics.add_task(t, len(st.seen), acc, omega_prev, omega_first, fp)
        elapsed = time.perf_counter() - started
        line = (f"task {t}: classes_seen={len(st.seen)} acc={acc:.4f} "
                f"mem={len(st.memory)} imgs={sum(st.exemplars.counts().values())} "
                f"omega_prev={_fmt(omega_prev)} omega_first={_fmt(omega_first)} ({elapsed:.1f}s)")
        log.info(line)
        if self.echo:
            self.echo(line)
        if self.out is not None:
            self._persist(t)
        return st

    def _fit_classifier(self, t: int, split: TaskSplit, fresh: np.ndarray, labels: np.ndarray):
        st, cfg = self.state, self.cfg
        if cfg.classifier == "network_head":
            return HeadClassifier(st.model.head, np.array(st.seen))
        pool = st.memory
        extra_f, extra_l = [], []
        if cfg.unbalanced_full_pool:
            pool = st.memory.copy()
            for c in split.classes:
                pool.slots.pop(c, None)
            extra_f.append(fresh)
            extra_l.append(labels)
        ex_images, ex_labels = st.exemplars.arrays()
        old = ~np.isin(ex_labels, split.classes) if len(ex_labels) else np.zeros(0, bool)
        if old.any():
            extra_f.append(self._features(st.model.extractor, ex_images[old]))
            extra_l.append(ex_labels[old])
        if not self.memory_mode:
            # image exemplars only: their current features are the whole pool
            pool = FeatureMemory(cfg.feature_dim, cfg.P)
            cur = np.isin(ex_labels, split.classes)
            extra_f.append(self._features(st.model.extractor, ex_images[cur]))
            extra_l.append(ex_labels[cur])
        ef = np.concatenate(extra_f) if extra_f else None
        el = np.concatenate(extra_l) if extra_l else None
        return train_feature_classifier(pool, seed=task_seed(cfg.seed, t, "svm"), balanced=cfg.balanced,
                                        extra_features=ef, extra_labels=el, c_reg=cfg.svm_C,
                                        epochs=cfg.svm_epochs, learning_rate=cfg.svm_lr)

    def _omega(self, t: int):
        st, cfg = self.state, self.cfg
        if not (cfg.track_provenance_images and self.memory_mode):
            return None, None

        def lookup(rows):
            return self._prep(self.stream.source_images(rows))

        first = adaptation_quality(st.memory, st.model.extractor, lookup, self.stream.tasks[0].classes)
        prev = None
        if t >= 2:
            prev = adaptation_quality(st.memory, st.model.extractor, lookup, self.stream.tasks[t - 2].classes)
        return prev, first

    # -- persistence ----------------------------------------------------------

    def _persist(self, t: int) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        st = self.state
        self.save_checkpoint(self.out / f"task_{t:03d}.ckpt")
        mem_mod.save_memory(st.memory, self.out / f"memory_task_{t:03d}.frmem")
        mem_mod.save_memory(st.memory, self.out / "memory.frmem")
        st.metrics.write(self.out)
        (self.out / "footprint.json").write_text(json.dumps(st.metrics.footprint[-1], indent=2, sort_keys=True) + "\n")

    def save_checkpoint(self, path) -> None:
        st, cfg = self.state, self.cfg
        arrays = {}
        for name, v in st.model.named_parameters():
            arrays["model/" + name] = v
        arrays["model/head.w"] = st.model.head.params["w"]
        arrays["model/head.scale"] = st.model.head.params["scale"]
        arrays["norm/mean"] = st.normalizer.mean
        arrays["norm/std"] = st.normalizer.std
        for c in st.memory.classes:
            s = st.memory.slots[c]
            arrays[f"mem/{c}/desc"] = s.descriptors
            arrays[f"mem/{c}/adapt"] = s.adapt_count
            arrays[f"mem/{c}/source"] = s.source
        for c in st.exemplars.classes:
            arrays[f"img/{c}/images"] = st.exemplars.images[c]
            arrays[f"img/{c}/source"] = st.exemplars.source[c]
        if isinstance(st.classifier, FeatureClassifier):
            arrays["clf/weights"] = st.classifier.weights
            arrays["clf/bias"] = st.classifier.bias
            arrays["clf/classes"] = st.classifier.classes
        meta = {
            "task": st.task,
            "arch": list(st.model.extractor.arch),
            "input_shape": list(st.model.extractor.input_shape),
            "seen": list(st.seen),
            "class_order": [int(c) for c in self.stream.class_order],
            "classifier": cfg.classifier,
            "memory_classes": st.memory.classes,
            "exemplar_classes": st.exemplars.classes,
            "metrics": st.metrics.to_json(),
            "config": cfg.to_dict(),
            "config_digest": cfg.digest(),
            # momentum buffers restart at every task, so none survive a task boundary
            "optimizer": {"buffers": 0},
        }
        write_checkpoint(path, meta, arrays)

    def load_checkpoint(self, path) -> None:
        meta, arrays = read_checkpoint(path)
        cfg = self.cfg
        if [int(c) for c in self.stream.class_order] != meta["class_order"]:
            raise ConsistencyError("checkpoint class order differs from the task stream")
        st = RunState()
        st.task = meta["task"]
        st.seen = tuple(meta["seen"])
        ext = Extractor(meta["arch"], tuple(meta["input_shape"]), dtype=self.dtype)
        for name, v in ext.named_parameters():
            v[...] = arrays["model/ext." + name]
        head = CosineHead(ext.output_dim, len(st.seen), scale=float(arrays["model/head.scale"][0]),
                          learn_scale=cfg.learn_scale, dtype=self.dtype)
        head.params["w"] = arrays["model/head.w"].astype(self.dtype)
        head.params["scale"] = arrays["model/head.scale"].astype(self.dtype)
        head.zero_grad()
        st.model = Network(ext, head)
        st.normalizer = Normalizer(arrays["norm/mean"], arrays["norm/std"])
        st.memory = FeatureMemory(cfg.feature_dim, cfg.L)
        for c in meta["memory_classes"]:
            st.memory.slots[c] = mem_mod.ClassSlot(arrays[f"mem/{c}/desc"], arrays[f"mem/{c}/adapt"].astype(np.int32),
                                                   arrays[f"mem/{c}/source"].astype(np.int64))
        st.exemplars = ImageExemplarStore(cfg.P)
        for c in meta["exemplar_classes"]:
            st.exemplars.add(c, arrays[f"img/{c}/images"], arrays[f"img/{c}/source"])
        if "clf/weights" in arrays:
            st.classifier = FeatureClassifier(arrays["clf/weights"].astype(np.float64),
                                              arrays["clf/bias"].astype(np.float64), arrays["clf/classes"])
        else:
            st.classifier = HeadClassifier(head, np.array(st.seen))
        st.metrics = MetricsRecord.from_json(meta["metrics"])
        self.state = st


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def train_first_task(trainer: IncrementalTrainer, split: TaskSplit) -> RunState:
    if split.task_index != 1:
        raise OrchestrationError("first task must have index 1")
    return trainer.train_task(split)


def train_incremental_task(trainer: IncrementalTrainer, split: TaskSplit) -> RunState:
    if split.task_index < 2:
        raise OrchestrationError("incremental tasks start at index 2")
    return trainer.train_task(split)


def build_stream(cfg: RunConfig, train=None, test=None) -> TaskStream:
    if train is None:
        train, test = load_named(cfg.dataset, data_root(cfg.data_root))
    order_seed = cfg.seed if cfg.order_seed is None else cfg.order_seed
    return split_tasks(train, test, cfg.M, order_seed)


def run(cfg: RunConfig, stream: TaskStream | None = None, out_dir=None, resume_from=None,
        stop_after: int | None = None, echo=None) -> MetricsRecord:
    """Run every task (or up to ``stop_after``); optionally resume from a checkpoint."""
    stream = stream if stream is not None else build_stream(cfg)
    out_dir = out_dir if out_dir is not None else cfg.out
    trainer = IncrementalTrainer(cfg, stream, out_dir if cfg.checkpoints else None, echo=echo)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.json").write_text(
            json.dumps({"config": cfg.to_dict(), "digest": cfg.digest()}, indent=2, sort_keys=True) + "\n")
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
    last = stream.task_count if stop_after is None else min(stop_after, stream.task_count)
    for split in stream.tasks[trainer.state.task:last]:
        trainer.train_task(split)
    if out_dir is not None and not cfg.checkpoints:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        trainer.state.metrics.write(out_dir)
    return trainer.state.metrics
