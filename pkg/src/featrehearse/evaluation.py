"""Accuracy curve, average incremental accuracy and adaptation quality."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .memory import FeatureMemory
from .nn import Extractor, extract, l2_normalize


class EvaluationError(ValueError):
    pass


class DiagnosticUnavailable(RuntimeError):
    pass


def evaluate_task(classifier, extractor: Extractor | None, test_inputs: np.ndarray, test_labels: np.ndarray,
                  top_k: int = 1) -> float:
    """Top-k accuracy on a (cumulative) test set.

    ``test_inputs`` are preprocessed images when ``extractor`` is given, or
    raw features otherwise.  Features are l2-normalized before scoring.
    """
    labels = np.asarray(test_labels)
    if labels.size == 0:
        raise EvaluationError("empty test set")
    feats = extract(extractor, test_inputs) if extractor is not None else np.asarray(test_inputs)
    feats, _ = l2_normalize(feats.astype(np.float64), axis=1)
    if top_k == 1:
        pred = classifier.predict(feats)
        return float(np.mean(pred == labels))
    scores = classifier.scores(feats)
    # stable sort keeps lower class columns first on ties
    top = np.argsort(-scores, axis=1, kind="stable")[:, :top_k]
    hit = (np.asarray(classifier.classes)[top] == labels[:, None]).any(axis=1)
    return float(np.mean(hit))


def average_incremental_accuracy(curve) -> float:
    acc = [c["accuracy"] if isinstance(c, dict) else float(c) for c in curve]
    if not acc:
        raise EvaluationError("empty accuracy curve")
    return float(sum(acc) / len(acc))


def adaptation_quality(mem: FeatureMemory, extractor: Extractor, image_lookup, classes) -> float:
    """Mean dot product between stored descriptors and the unit features the
    current extractor assigns to their source images.

    ``image_lookup(rows)`` returns preprocessed images for training-set rows.
    """
    classes = [c for c in classes if c in mem.slots]
    if not classes:
        raise DiagnosticUnavailable("no descriptors for the requested classes")
    stored = np.concatenate([mem.slots[c].descriptors for c in classes]).astype(np.float64)
    sources = np.concatenate([mem.slots[c].source for c in classes])
    if np.any(sources < 0):
        raise DiagnosticUnavailable("descriptor provenance was not tracked")
    truth, _ = l2_normalize(extract(extractor, image_lookup(sources)).astype(np.float64), axis=1)
    return float(np.mean(np.sum(stored * truth, axis=1)))


@dataclass
class MetricsRecord:
    curve: list[dict] = field(default_factory=list)
    omega_prev: list = field(default_factory=list)
    omega_first: list = field(default_factory=list)
    footprint: list[dict] = field(default_factory=list)

    def add_task(self, task: int, classes_seen: int, accuracy: float, omega_prev=None,
                 omega_first=None, footprint: dict | None = None) -> None:
        if not 0.0 <= accuracy <= 1.0:
            raise EvaluationError(f"accuracy {accuracy} outside [0, 1]")
        self.curve.append({"task": task, "classes_seen": classes_seen, "accuracy": accuracy})
        self.omega_prev.append(omega_prev)
        self.omega_first.append(omega_first)
        self.footprint.append(footprint or {})

    @property
    def average_incremental_accuracy(self) -> float:
        return average_incremental_accuracy(self.curve)

    def to_json(self) -> dict:
        return {
            "curve": self.curve,
            "avg_inc_acc": self.average_incremental_accuracy if self.curve else None,
            "omega_prev": self.omega_prev,
            "omega_first": self.omega_first,
            "footprint": self.footprint[-1] if self.footprint else {},
            "footprint_per_task": self.footprint,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsRecord":
        rec = cls(list(obj["curve"]), list(obj["omega_prev"]), list(obj["omega_first"]),
                  list(obj.get("footprint_per_task", [])))
        return rec

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        _atomic_write(out / "metrics.json", json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        rows = ["task_index,classes_seen,accuracy"]
        rows += [f"{c['task']},{c['classes_seen']},{c['accuracy']:.6f}" for c in self.curve]
        _atomic_write(out / "curve.csv", "\n".join(rows) + "\n")


def read_curve_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"task": int(r["task_index"]), "classes_seen": int(r["classes_seen"]),
                 "accuracy": float(r["accuracy"])} for r in csv.DictReader(fh)]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
