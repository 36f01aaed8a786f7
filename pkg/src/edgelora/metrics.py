"""Confusion-matrix metrics: accuracy and macro precision/recall/F1 (0/0 -> 0)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass
class MetricsReport:
    classes: tuple[int, ...]
    labels: tuple[int, ...]
    confusion: np.ndarray
    accuracy: float
    precision: float
    recall: float
    f1: float
    loss: float | None = None

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self):
        return {
            "classes": list(self.classes),
            "labels": list(self.labels),
            "confusion": self.confusion.tolist(),
            "loss": self.loss,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def confusion_matrix(y_true, y_pred, classes: Sequence[int]) -> np.ndarray:
    """Rows are true classes, columns predictions, both indexed by ``classes``."""
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[pos[int(t)], pos[int(p)]] += 1
    return cm


def metrics_from_confusion(cm: np.ndarray, classes: Sequence[int], labels: Sequence[int]):
    """(accuracy, macro precision, macro recall, macro F1) averaged over ``labels``."""
    total = cm.sum()
    accuracy = float(np.trace(cm) / total) if total else 0.0
    pos = {c: i for i, c in enumerate(classes)}
    ps, rs, fs = [], [], []
    for c in labels:
        i = pos[c]
        tp = cm[i, i]
        pred = cm[:, i].sum()
        true = cm[i, :].sum()
        p = tp / pred if pred else 0.0
        r = tp / true if true else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    n = len(labels)
    if not n:
        return accuracy, 0.0, 0.0, 0.0
    return accuracy, float(sum(ps) / n), float(sum(rs) / n), float(sum(fs) / n)


def score(y_true, y_pred, labels: Sequence[int] | None = None, loss: float | None = None) -> MetricsReport:
    """Metrics over ``labels`` (default: every class seen in truth or prediction)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise DataError("cannot evaluate an empty test set")
    if y_true.shape != y_pred.shape:
        raise DataError(f"{y_true.size} truths vs {y_pred.size} predictions")
    seen = set(y_true.tolist()) | set(y_pred.tolist())
    labels = tuple(sorted(seen)) if labels is None else tuple(int(c) for c in labels)
    classes = tuple(sorted(seen | set(labels)))
    cm = confusion_matrix(y_true, y_pred, classes)
    acc, p, r, f = metrics_from_confusion(cm, classes, labels)
    return MetricsReport(classes, labels, cm, acc, p, r, f, loss)


def evaluate(predict_fn, inputs, truths, labels: Sequence[int] | None = None) -> MetricsReport:
    """Run ``predict_fn(inputs) -> class ids`` and score it."""
    return score(truths, predict_fn(inputs), labels)
