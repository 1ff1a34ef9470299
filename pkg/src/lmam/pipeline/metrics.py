"""Accuracy, per-class precision/recall/F1 and support-weighted F1."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class Metrics:
    accuracy: float
    weighted_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(**d)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label arrays differ in shape: {y_true.shape} vs {y_pred.shape}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_confusion(cm) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("cannot compute metrics on an empty split")
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = [float(t / p) if p else 0.0 for t, p in zip(tp, predicted)]
    recall = [float(t / s) if s else 0.0 for t, s in zip(tp, support)]
    # 2TP / (2TP + FP + FN), identical to the harmonic mean but exact on ratios
    f1 = []
    for t, s, p in zip(tp, support, predicted):
        denom = s + p
        f1.append(float(2 * t / denom) if denom else 0.0)
    weighted = float(sum(int(s) * f for s, f in zip(support, f1)) / total)
    return Metrics(
        accuracy=float(tp.sum() / total),
        weighted_f1=weighted,
        precision=precision,
        recall=recall,
        f1=f1,
        support=[int(s) for s in support],
        confusion=cm.tolist(),
    )


def compute_metrics(y_true, y_pred, num_classes: int) -> Metrics:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes))
