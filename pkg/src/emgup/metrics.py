"""Confusion matrix, accuracy and macro-F1."""

from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    for name, y in (("label", y_true), ("prediction", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise ValueError(f"{name} outside class range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total <= 0:
        raise UndefinedMetricError("accuracy of an empty confusion matrix")
    return float(np.trace(cm) / total)


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    # F1 = 2tp / (pred + true); classes with neither support nor predictions score 0
    denom = pred + true
    return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)


def macro_f1(cm: np.ndarray) -> float:
    if np.asarray(cm).sum() <= 0:
        raise UndefinedMetricError("macro F1 of an empty confusion matrix")
    return float(per_class_f1(cm).mean())
