"""Classification metrics computed from confusion counts."""
from __future__ import annotations

import numpy as np

_AVERAGES = ("macro", "micro", "weighted")


def confusion_matrix(gold: np.ndarray, pred: np.ndarray, n_classes: int) -> np.ndarray:
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gold.shape != pred.shape:
        raise ValueError(f"gold and pred differ in shape: {gold.shape} vs {pred.shape}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    return cm


def per_class_stats(
    gold: np.ndarray, pred: np.ndarray, n_classes: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall, F1, gold support and a presence mask per class.

    A class is present when it occurs in the gold labels or the predictions;
    absent classes are excluded from averaged scores. Zero denominators give
    zero components.
    """
    cm = confusion_matrix(gold, pred, n_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    gold_count = cm.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_count > 0, tp / pred_count, 0.0)
        recall = np.where(gold_count > 0, tp / gold_count, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    present = (gold_count + pred_count) > 0
    return precision, recall, f1, gold_count, present


def f1_score(
    gold: np.ndarray, pred: np.ndarray, n_classes: int, average: str = "macro"
) -> float:
    """Averaged F1 over present classes; micro averaging equals accuracy."""
    if average not in _AVERAGES:
        raise ValueError(f"average must be one of {_AVERAGES}, got {average!r}")
    precision, recall, f1, support, present = per_class_stats(gold, pred, n_classes)
    if not present.any():
        return 0.0
    if average == "macro":
        return float(f1[present].mean())
    if average == "weighted":
        total = support[present].sum()
        if total == 0:
            return 0.0
        return float((f1[present] * support[present]).sum() / total)
    gold_arr = np.asarray(gold)
    if gold_arr.size == 0:
        return 0.0
    return float((np.asarray(gold) == np.asarray(pred)).mean())
