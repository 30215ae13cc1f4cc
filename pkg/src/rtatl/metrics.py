from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FoldResult:
    per_au_f1: np.ndarray
    avg_f1: float
    fold_index: int = 0
    train_subjects: list[str] = field(default_factory=list)
    test_subjects: list[str] = field(default_factory=list)


def f1_scores(predictions, labels) -> tuple[np.ndarray, float]:
    """Per-AU F1 = 2TP / (2TP + FP + FN), 0 where the denominator vanishes."""
    pred = np.asarray(predictions).astype(bool)
    true = np.asarray(labels).astype(bool)
    if pred.shape != true.shape or pred.ndim != 2:
        raise ValueError(f"predictions {pred.shape} and labels {true.shape} must be equal M x N")
    tp = (pred & true).sum(0)
    fp = (pred & ~true).sum(0)
    fn = (~pred & true).sum(0)
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(pred.shape[1]), where=denom > 0)
    return f1, float(f1.mean())


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.int64)
