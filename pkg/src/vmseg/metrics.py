"""Confusion counts and the overlap metrics derived from them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

METRIC_NAMES = ("accuracy", "iou", "dice", "precision", "recall")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class SegMetrics:
    accuracy: float
    iou: float
    dice: float
    precision: float
    recall: float
    degenerate: tuple[str, ...] = field(default=())

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _check_binary(a: np.ndarray, label: str) -> None:
    if not np.all((a == 0) | (a == 1)):
        raise ContractError(f"{label} must contain only 0 and 1")


def confusion_counts(y, y_hat) -> ConfusionCounts:
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    if y.shape != y_hat.shape:
        raise DimensionError(f"mask shapes {y.shape} and {y_hat.shape} differ")
    _check_binary(y, "ground truth")
    _check_binary(y_hat, "prediction")
    y = y.astype(bool)
    y_hat = y_hat.astype(bool)
    tp = int(np.count_nonzero(y & y_hat))
    fp = int(np.count_nonzero(~y & y_hat))
    fn = int(np.count_nonzero(y & ~y_hat))
    return ConfusionCounts(tp, fp, fn, y.size - tp - fp - fn)


def metrics_from_counts(c: ConfusionCounts) -> SegMetrics:
    """IoU, Dice, precision, recall and pixel accuracy.

    A zero denominator yields 1 when both masks are empty and 0 otherwise; the
    affected metric names are listed in ``degenerate``.
    """
    both_empty = c.tp + c.fp + c.fn == 0
    degenerate = []

    def ratio(name, num, den):
        if den == 0:
            degenerate.append(name)
            return 1.0 if both_empty else 0.0
        return num / den

    return SegMetrics(
        accuracy=ratio("accuracy", c.tp + c.tn, c.total),
        iou=ratio("iou", c.tp, c.tp + c.fp + c.fn),
        dice=ratio("dice", 2 * c.tp, 2 * c.tp + c.fp + c.fn),
        precision=ratio("precision", c.tp, c.tp + c.fp),
        recall=ratio("recall", c.tp, c.tp + c.fn),
        degenerate=tuple(degenerate),
    )


def confusion_metrics(y, y_hat) -> tuple[ConfusionCounts, SegMetrics]:
    counts = confusion_counts(y, y_hat)
    return counts, metrics_from_counts(counts)
