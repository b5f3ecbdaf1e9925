"""Confusion matrices and IoU."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataIOError, ValidationError
from .model import Prediction


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray
    ignore_index: int | None = None

    @classmethod
    def empty(cls, C: int, ignore_index: int | None = None) -> "ConfusionMatrix":
        return cls(np.zeros((C, C), dtype=np.int64), ignore_index)

    @property
    def C(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignore_index)


def accumulate(cm: ConfusionMatrix, labels: np.ndarray, pred: Prediction | np.ndarray) -> ConfusionMatrix:
    """Add one scan. ``pred`` is a Prediction (argmax taken, ties to the
    lowest class) or an array of predicted class ids."""
    y = np.asarray(labels, dtype=np.int64)
    yhat = pred.argmax() if isinstance(pred, Prediction) else np.asarray(pred, dtype=np.int64)
    if y.shape != yhat.shape:
        raise ValidationError(f"{y.shape[0]} labels vs {yhat.shape[0]} predictions")
    keep = (y >= 0) & (y < cm.C)
    if cm.ignore_index is not None:
        keep &= y != cm.ignore_index
    flat = np.bincount(y[keep] * cm.C + yhat[keep], minlength=cm.C * cm.C)
    return ConfusionMatrix(cm.counts + flat.reshape(cm.C, cm.C), cm.ignore_index)


def iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where excluded) and their mean.

    Classes whose union is empty, and the ignore class, are excluded from
    the mean.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    included = union > 0
    if cm.ignore_index is not None:
        included[cm.ignore_index] = False
    if not included.any():
        raise ValidationError("no class has a non-empty union; mIoU undefined")
    per = np.full(cm.C, np.nan)
    per[included] = tp[included] / union[included]
    return per, float(per[included].mean())


def write_report(cm: ConfusionMatrix, names: Sequence[str], path) -> float:
    """CSV with one row per class (name, iou, support) and an mIoU row."""
    per, miou = iou(cm)
    support = cm.counts.sum(axis=1)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["class", "iou", "support"])
            for c, name in enumerate(names):
                w.writerow([name, "" if np.isnan(per[c]) else repr(float(per[c])), int(support[c])])
            w.writerow(["mIoU", repr(miou), int(support.sum())])
            w.writerow(["# classes with empty union and the ignore class are excluded from mIoU", "", ""])
    except OSError as e:
        raise DataIOError(path, e.strerror or str(e)) from e
    return miou
