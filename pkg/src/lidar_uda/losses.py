"""Segmentation, entropy and class-distribution alignment losses.

Each loss returns its value together with ``dL/dP``, the gradient with
respect to the predicted probability matrix, which :func:`model.backward`
turns into parameter gradients. ``log`` is always taken of ``max(P, 1e-12)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .align import ClassHistogram
from .errors import ValidationError
from .model import Prediction

PROB_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class LossValue:
    value: float
    dL_dprobs: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    lambda_ent: float = 0.001
    lambda_align: float = 0.001

    def __post_init__(self):
        if self.lambda_ent < 0 or self.lambda_align < 0:
            raise ValidationError("loss weights must be >= 0")


def _probs(pred) -> np.ndarray:
    return pred.probs if isinstance(pred, Prediction) else np.asarray(pred, dtype=np.float64)


def seg_loss(pred: Prediction | np.ndarray, labels: np.ndarray, ignore_index: int | None = None) -> LossValue:
    """Mean cross-entropy over points whose label is not ``ignore_index``."""
    P = _probs(pred)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (P.shape[0],):
        raise ValidationError(f"{labels.shape[0]} labels for {P.shape[0]} predictions")
    valid = np.ones(labels.shape, bool) if ignore_index is None else labels != ignore_index
    M = int(valid.sum())
    if M == 0:
        raise ValidationError("every point is ignored; segmentation loss undefined")
    rows = np.flatnonzero(valid)
    p_true = np.maximum(P[rows, labels[rows]], PROB_FLOOR)
    grad = np.zeros_like(P)
    # the clamp has zero slope below the floor
    grad[rows, labels[rows]] = np.where(P[rows, labels[rows]] >= PROB_FLOOR, -1.0 / (M * p_true), 0.0)
    return LossValue(float(-np.log(p_true).sum() / M), grad)


def entropy_loss(pred: Prediction | np.ndarray) -> LossValue:
    """Mean Shannon entropy normalized by ``log C``; lies in [0, 1]."""
    P = _probs(pred)
    N, C = P.shape
    if C < 2:
        raise ValidationError("entropy loss needs C >= 2")
    if N == 0:
        return LossValue(0.0, np.zeros_like(P))
    logP = np.log(np.maximum(P, PROB_FLOOR))
    scale = -1.0 / (N * math.log(C))
    value = scale * float((P * logP).sum())
    return LossValue(value, scale * (logP + 1.0))


def align_loss(pred: Prediction | np.ndarray, hist: ClassHistogram | np.ndarray, mode: str = "batch") -> LossValue:
    """KL divergence from the source class histogram to the predicted one.

    ``batch`` (default) compares the histogram with the mean prediction over
    every point of the batch. ``per_point`` averages ``KL(hist || P_n)`` over
    points instead.
    """
    P = _probs(pred)
    h = hist.freq if isinstance(hist, ClassHistogram) else np.asarray(hist, dtype=np.float64)
    N, C = P.shape
    if N < 1:
        raise ValidationError("alignment loss needs at least one point")
    if h.shape != (C,):
        raise ValidationError(f"histogram has {h.shape[0]} classes, predictions have {C}")
    pos = h > 0
    h_log_h = np.zeros(C)
    h_log_h[pos] = h[pos] * np.log(h[pos])
    if mode == "batch":
        mean = P.mean(axis=0)
        m = np.maximum(mean, PROB_FLOOR)
        value = float((h_log_h - np.where(pos, h * np.log(m), 0.0)).sum())
        col = np.where(pos & (mean >= PROB_FLOOR), -h / (N * m), 0.0)
        return LossValue(value, np.broadcast_to(col, P.shape).copy())
    if mode == "per_point":
        m = np.maximum(P, PROB_FLOOR)
        per = (h_log_h[None, :] - np.where(pos, h * np.log(m), 0.0)).sum(axis=1)
        grad = np.where(pos & (P >= PROB_FLOOR), -h / (N * m), 0.0)
        return LossValue(float(per.mean()), grad)
    raise ValidationError(f"unknown alignment mode {mode!r}")


@dataclass(frozen=True, eq=False)
class JointLoss:
    value: float
    src_grad: np.ndarray
    tgt_grad: np.ndarray
    terms: dict = field(default_factory=dict)


def joint_loss(src_pred, src_labels, tgt_pred, hist, weights: LossWeights = LossWeights(),
               ignore_index: int | None = None, align_mode: str = "batch") -> JointLoss:
    """``seg + lambda_align * align + lambda_ent * ent``.

    The source gradient comes from the segmentation term only; the target
    gradient from the two unsupervised terms.
    """
    seg = seg_loss(src_pred, src_labels, ignore_index)
    ent = entropy_loss(tgt_pred)
    ali = align_loss(tgt_pred, hist, align_mode)
    total = seg.value + weights.lambda_align * ali.value + weights.lambda_ent * ent.value
    tgt_grad = weights.lambda_align * ali.dL_dprobs + weights.lambda_ent * ent.dL_dprobs
    return JointLoss(total, seg.dL_dprobs, tgt_grad,
                     {"seg": seg.value, "align": ali.value, "ent": ent.value, "total": total})
