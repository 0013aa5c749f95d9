"""Segmentation losses, overlap metrics and binary classification metrics.

Losses are evaluated only; nothing here computes gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import (
    EmptyDenominator,
    LengthMismatch,
    NotADistribution,
    OneClassOnly,
    ShapeMismatch,
)

__all__ = [
    "EPS",
    "ConfusionCounts",
    "RocCurve",
    "SceConfig",
    "accuracy",
    "auc",
    "bce_loss",
    "confusion",
    "dice_loss",
    "dice_score",
    "f1",
    "iou",
    "precision",
    "recall",
    "roc_curve",
    "sce_loss",
    "seg_loss",
    "seg_precision",
    "seg_recall",
    "specificity",
]

EPS = 1e-7


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if s.shape != g.shape:
        raise ShapeMismatch(f"prediction shape {s.shape} != ground truth shape {g.shape}")
    if s.size == 0:
        raise ShapeMismatch("empty inputs")
    if np.any((s < 0) | (s > 1)) or np.any(np.isnan(s)):
        raise ValueError("predicted probabilities must lie in [0, 1]")
    if np.any((g != 0) & (g != 1)):
        raise ValueError("ground truth must be binary")
    return s, g


def bce_loss(pred, gt) -> float:
    """Mean binary cross-entropy with probabilities clamped to [EPS, 1-EPS]."""
    s, g = _pair(pred, gt)
    s = np.clip(s, EPS, 1.0 - EPS)
    return float(-np.mean(g * np.log(s) + (1.0 - g) * np.log1p(-s)))


def dice_loss(pred, gt) -> float:
    """Soft Dice loss ``1 - 2*sum(g*s) / (sum(g^2) + sum(s^2))``.

    Empty prediction against empty truth scores 0 (perfect).
    """
    s, g = _pair(pred, gt)
    denom = np.sum(g * g) + np.sum(s * s)
    if denom == 0:
        return 0.0
    return float(1.0 - 2.0 * np.sum(g * s) / denom)


def seg_loss(pred, gt) -> float:
    """Unweighted sum of BCE and Dice loss."""
    return bce_loss(pred, gt) + dice_loss(pred, gt)


@dataclass(frozen=True)
class SceConfig:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")


def _distribution(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise NotADistribution(f"{name} must be a non-empty vector")
    if np.any(x < 0) or abs(x.sum() - 1.0) > 1e-9:
        raise NotADistribution(f"{name} does not sum to 1 (sum={x.sum()!r})")
    return x


def sce_loss(p, q, cfg: SceConfig = SceConfig()) -> float:
    """Symmetric cross-entropy ``alpha*CE(p, q) + beta*RCE(p, q)``.

    ``CE(p, q) = -sum p log q`` and ``RCE(p, q) = -sum q log p``; ``p`` is the
    predicted distribution and ``q`` the target.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    if p_arr.shape != q_arr.shape:
        raise LengthMismatch(f"p has {p_arr.size} entries, q has {q_arr.size}")
    p_arr, q_arr = _distribution(p_arr, "p"), _distribution(q_arr, "q")
    log_p = np.log(np.clip(p_arr, EPS, 1.0))
    log_q = np.log(np.clip(q_arr, EPS, 1.0))
    ce = -np.sum(p_arr * log_q)
    rce = -np.sum(q_arr * log_p)
    return float(cfg.alpha * ce + cfg.beta * rce)


def _masks(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    for m in (a, b):
        if m.dtype != bool and np.any((m != 0) & (m != 1)):
            raise ValueError("masks must be binary")
    return a.astype(bool), b.astype(bool)


def dice_score(a, b) -> float:
    a, b = _masks(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def iou(a, b) -> float:
    a, b = _masks(a, b)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def seg_precision(pred_mask, gt) -> float:
    a, b = _masks(pred_mask, gt)
    n = int(a.sum())
    if n == 0:
        raise EmptyDenominator("precision undefined for an empty prediction")
    return int(np.count_nonzero(a & b)) / n


def seg_recall(pred_mask, gt) -> float:
    a, b = _masks(pred_mask, gt)
    n = int(b.sum())
    if n == 0:
        raise EmptyDenominator("recall undefined for an empty ground truth")
    return int(np.count_nonzero(a & b)) / n


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def _binary(x, name) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if np.any((x != 0) & (x != 1)):
        raise ValueError(f"{name} must be binary")
    return x.astype(bool)


def confusion(labels, predictions) -> ConfusionCounts:
    y, p = _binary(labels, "labels"), _binary(predictions, "predictions")
    if y.shape != p.shape:
        raise LengthMismatch(f"{y.size} labels vs {p.size} predictions")
    if y.size == 0:
        raise LengthMismatch("need at least one sample")
    return ConfusionCounts(
        tp=int(np.count_nonzero(y & p)),
        fp=int(np.count_nonzero(~y & p)),
        tn=int(np.count_nonzero(~y & ~p)),
        fn=int(np.count_nonzero(y & ~p)),
    )


# Undefined ratios come back as NaN so they cannot pass for a real zero.

def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    if math.isnan(p) or math.isnan(r):
        return math.nan
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


@dataclass(frozen=True, eq=False)
class RocCurve:
    """ROC points from (0, 0) to (1, 1).

    ``thresholds[i]`` is the score cut-off (predict positive when
    ``score >= threshold``) that produces point ``i``; the first is ``+inf``.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores, labels) -> RocCurve:
    """ROC over every distinct score; tied scores form a single step."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise LengthMismatch(f"{s.size} scores vs {y.size} labels")
    if np.any(np.isnan(s)):
        raise ValueError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("ROC needs at least one positive and one negative label")

    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    thresholds = np.r_[np.inf, s[ends]]
    return RocCurve(fpr, tpr, thresholds)


def auc(c: RocCurve) -> float:
    """Trapezoidal area under ``c``."""
    return float(np.trapezoid(c.tpr, c.fpr))
