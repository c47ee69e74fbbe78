"""Pointwise forecast scores."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = ["BinaryMetrics", "mse", "binary_metrics", "confusion_counts", "predict_persistence"]


def mse(y, yhat) -> float:
    """Mean squared difference over all elements."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeError(f"shape mismatch {y.shape} vs {yhat.shape}")
    d = y - yhat
    return float(np.mean(d * d))


def confusion_counts(y, yhat, threshold: float = 0.0, axis=None):
    """``(tp, fp, tn, fn)`` after binarising both fields at ``> threshold``."""
    y = np.asarray(y)
    yhat = np.asarray(yhat)
    if y.shape != yhat.shape:
        raise ShapeError(f"shape mismatch {y.shape} vs {yhat.shape}")
    obs = y > threshold
    fc = yhat > threshold
    tp = np.count_nonzero(obs & fc, axis=axis)
    fp = np.count_nonzero(~obs & fc, axis=axis)
    tn = np.count_nonzero(~obs & ~fc, axis=axis)
    fn = np.count_nonzero(obs & ~fc, axis=axis)
    return tp, fp, tn, fn


@dataclass
class BinaryMetrics:
    """Rain/no-rain contingency scores.

    Precision (recall) is NaN with ``precision_defined`` (``recall_defined``)
    False when no pixel is forecast (observed) as rain.
    """

    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp, fp, tn, fn, threshold: float = 0.0) -> "BinaryMetrics":
        return cls(float(threshold), int(tp), int(fp), int(tn), int(fn))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else math.nan

    @property
    def precision_defined(self) -> bool:
        return self.tp + self.fp > 0

    @property
    def recall_defined(self) -> bool:
        return self.tp + self.fn > 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.precision_defined else math.nan

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.recall_defined else math.nan

    def __add__(self, other: "BinaryMetrics") -> "BinaryMetrics":
        return BinaryMetrics(self.threshold, self.tp + other.tp, self.fp + other.fp,
                             self.tn + other.tn, self.fn + other.fn)

    def to_dict(self) -> dict:
        def opt(x, ok):
            return float(x) if ok else None

        return {
            "threshold": self.threshold,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": opt(self.accuracy, self.total > 0),
            "precision": opt(self.precision, self.precision_defined),
            "recall": opt(self.recall, self.recall_defined),
            "precision_undefined": not self.precision_defined,
            "recall_undefined": not self.recall_defined,
        }


def binary_metrics(y, yhat, threshold: float = 0.0) -> BinaryMetrics:
    return BinaryMetrics.from_counts(*confusion_counts(y, yhat, threshold), threshold=threshold)


def predict_persistence(cond, n_lead: int = 3, rain_channel: int | None = None) -> np.ndarray:
    """Repeat the last observed rain frame for every lead hour.

    ``cond`` is a :class:`~ged.data.ConditioningStack` or a channel-last
    array (single ``[H, W, C]`` or batched) whose rain history comes first;
    for arrays ``rain_channel`` (default 7, the eighth history frame) picks
    the most recent rain frame.
    """
    if hasattr(cond, "last_rain"):
        last = np.asarray(cond.last_rain)
    else:
        arr = np.asarray(cond)
        last = arr[..., 7 if rain_channel is None else rain_channel]
    return np.repeat(last[..., None], n_lead, axis=-1)
