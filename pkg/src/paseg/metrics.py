"""One-vs-rest confusion counts, Dice and TPR with N/A semantics (``None``)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import N_CLASSES, LabelMap, PasegError, TissueClass


class MetricError(PasegError, ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class arrays of length ``n_classes``."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def n_pixels(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class ClassScore:
    cls: TissueClass
    dice: float | None
    tpr: float | None


def _values(m):
    return m.values if isinstance(m, LabelMap) else np.asarray(m)


def confusion(ref, pred, n_classes: int = N_CLASSES) -> ConfusionCounts:
    ref, pred = _values(ref), _values(pred)
    if ref.shape != pred.shape:
        raise MetricError(f"reference {ref.shape} and prediction {pred.shape} differ in shape")
    joint = np.bincount(ref.ravel().astype(np.int64) * n_classes + pred.ravel(),
                        minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(joint).astype(np.int64)
    fn = joint.sum(axis=1) - tp
    fp = joint.sum(axis=0) - tp
    tn = ref.size - tp - fn - fp
    return ConfusionCounts(tp, fp, fn, tn)


def dice(counts: ConfusionCounts, cls) -> float | None:
    tp, fp, fn = (int(a[int(cls)]) for a in (counts.tp, counts.fp, counts.fn))
    denom = 2 * tp + fp + fn
    return None if denom == 0 else 2 * tp / denom


def tpr(counts: ConfusionCounts, cls) -> float | None:
    tp, fn = int(counts.tp[int(cls)]), int(counts.fn[int(cls)])
    return None if tp + fn == 0 else tp / (tp + fn)


def class_scores(ref, pred) -> list[ClassScore]:
    counts = confusion(ref, pred)
    return [ClassScore(c, dice(counts, c), tpr(counts, c)) for c in TissueClass]


def mean_dice(ref, pred) -> float | None:
    """Mean Dice over the classes present in reference or prediction."""
    vals = [s.dice for s in class_scores(ref, pred) if s.dice is not None]
    return float(np.mean(vals)) if vals else None
