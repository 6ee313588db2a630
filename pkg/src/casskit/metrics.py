"""Confusion-derived classification metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CassValidationError, UndefinedMetricError


@dataclass
class ConfusionCounts:
    """One-vs-rest counts per class."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def __post_init__(self):
        self.tp, self.fp, self.fn, self.tn = (np.asarray(a, dtype=np.int64) for a in
                                              (self.tp, self.fp, self.fn, self.tn))
        if not (self.tp.shape == self.fp.shape == self.fn.shape == self.tn.shape):
            raise CassValidationError("count arrays differ in shape")
        if min(a.min(initial=0) for a in (self.tp, self.fp, self.fn, self.tn)) < 0:
            raise CassValidationError("counts must be nonnegative")

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @classmethod
    def from_matrix(cls, cm) -> "ConfusionCounts":
        """From a K x K matrix with true classes on rows, predictions on columns."""
        cm = np.asarray(cm, dtype=np.int64)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
            raise CassValidationError(f"confusion matrix must be square, got {cm.shape}")
        tp = np.diag(cm)
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        tn = cm.sum() - tp - fp - fn
        return cls(tp, fp, fn, tn)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise CassValidationError("y_true and y_pred differ in length")
    if len(y_true) and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= num_classes):
        raise CassValidationError("label outside [0, num_classes)")
    return np.bincount(y_true * num_classes + y_pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def confusion_counts(y_true, y_pred, num_classes: int) -> ConfusionCounts:
    return ConfusionCounts.from_matrix(confusion_matrix(y_true, y_pred, num_classes))


def multilabel_counts(y_true, y_pred) -> ConfusionCounts:
    """Per-class binary counts from (n, K) 0/1 matrices."""
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    return ConfusionCounts((t & p).sum(0), (~t & p).sum(0), (t & ~p).sum(0), (~t & ~p).sum(0))


def _safe_ratio(num, den):
    den = np.asarray(den, dtype=np.float64)
    flagged = den == 0
    return np.where(flagged, 0.0, num / np.where(flagged, 1.0, den)), flagged


def _check_defined(counts: ConfusionCounts):
    if counts.num_classes == 0 or (counts.tp.sum() + counts.fp.sum() + counts.fn.sum() + counts.tn.sum()) == 0:
        raise UndefinedMetricError("all confusion counts are zero")


def per_class_f1(counts: ConfusionCounts) -> tuple[np.ndarray, np.ndarray]:
    """``2TP / (2TP + FP + FN)`` per class, plus the zero-denominator flags."""
    _check_defined(counts)
    return _safe_ratio(2.0 * counts.tp, 2 * counts.tp + counts.fp + counts.fn)


def per_class_recall(counts: ConfusionCounts) -> tuple[np.ndarray, np.ndarray]:
    _check_defined(counts)
    return _safe_ratio(counts.tp.astype(np.float64), counts.tp + counts.fn)


def f1_score(counts: ConfusionCounts, average: str = "macro") -> float:
    if average == "macro":
        return float(per_class_f1(counts)[0].mean())
    if average == "micro":
        _check_defined(counts)
        tp, fp, fn = counts.tp.sum(), counts.fp.sum(), counts.fn.sum()
        den = 2 * tp + fp + fn
        return float(2 * tp / den) if den else 0.0
    raise CassValidationError(f"unknown average {average!r}")


def balanced_accuracy(counts: ConfusionCounts) -> float:
    """Mean of per-class recalls (macro recall)."""
    return float(per_class_recall(counts)[0].mean())


@dataclass
class MetricReport:
    f1: float
    balanced_accuracy: float
    per_class_recall: list[float]
    per_class_f1: list[float]
    flagged_classes: list[int] = field(default_factory=list)
    label_fraction: float | None = None
    seed: int | None = None
    n: int = 0

    def to_record(self) -> dict:
        return {"type": "metrics", **asdict(self)}


def metric_report(counts: ConfusionCounts, *, label_fraction=None, seed=None, average="macro") -> MetricReport:
    f1s, f1_flag = per_class_f1(counts)
    rec, rec_flag = per_class_recall(counts)
    return MetricReport(
        f1=f1_score(counts, average),
        balanced_accuracy=float(rec.mean()),
        per_class_recall=[float(x) for x in rec],
        per_class_f1=[float(x) for x in f1s],
        flagged_classes=[int(i) for i in np.flatnonzero(f1_flag | rec_flag)],
        label_fraction=label_fraction,
        seed=seed,
        n=int(counts.tp.sum() + counts.fn.sum()),
    )
