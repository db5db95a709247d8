"""Confusion-matrix metrics: per-class precision/recall/F1, Avg. F1 and OA."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ConfusionMatrix:
    """Counts with rows = reference class, columns = predicted class."""

    def __init__(self, num_classes: int, class_names: Optional[Sequence[str]] = None):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.class_names = list(class_names) if class_names else [str(c) for c in range(num_classes)]
        if len(self.class_names) != num_classes:
            raise ValueError(f"{len(self.class_names)} names for {num_classes} classes")
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @classmethod
    def from_counts(cls, counts, class_names=None) -> "ConfusionMatrix":
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        cm = cls(counts.shape[0], class_names)
        cm.counts = counts.astype(np.int64).copy()
        return cm

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, ref, pred) -> "ConfusionMatrix":
        """Add one count per (reference, prediction) pair, in place."""
        ref, pred = np.asarray(ref).reshape(-1), np.asarray(pred).reshape(-1)
        if ref.shape != pred.shape:
            raise ValueError(f"{ref.size} reference labels vs {pred.size} predictions")
        c = self.num_classes
        for name, arr in (("reference", ref), ("predicted", pred)):
            bad = np.flatnonzero((arr < 0) | (arr >= c))
            if bad.size:
                i = int(bad[0])
                raise ValueError(f"{name} label {arr[i]} at position {i} outside [0, {c})")
        self.counts += np.bincount(ref.astype(np.int64) * c + pred.astype(np.int64),
                                   minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different size")
        out = ConfusionMatrix.from_counts(self.counts + other.counts, self.class_names)
        return out

    def permuted(self, perm) -> "ConfusionMatrix":
        """Relabel classes so that new class ``k`` is old class ``perm[k]``."""
        perm = np.asarray(perm)
        return ConfusionMatrix.from_counts(self.counts[np.ix_(perm, perm)],
                                           [self.class_names[p] for p in perm])

    def metrics(self) -> "Metrics":
        return metrics(self)


@dataclass
class Metrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray  # reference points per class
    avg_f1: float
    overall_accuracy: float
    undefined: np.ndarray  # True where a zero denominator forced a 0 score
    class_names: list


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Precision = diag/colsum, recall = diag/rowsum, F1 their harmonic mean.

    Classes with a zero denominator score 0, are flagged in ``undefined``
    and still count towards the unweighted Avg. F1.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(counts)
    colsum, rowsum = counts.sum(axis=0), counts.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(colsum > 0, diag / colsum, 0.0)
        recall = np.where(rowsum > 0, diag / rowsum, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2 * precision * recall / pr, 0.0)
    undefined = (colsum == 0) | (rowsum == 0)
    return Metrics(precision, recall, f1, rowsum.astype(np.int64), float(f1.mean()),
                   float(diag.sum() / total), undefined, list(cm.class_names))


def format_report(cm: ConfusionMatrix) -> str:
    """Plain-text table: counts with row percentages, then precision/recall/F1 rows."""
    m = metrics(cm)
    names = cm.class_names
    width = max(12, *(len(n) + 2 for n in names))
    rows = cm.counts.sum(axis=1)
    lines = ["Classes".ljust(width) + "".join(n.rjust(width + 4) for n in names)]
    for i, name in enumerate(names):
        cells = []
        for j in range(cm.num_classes):
            pct = 100.0 * cm.counts[i, j] / rows[i] if rows[i] else 0.0
            cells.append(f"{pct:.1f} ({cm.counts[i, j]})".rjust(width + 4))
        lines.append(name.ljust(width) + "".join(cells))
    for label, vals in (("Precision", m.precision), ("Recall", m.recall), ("F1 score", m.f1)):
        lines.append(label.ljust(width) + "".join(f"{100 * v:.1f}".rjust(width + 4) for v in vals))
    lines.append(f"Avg. F1: {100 * m.avg_f1:.1f}   OA: {100 * m.overall_accuracy:.1f}   "
                 f"points: {cm.total}")
    flagged = [names[i] for i in np.flatnonzero(m.undefined)]
    if flagged:
        lines.append("classes without reference or predicted points (scored 0): " + ", ".join(flagged))
    return "\n".join(lines) + "\n"


def metrics_csv(cm: ConfusionMatrix) -> str:
    m = metrics(cm)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "precision", "recall", "f1", "support", "undefined"])
    for i, name in enumerate(cm.class_names):
        w.writerow([name, repr(float(m.precision[i])), repr(float(m.recall[i])),
                    repr(float(m.f1[i])), int(m.support[i]), int(m.undefined[i])])
    w.writerow(["avg_f1", "", "", repr(m.avg_f1), "", ""])
    w.writerow(["overall_accuracy", "", "", repr(m.overall_accuracy), cm.total, ""])
    return buf.getvalue()
