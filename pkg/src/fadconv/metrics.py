"""Confusion-matrix segmentation metrics (OA, per-class P/R/F1/IoU, mIoU)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


class ConfusionMatrix:
    """``counts[t, p]`` = number of pixels with true class t predicted as p."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.k = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def update(self, true_map, pred_map) -> "ConfusionMatrix":
        t = np.asarray(true_map)
        p = np.asarray(pred_map)
        if t.shape != p.shape:
            raise ValueError(f"label map shape {t.shape} != prediction shape {p.shape}")
        if t.size == 0:
            return self
        for name, arr in (("true", t), ("pred", p)):
            bad = (arr < 0) | (arr >= self.k)
            if bad.any():
                where = tuple(int(i) for i in np.argwhere(bad)[0])
                raise ValueError(f"{name} class {arr[where]} out of range [0, {self.k}) at pixel {where}")
        idx = t.astype(np.int64).ravel() * self.k + p.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=self.k * self.k).reshape(self.k, self.k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise ValueError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.k, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def compute(self) -> "MetricsReport":
        return compute(self)


@dataclass
class ClassMetrics:
    acc: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    iou: float | None


@dataclass
class MetricsReport:
    oa: float
    per_class: list[ClassMetrics]
    miou: float

    def csv_header(self) -> list[str]:
        k = len(self.per_class)
        cols = ["oa", "miou"]
        for name in ("acc", "precision", "recall", "f1", "iou"):
            cols += [f"class_{name}_{i}" for i in range(k)]
        return cols

    def csv_values(self) -> list[str]:
        vals = [_fmt(self.oa), _fmt(self.miou)]
        for name in ("acc", "precision", "recall", "f1", "iou"):
            vals += [_fmt(getattr(c, name)) for c in self.per_class]
        return vals

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_values())
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"OA {self.oa:.4f}  mIoU {self.miou:.4f}",
                 f"{'class':>5} {'acc':>8} {'prec':>8} {'recall':>8} {'f1':>8} {'iou':>8}"]
        for i, c in enumerate(self.per_class):
            cells = " ".join(f"{'-' if v is None else format(v, '.4f'):>8}"
                             for v in (c.acc, c.precision, c.recall, c.f1, c.iou))
            lines.append(f"{i:>5} {cells}")
        return "\n".join(lines)


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def _f1(tp: int, fp: int, fn: int) -> float | None:
    if tp + fp + fn == 0:
        return None
    if tp == 0:
        return 0.0
    return 2 / (1 / (tp / (tp + fp)) + 1 / (tp / (tp + fn)))


def compute(cm: ConfusionMatrix) -> MetricsReport:
    """One-vs-rest metrics per class; undefined ratios are ``None``.

    OA is trace / total. F1 is the harmonic mean ``2 / (1/P + 1/R)``; when
    TP is 0 but the class occurs in truth or prediction it is 0 (the limit).
    """
    total = cm.total
    if total == 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")
    c = cm.counts
    per_class = []
    for i in range(cm.k):
        tp = int(c[i, i])
        fp = int(c[:, i].sum()) - tp
        fn = int(c[i, :].sum()) - tp
        tn = total - tp - fp - fn
        per_class.append(ClassMetrics(
            acc=(tp + tn) / total,
            precision=_ratio(tp, tp + fp),
            recall=_ratio(tp, tp + fn),
            f1=_f1(tp, fp, fn),
            iou=_ratio(tp, tp + fp + fn),
        ))
    ious = [m.iou for m in per_class if m.iou is not None]
    miou = sum(ious) / len(ious) if ious else 0.0
    return MetricsReport(oa=int(np.trace(c)) / total, per_class=per_class, miou=miou)
