"""Streaming confusion matrices and the IoU metric family."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels, labels as cs

__all__ = ["ConfusionMatrix", "CategoryMap", "MetricReport", "iou_metrics", "cityscapes_categories"]


class ConfusionMatrix:
    """K x K pixel counts, ``counts[g, p]`` = pixels of truth g predicted as p.

    Accumulate per worker with :meth:`update`, combine with ``+`` / :meth:`merge`.
    """

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ValueError(f"counts must be a non-negative {num_classes}x{num_classes} matrix")
        self.num_classes = num_classes
        self.counts = counts

    def update(self, predictions, labels, ignore_index: int | None = None) -> "ConfusionMatrix":
        predictions, labels = np.asarray(predictions), np.asarray(labels)
        if predictions.shape != labels.shape:
            raise ValueError(f"prediction shape {predictions.shape} != label shape {labels.shape}")
        ign = -1 if ignore_index is None else ignore_index
        kernels.confusion_update(self.counts, labels, predictions, ign)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix(num_classes={self.num_classes}, total={self.total})"


@dataclass(frozen=True)
class CategoryMap:
    class_to_category: tuple[int, ...]
    names: tuple[str, ...]

    def collapse(self, cm: ConfusionMatrix) -> ConfusionMatrix:
        m = np.zeros((len(self.names), cm.num_classes), dtype=np.int64)
        m[list(self.class_to_category), np.arange(cm.num_classes)] = 1
        return ConfusionMatrix(len(self.names), m @ cm.counts @ m.T)


def cityscapes_categories() -> CategoryMap:
    return CategoryMap(cs.train_to_category(), cs.category_names())


def _iou(counts: np.ndarray) -> np.ndarray:
    tp = np.diag(counts).astype(np.float64)
    union = counts.sum(0) + counts.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


@dataclass(frozen=True)
class MetricReport:
    class_names: tuple[str, ...]
    class_iou: np.ndarray  # NaN = class absent from truth and prediction
    miou: float
    category_names: tuple[str, ...] = ()
    category_iou: np.ndarray = field(default_factory=lambda: np.zeros(0))
    category_miou: float | None = None
    pixel_accuracy: float = float("nan")
    # instance-level metrics need instance annotations; kept for table layout
    class_iiou: float | None = None
    category_iiou: float | None = None

    def columns(self, preferred: tuple[str, ...] = cs.TABLE1_CLASSES) -> list[str]:
        head = [c for c in preferred if c in self.class_names]
        return head + [c for c in self.class_names if c not in head]

    def to_csv(self, model_id: str = "model", preferred: tuple[str, ...] = cs.TABLE1_CLASSES) -> str:
        """One header row, one data row: mIoU, classes (ablation-table order first), categories."""
        cols = self.columns(preferred)
        idx = {n: i for i, n in enumerate(self.class_names)}
        header = ["model", "mIoU", *cols, "category_mIoU", *[f"cat_{c}" for c in self.category_names],
                  "class_iIoU",
                  "category_iIoU"]
        fmt = lambda v: "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{100 * v:.2f}"
        row = [model_id, fmt(self.miou), *[fmt(float(self.class_iou[idx[c]])) for c in cols],
               fmt(self.category_miou), *[fmt(float(v)) for v in self.category_iou],
               fmt(self.class_iiou), fmt(self.category_iiou)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerow(row)
        return buf.getvalue()


def iou_metrics(cm: ConfusionMatrix, categories: CategoryMap | None = None,
                class_names: tuple[str, ...] | None = None) -> MetricReport:
    """Per-class IoU, mIoU and (with ``categories``) category IoU.

    Classes absent from both truth and prediction are excluded from the means.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    iou = _iou(cm.counts)
    miou = float(np.nanmean(iou))
    acc = float(np.trace(cm.counts) / cm.total)
    if class_names is None:
        if cm.num_classes == cs.NUM_EVAL_CLASSES:
            class_names = cs.train_class_names()
        else:
            class_names = tuple(f"class_{i}" for i in range(cm.num_classes))
    if categories is None:
        return MetricReport(tuple(class_names), iou, miou, pixel_accuracy=acc)
    ccm = categories.collapse(cm)
    ciou = _iou(ccm.counts)
    return MetricReport(tuple(class_names), iou, miou, categories.names, ciou,
                        float(np.nanmean(ciou)), acc)
