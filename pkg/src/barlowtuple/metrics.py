"""Alignment and segmentation metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DimensionError, LabelError, NumericError, UndefinedMetricError


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cosine_distance: shapes differ {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericError("cosine distance undefined for a zero vector")
    return float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))


def mean_pairwise_cosine_distance(ref_reps, other_reps) -> float:
    """Mean over rows of the cosine distance between corresponding rows."""
    ref = np.asarray(ref_reps, dtype=np.float64)
    other = np.asarray(other_reps, dtype=np.float64)
    if ref.ndim != 2 or ref.shape != other.shape:
        raise DimensionError(f"row-wise cosine distance needs equal [B, R] inputs, got {ref.shape}, {other.shape}")
    na = np.linalg.norm(ref, axis=1)
    nb = np.linalg.norm(other, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("cosine distance undefined for a zero row")
    d = 1.0 - np.einsum("ij,ij->i", ref, other) / (na * nb)
    return float(np.clip(d, 0.0, 2.0).mean())


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    num_classes: int = 3
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise DimensionError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return self.merge(other)

    def copy(self) -> ConfusionMatrix:
        return ConfusionMatrix(self.num_classes, self.counts.copy())


def accumulate_confusion(cm: ConfusionMatrix, pred, gt, ignore_label: int | None = None) -> ConfusionMatrix:
    """Add the pixel counts of one (pred, gt) pair to ``cm`` in place."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {np.shape(pred)} vs {np.shape(gt)}")
    if ignore_label is not None:
        keep = gt != ignore_label
        pred, gt = pred[keep], gt[keep]
    C = cm.num_classes
    if gt.size and (gt.min() < 0 or gt.max() >= C or pred.min() < 0 or pred.max() >= C):
        raise LabelError(f"class ids must lie in [0, {C})")
    cm.counts += np.bincount(gt.astype(np.int64) * C + pred.astype(np.int64), minlength=C * C).reshape(C, C)
    return cm


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class, NaN where the class has an empty union."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    out = np.full(cm.num_classes, np.nan)
    np.divide(tp, union, out=out, where=union > 0)
    return out


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes whose union is non-empty."""
    ious = iou_per_class(cm)
    if np.all(np.isnan(ious)):
        raise UndefinedMetricError("mIoU undefined: every class union is empty")
    return float(np.nanmean(ious))


def concordance(mask_a, mask_b, num_classes: int = 3) -> float:
    """mIoU between two predicted masks (``mask_a`` plays ground truth)."""
    mask_a, mask_b = np.asarray(mask_a), np.asarray(mask_b)
    if mask_a.shape != mask_b.shape:
        raise DimensionError(f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    return miou(accumulate_confusion(ConfusionMatrix(num_classes), mask_b, mask_a))


@dataclass
class MetricRow:
    epoch: int
    domain: str
    metric: str
    value: float
    seed: int


METRIC_FIELDS = ("epoch", "domain", "metric", "value", "seed")


def format_metric_csv(rows: Iterable[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([r.epoch, r.domain, r.metric, repr(float(r.value)), r.seed])
    return buf.getvalue()


def parse_metric_csv(text: str) -> list[MetricRow]:
    reader = csv.DictReader(io.StringIO(text))
    return [MetricRow(int(r["epoch"]), r["domain"], r["metric"], float(r["value"]), int(r["seed"])) for r in reader]
