"""Confusion matrices and mean intersection-over-union."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, LabelError, NumericError


class ConfusionMatrix:
    """C x (C+1) counts; rows are ground truth, columns are predictions, the
    last column collects predictions outside the evaluated class mask."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ConfigError(f"need at least one class, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes + 1), dtype=np.int64)

    @property
    def other_column(self):
        return self.num_classes

    def total(self):
        return int(self.counts.sum())

    def add(self, other: "ConfusionMatrix"):
        if other.num_classes != self.num_classes:
            raise ConfigError("confusion matrices have different class counts")
        self.counts += other.counts
        return self


def accumulate_confusion(pred, gt, mask, num_classes: int) -> ConfusionMatrix:
    """Count points whose ground-truth class is in the mask; predictions
    outside the mask land in the reserved "other" column."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ConfigError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise LabelError(f"prediction id outside [0, {num_classes})")
    if gt.size and (gt.min() < 0 or gt.max() >= num_classes):
        raise LabelError(f"ground-truth id outside [0, {num_classes})")
    mask = sorted(set(int(m) for m in mask))
    if any(m < 0 or m >= num_classes for m in mask):
        raise LabelError(f"mask id outside [0, {num_classes})")

    cm = ConfusionMatrix(num_classes)
    in_mask = np.zeros(num_classes, dtype=bool)
    in_mask[mask] = True
    keep = in_mask[gt]
    g = gt[keep]
    p = pred[keep]
    p = np.where(in_mask[p], p, num_classes)  # out-of-mask predictions -> "other"
    np.add.at(cm.counts, (g, p), 1)
    return cm


def iou_per_class(cm: ConfusionMatrix, mask):
    """IoU per masked class; classes with no support (TP+FP+FN = 0) are None."""
    mask = sorted(set(int(m) for m in mask))
    if not mask:
        raise ConfigError("class mask is empty")
    out = {}
    counts = cm.counts
    for c in mask:
        tp = int(counts[c, c])
        fn = int(counts[c].sum()) - tp
        fp = int(counts[[m for m in mask], c].sum()) - tp
        denom = tp + fp + fn
        out[c] = None if denom == 0 else tp / denom
    return out


def miou(cm: ConfusionMatrix, mask) -> float:
    """Mean IoU over the masked classes that have any support."""
    per_class = iou_per_class(cm, mask)
    values = [v for v in per_class.values() if v is not None]
    if not values:
        raise NumericError("mIoU undefined: every masked class is empty")
    return float(np.mean(values))
