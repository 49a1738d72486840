"""Segmentation and classification metrics."""
from __future__ import annotations

from collections import defaultdict
from typing import Iterable

import numpy as np

from ..errors import EmptyInputError, ShapeError, UndefinedMetricError


class ConfusionMatrix:
    """Counts with ground truth along rows and predictions along columns."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, gt, pred) -> "ConfusionMatrix":
        accumulate(self, gt, pred)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out


def accumulate(confusion: ConfusionMatrix, gt, pred) -> ConfusionMatrix:
    """Add (gt, pred) pairs; points with ground truth -1 are skipped."""
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if gt.shape != pred.shape:
        raise ShapeError(f"{gt.size} labels vs {pred.size} predictions")
    keep = gt >= 0
    gt, pred = gt[keep], pred[keep]
    c = confusion.num_classes
    if gt.size and (gt.max() >= c or pred.min() < 0 or pred.max() >= c):
        raise ShapeError(f"labels outside [0, {c})")
    confusion.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
    return confusion


def miou(confusion: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from ground truth) and their mean."""
    m = confusion.counts.astype(np.float64)
    tp = np.diag(m)
    gt_total = m.sum(axis=1)
    union = gt_total + m.sum(axis=0) - tp
    present = gt_total > 0
    if not np.any(present):
        raise UndefinedMetricError("no ground-truth labels: mIoU is undefined")
    iou = np.full(confusion.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return iou, float(np.mean(iou[present]))


def accuracy(gt, pred) -> float:
    gt = np.asarray(gt).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    keep = gt >= 0
    if gt.shape != pred.shape:
        raise ShapeError("ground truth and predictions differ in length")
    if not np.any(keep):
        raise EmptyInputError("no labeled elements to score")
    return float(np.mean(gt[keep] == pred[keep]))


def instance_miou(shape_mious: Iterable[float]) -> float:
    vals = list(shape_mious)
    if not vals:
        raise EmptyInputError("no shapes to average")
    return float(np.mean(vals))


def category_miou(shapes: Iterable[tuple[str, float]]) -> float:
    """Mean over categories of the mean shape mIoU within each category."""
    groups: dict[str, list[float]] = defaultdict(list)
    for cat, value in shapes:
        groups[cat].append(value)
    if not groups:
        raise EmptyInputError("no shapes to average")
    return float(np.mean([np.mean(v) for v in groups.values()]))


def report_csv(iou: np.ndarray, mean_iou: float, acc: float, class_names=None) -> str:
    """Per-class IoU rows followed by the summary metrics."""
    lines = ["metric,class_id,class_name,value"]
    for c, v in enumerate(iou):
        name = class_names[c] if class_names is not None and c < len(class_names) else str(c)
        lines.append(f"iou,{c},{name},{'nan' if np.isnan(v) else f'{v:.6f}'}")
    lines.append(f"miou,,,{mean_iou:.6f}")
    lines.append(f"accuracy,,,{acc:.6f}")
    return "\n".join(lines) + "\n"


def report_summary(iou: np.ndarray, mean_iou: float, acc: float, class_names=None) -> str:
    present = int(np.sum(~np.isnan(iou)))
    lines = [f"mIoU {100 * mean_iou:.2f} over {present} classes present in ground truth",
             f"accuracy {100 * acc:.2f}"]
    for c, v in enumerate(iou):
        name = class_names[c] if class_names is not None and c < len(class_names) else str(c)
        lines.append(f"  {name:>10s}  {'absent' if np.isnan(v) else f'{100 * v:6.2f}'}")
    return "\n".join(lines) + "\n"
