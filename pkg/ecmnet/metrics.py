# ecmnet/metrics.py
"""Confusion-matrix accumulation, per-class IoU and the per-class report."""
import io
import logging

import numpy as np
import pandas as pd
import torch

from ecmnet.errors import MetricError

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255
REPORT_COLUMNS = ["class_id", "class", "iou_pct", "tp", "fp", "fn"]
SUMMARY_ROW = "mIoU"
UNDEFINED = "undefined"


def _as_numpy(array):
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    return np.asarray(array)


class ConfusionMatrix:
    """counts[i, j] = pixels with ground truth i predicted as j, ignore pixels excluded"""

    def __init__(self, num_classes, counts=None):
        if num_classes < 1:
            raise MetricError(f"num_classes must be positive, got {num_classes}")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise MetricError(f"counts must be a non-negative {num_classes}x{num_classes} matrix")
        self.counts = counts

    def accumulate(self, pred, gt):
        """Add one prediction/label pair (any matching shapes); returns self"""
        pred = _as_numpy(pred).astype(np.int64, copy=False)
        gt = _as_numpy(gt).astype(np.int64, copy=False)
        if pred.shape != gt.shape:
            raise MetricError(f"Prediction shape {pred.shape} does not match label shape {gt.shape}")
        k = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= k):
            raise MetricError(f"Prediction values must lie in [0, {k}), got range [{pred.min()}, {pred.max()}]")
        keep = gt != IGNORE_INDEX
        gt_kept = gt[keep]
        if gt_kept.size and (gt_kept.min() < 0 or gt_kept.max() >= k):
            raise MetricError(f"Label values must lie in [0, {k}) or equal {IGNORE_INDEX}")
        index = k * gt_kept + pred[keep]
        self.counts += np.bincount(index.ravel(), minlength=k * k).reshape(k, k)
        return self

    def merge(self, other):
        """Elementwise sum of two matrices over the same classes"""
        if other.num_classes != self.num_classes:
            raise MetricError(f"Cannot merge {other.num_classes}-class matrix into {self.num_classes}-class")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def reset(self):
        self.counts[:] = 0

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def true_positives(self):
        return np.diag(self.counts).copy()

    @property
    def false_positives(self):
        return self.counts.sum(axis=0) - np.diag(self.counts)

    @property
    def false_negatives(self):
        return self.counts.sum(axis=1) - np.diag(self.counts)

    def pixel_accuracy(self):
        return float(np.diag(self.counts).sum() / self.total) if self.total else float("nan")


def accumulate(cm, pred, gt):
    return cm.accumulate(pred, gt)


def _iou(tp, fp, fn):
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    union = tp + fp + fn
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def iou_per_class(cm):
    """TP / (TP + FP + FN) per class, NaN where the class never occurs in labels or predictions"""
    return _iou(cm.true_positives, cm.false_positives, cm.false_negatives)


def _nanmean(values):
    defined = values[~np.isnan(values)]
    return float(defined.mean()) if defined.size else float("nan")


def mean_iou(cm):
    """Mean over defined classes; NaN when no class is defined"""
    return _nanmean(iou_per_class(cm))


class MetricReport:
    """Per-class IoU table with exact counts and the mIoU summary"""

    def __init__(self, class_names, tp, fp, fn):
        self.class_names = list(class_names)
        self.tp = np.asarray(tp, dtype=np.int64)
        self.fp = np.asarray(fp, dtype=np.int64)
        self.fn = np.asarray(fn, dtype=np.int64)
        self.iou = _iou(self.tp, self.fp, self.fn)
        self.miou = _nanmean(self.iou)

    @property
    def undefined_classes(self):
        return [name for name, value in zip(self.class_names, self.iou) if np.isnan(value)]

    def to_frame(self):
        """One row per class plus the mIoU summary row, stable column order"""
        rows = [
            {
                "class_id": i,
                "class": name,
                "iou_pct": None if np.isnan(self.iou[i]) else round(100.0 * self.iou[i], 1),
                "tp": int(self.tp[i]),
                "fp": int(self.fp[i]),
                "fn": int(self.fn[i]),
            }
            for i, name in enumerate(self.class_names)
        ]
        rows.append({
            "class_id": None,
            "class": SUMMARY_ROW,
            "iou_pct": None if np.isnan(self.miou) else round(100.0 * self.miou, 1),
            "tp": None, "fp": None, "fn": None,
        })
        df = pd.DataFrame(rows, columns=REPORT_COLUMNS)
        for column in ("class_id", "tp", "fp", "fn"):
            df[column] = df[column].astype("Int64")
        return df

    def to_csv(self):
        return self.to_frame().to_csv(index=False, float_format="%.1f", na_rep=UNDEFINED)

    @classmethod
    def from_csv(cls, text):
        df = pd.read_csv(io.StringIO(text), na_values=[UNDEFINED], keep_default_na=False)
        if list(df.columns) != REPORT_COLUMNS:
            raise MetricError(f"Report columns {list(df.columns)} do not match {REPORT_COLUMNS}")
        classes = df[df["class"] != SUMMARY_ROW]
        return cls(classes["class"].tolist(), classes["tp"].astype(np.int64),
                   classes["fp"].astype(np.int64), classes["fn"].astype(np.int64))

    def to_dict(self):
        return {
            "miou": None if np.isnan(self.miou) else self.miou,
            "per_class": {name: (None if np.isnan(v) else float(v)) for name, v in zip(self.class_names, self.iou)},
        }

    def __eq__(self, other):
        return (isinstance(other, MetricReport) and self.class_names == other.class_names
                and np.array_equal(self.tp, other.tp) and np.array_equal(self.fp, other.fp)
                and np.array_equal(self.fn, other.fn))


def report(cm, class_names):
    """Build the per-class report; class_names must have one entry per class"""
    if len(class_names) != cm.num_classes:
        raise MetricError(f"{len(class_names)} class names for a {cm.num_classes}-class matrix")
    result = MetricReport(class_names, cm.true_positives, cm.false_positives, cm.false_negatives)
    if result.undefined_classes:
        logger.warning(f"IoU undefined for classes absent from labels and predictions: {result.undefined_classes}")
    return result
