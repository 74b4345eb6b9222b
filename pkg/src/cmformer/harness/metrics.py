"""Confusion matrices and mIoU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE = 255


@dataclass
class MetricsReport:
    per_class_iou: list  # float, or None for a class absent from both prediction and ground truth
    miou: float | None
    domain: str = ""
    checkpoint: str = ""

    @property
    def present(self):
        return [i for i, v in enumerate(self.per_class_iou) if v is not None]


def confusion_matrix(pred, gt, n_classes):
    """K x K counts, rows = ground truth, columns = prediction; ignore pixels skipped."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth sizes differ: {pred.size} vs {gt.size}")
    for name, arr in (("ground truth", gt), ("prediction", pred)):
        bad = (arr >= n_classes) & (arr != IGNORE)
        if bad.any() or (arr < 0).any():
            raise ValueError(f"{name} label out of range for K={n_classes}: {np.unique(arr[bad])}")
    keep = (gt != IGNORE) & (pred != IGNORE)
    idx = gt[keep] * n_classes + pred[keep]
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def report_from_confusion(conf, domain="", checkpoint=""):
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(0) + conf.sum(1) - tp
    per_class = [None if d == 0 else float(t / d) for t, d in zip(tp, denom)]
    present = [v for v in per_class if v is not None]
    miou = float(np.mean(present)) if present else None
    return MetricsReport(per_class, miou, domain, checkpoint)


def confusion_and_miou(pred, gt, n_classes):
    """IoU_c = TP / (TP + FP + FN); classes absent from both maps are left out of the mean."""
    return report_from_confusion(confusion_matrix(pred, gt, n_classes))
