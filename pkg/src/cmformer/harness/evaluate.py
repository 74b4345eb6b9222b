"""Evaluation of a checkpoint on one dataset, with CSV report rows."""
from __future__ import annotations

import csv
import os

import numpy as np

from ..segmodel import load_checkpoint
from ..synthbench import CLASSES
from .config import ConfigError
from .metrics import confusion_matrix, report_from_confusion


def report_columns(n_classes):
    names = CLASSES if n_classes == len(CLASSES) else [f"class{i}" for i in range(n_classes)]
    return ["domain"] + [f"iou_{c}" for c in names] + ["miou", "checkpoint", "seed"]


def evaluate_model(model, dataset, domain="", checkpoint="", batch_size=16):
    k = model.cfg.n_classes
    if dataset.n_classes != k:
        raise ConfigError(f"checkpoint predicts {k} classes, dataset has {dataset.n_classes}")
    h, w = dataset.labels.shape[1:]
    if h % 32 or w % 32:
        raise ConfigError(f"dataset images are {h}x{w}; both sides must be multiples of 32")
    conf = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start:start + batch_size].astype(np.float64)
        pred = model.predict(imgs)
        conf += confusion_matrix(pred, dataset.labels[start:start + batch_size], k)
    return report_from_confusion(conf, domain, checkpoint)


def append_report(path, report, seed=""):
    k = len(report.per_class_iou)
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(report_columns(k))
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        writer.writerow([report.domain] + [fmt(v) for v in report.per_class_iou]
                        + [fmt(report.miou), report.checkpoint, seed])


def evaluate(checkpoint_path, dataset, domain_name, report_path=None, seed=""):
    """Load a checkpoint, score ``dataset`` and optionally append a CSV row."""
    model, ckpt_id = load_checkpoint(checkpoint_path)
    report = evaluate_model(model, dataset, domain_name, ckpt_id)
    if report_path:
        append_report(report_path, report, seed)
    return report
