"""Training loop: AdamW on the set-prediction loss, per-epoch CSV log and checkpoints."""
from __future__ import annotations

import csv
import io
import logging
import os

import numpy as np

from .. import ndtensor as nd
from ..objective import segments_from_labels, total_loss
from ..segmodel import CMFormerMini, checkpoint_bytes, checkpoint_id, decode_checkpoint, model_from_tensors
from .config import ConfigError, format_enhancement
from .evaluate import evaluate_model

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss", "ce", "dice", "cls", "val_miou")


class TrainingDiverged(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.weight_decay = lr, weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _clip(params, max_norm):
    total = np.sqrt(np.sum([np.sum(p.grad ** 2) for p in params.values() if p.grad is not None]))
    if max_norm > 0 and total > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / total)
    return total


def _check_data(cfg, ds, what):
    n, h, w = ds.labels.shape
    if ds.n_classes != cfg.n_classes:
        raise ConfigError(f"{what} has K={ds.n_classes} classes but the config says {cfg.n_classes}")
    if h % 32 or w % 32:
        raise ConfigError(f"{what} images are {h}x{w}; both sides must be multiples of 32")


def rounded_model(model):
    """The model exactly as it is stored on disk (float32 parameters)."""
    return model_from_tensors(decode_checkpoint(checkpoint_bytes(model)))


def log_header(cfg):
    return (f"# lambda_ce={cfg.lambda_ce} lambda_dice={cfg.lambda_dice} lambda_cls={cfg.lambda_cls} "
            f"lr={cfg.lr} weight_decay={cfg.weight_decay} epochs={cfg.epochs} batch_size={cfg.batch_size} "
            f"seed={cfg.seed} enhancement={format_enhancement(cfg.enhancement)}\n")


def format_log(cfg, rows):
    buf = io.StringIO()
    buf.write(log_header(cfg))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for r in rows:
        writer.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def train(cfg, train_ds, val_ds, out_dir=None):
    """Train from scratch; returns (model, log rows).

    With ``out_dir`` the checkpoint (``checkpoint.cmck``) and the epoch log
    (``train_log.csv``) are rewritten after each epoch. On a non-finite loss
    training stops with :class:`TrainingDiverged` and the last good files stay.
    """
    _check_data(cfg, train_ds, "training data")
    _check_data(cfg, val_ds, "validation data")
    model = CMFormerMini(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(model.params, cfg.lr, cfg.weight_decay)
    weights = cfg.loss_weights()
    gts = [segments_from_labels(lab, cfg.n_classes) for lab in train_ds.labels]
    images = train_ds.images.astype(np.float64)
    n = len(train_ds)
    rows = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            preds = model(images[idx])
            lb = total_loss(preds, [gts[i] for i in idx], weights)
            vals = lb.values()
            if not np.isfinite(vals["total"]):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {n_batches}")
            opt.zero_grad()
            lb.total.backward()
            _clip(model.params, cfg.grad_clip)
            opt.step()
            sums += [vals["total"], vals["ce"], vals["dice"], vals["cls"]]
            n_batches += 1
        stored = checkpoint_bytes(model)
        val = evaluate_model(model_from_tensors(decode_checkpoint(stored)), val_ds)
        mean = sums / n_batches
        row = {"epoch": epoch, "loss": mean[0], "ce": mean[1], "dice": mean[2], "cls": mean[3],
               "val_miou": val.miou if val.miou is not None else float("nan")}
        rows.append(row)
        log.info("epoch %d loss %.4f val mIoU %.4f", epoch, row["loss"], row["val_miou"])
        if out_dir:
            with open(os.path.join(out_dir, "checkpoint.cmck"), "wb") as fh:
                fh.write(stored)
            with open(os.path.join(out_dir, "train_log.csv"), "w", encoding="utf-8") as fh:
                fh.write(format_log(cfg, rows))
    model.checkpoint_id = checkpoint_id(checkpoint_bytes(model))
    return model, rows
