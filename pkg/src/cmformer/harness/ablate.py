"""Content-enhancement ablation: train on the source domain, score every held-out style domain."""
from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .. import synthbench as sb
from ..segmodel import RESOLUTIONS
from .config import ConfigError, format_enhancement
from .evaluate import append_report, evaluate_model
from .train import rounded_model, train

log = logging.getLogger(__name__)

# rows of the ablation table, baseline first
ABLATION_SETTINGS = ((), (32,), (32, 16), (32, 16, 8))


def enhancement_of(setting):
    return {r: r in setting for r in RESOLUTIONS}


def scene_seeds(cfg):
    base = cfg.data_seed * 1_000_000
    return range(base, base + cfg.train_scenes), range(base + 500_000, base + 500_000 + cfg.val_scenes)


def build_data(cfg):
    """Source train/val plus each target domain rendered from the same validation scenes."""
    if cfg.source_domain in cfg.target_domains:
        raise ConfigError(f"source domain {cfg.source_domain!r} must not be among the unseen targets")
    scene_cfg = sb.SceneConfig(cfg.image_size, cfg.image_size)
    train_ids, val_ids = scene_seeds(cfg)
    data = {
        "train": sb.generate_domain(cfg.source_domain, train_ids, scene_cfg, cfg.style_jitter),
        "val": sb.generate_domain(cfg.source_domain, val_ids, scene_cfg, cfg.style_jitter),
    }
    for d in cfg.target_domains:
        data[d] = sb.generate_domain(d, val_ids, scene_cfg, cfg.style_jitter)
    return data


def run_one(cfg, data, out_dir=None):
    """Train one configuration; returns in-domain and per-target mIoU."""
    t0 = time.perf_counter()
    model, rows = train(cfg, data["train"], data["val"], out_dir)
    seconds = time.perf_counter() - t0
    result = {
        "enhancement": format_enhancement(cfg.enhancement),
        "seed": cfg.seed,
        "checkpoint": model.checkpoint_id,
        "in_domain": rows[-1]["val_miou"],
        "log": rows,
        "seconds": seconds,
        "unseen": {},
    }
    stored = rounded_model(model)
    for d in cfg.target_domains:
        rep = evaluate_model(stored, data[d], d, model.checkpoint_id)
        result["unseen"][d] = rep.miou
        if out_dir:
            append_report(os.path.join(out_dir, "eval.csv"), rep, cfg.seed)
    return result


def _job(args):
    cfg, out_dir = args
    return run_one(cfg, build_data(cfg), out_dir)


def ablation_table(results, domains):
    """Rows = settings (baseline first), columns = unseen domains; cells 'mean±sd' over seeds."""
    table = []
    for setting in ABLATION_SETTINGS:
        name = format_enhancement(enhancement_of(setting))
        runs = [r for r in results if r["enhancement"] == name]
        row = {"config": name}
        for d in domains:
            vals = np.array([r["unseen"][d] for r in runs], dtype=np.float64)
            row[d] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
        means = np.array([np.mean([r["unseen"][d] for d in domains]) for r in runs])
        row["unseen_mean"] = (float(means.mean()), float(means.std(ddof=1)) if len(means) > 1 else 0.0)
        table.append(row)
    return table


def write_table(path, table, domains):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", *domains, "unseen_mean"])
        for row in table:
            w.writerow([row["config"]] + [f"{row[c][0]:.4f}±{row[c][1]:.4f}" for c in (*domains, "unseen_mean")])


def write_runs(path, results, domains):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "seed", "checkpoint", "in_domain", *domains, "unseen_mean"])
        for r in results:
            unseen = [r["unseen"][d] for d in domains]
            w.writerow([r["enhancement"], r["seed"], r["checkpoint"], repr(r["in_domain"]),
                        *(repr(v) for v in unseen), repr(float(np.mean(unseen)))])


def ablate(cfg, out_dir=None, jobs=1, settings=ABLATION_SETTINGS):
    """Train every (setting, seed) pair and write ``ablation.csv`` and ``ablation_runs.csv``.

    Returns (table, per-run results).
    """
    jobs_list = []
    for setting in settings:
        for seed in cfg.ablation_seeds:
            run_cfg = replace(cfg, enhancement=enhancement_of(setting), seed=seed)
            run_dir = None
            if out_dir:
                run_dir = os.path.join(out_dir, f"{format_enhancement(run_cfg.enhancement).replace(',', '-')}_s{seed}")
            jobs_list.append((run_cfg, run_dir))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_job, jobs_list))
    else:
        data = build_data(cfg)
        results = []
        for run_cfg, run_dir in jobs_list:
            log.info("ablation run enhancement=%s seed=%d", format_enhancement(run_cfg.enhancement), run_cfg.seed)
            results.append(run_one(run_cfg, data, run_dir))
    domains = list(cfg.target_domains)
    table = ablation_table(results, domains) if settings == ABLATION_SETTINGS else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_runs(os.path.join(out_dir, "ablation_runs.csv"), results, domains)
        if table is not None:
            write_table(os.path.join(out_dir, "ablation.csv"), table, domains)
    return table, results
