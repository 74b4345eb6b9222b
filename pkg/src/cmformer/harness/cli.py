"""Command line entry point: gen-data, train, eval, ablate, gradcheck."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .. import synthbench as sb
from ..segmodel import CheckpointError
from .config import ConfigError, dump_config, load_config


def _gen_data(args):
    domains = [d.strip() for d in args.domains.split(",") if d.strip()]
    unknown = [d for d in domains if d not in sb.DOMAINS]
    if unknown:
        raise ConfigError(f"unknown domains {unknown}; presets: {', '.join(sb.DOMAINS)}")
    os.makedirs(args.out, exist_ok=True)
    scene_cfg = sb.SceneConfig(args.size, args.size)
    val_n = args.val_scenes if args.val_scenes is not None else max(1, args.scenes // 4)
    train_ids = range(args.seed, args.seed + args.scenes)
    val_ids = range(args.seed + 500_000, args.seed + 500_000 + val_n)
    for d in domains:
        for split, ids in (("train", train_ids), ("val", val_ids)):
            path = os.path.join(args.out, f"{d}_{split}.cmsb")
            sb.write_dataset(sb.generate_domain(d, ids, scene_cfg, args.jitter), path)
            print(f"wrote {path} ({len(ids)} scenes)")


def _train(args):
    from .train import train

    cfg = load_config(args.config, seed=args.seed)
    tr = sb.read_dataset(os.path.join(args.data, f"{cfg.source_domain}_train.cmsb"))
    va = sb.read_dataset(os.path.join(args.data, f"{cfg.source_domain}_val.cmsb"))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    model, rows = train(cfg, tr, va, args.out)
    print(f"final in-domain mIoU {rows[-1]['val_miou']:.4f}; checkpoint {model.checkpoint_id}")


def _eval(args):
    from .evaluate import evaluate

    ds = sb.read_dataset(args.data)
    rep = evaluate(args.ckpt, ds, args.domain, args.report, seed=args.seed if args.seed is not None else "")
    miou = "absent" if rep.miou is None else f"{rep.miou:.4f}"
    print(f"{args.domain}: mIoU {miou} (checkpoint {rep.checkpoint})")


def _ablate(args):
    from .ablate import ablate

    cfg = load_config(args.config)
    table, _ = ablate(cfg, args.out, jobs=args.jobs)
    print(f"wrote {os.path.join(args.out, 'ablation.csv')}")
    for row in table:
        print(row["config"], "unseen mean %.4f±%.4f" % row["unseen_mean"])


def _gradcheck(args):
    from .gradcheck import format_report, run_suite

    results = run_suite(seeds=range(args.seeds))
    print(format_report(results))
    return 0 if all(r.ok for r in results) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="cmformer", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic benchmark to CMSB files")
    g.add_argument("--out", required=True)
    g.add_argument("--domains", default=",".join(sb.DOMAINS))
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-scenes", type=int, default=None)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--jitter", type=float, default=0.05)
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train on <source>_train.cmsb, validate on <source>_val.cmsb")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="score a checkpoint on one dataset file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--domain", required=True)
    e.add_argument("--report")
    e.add_argument("--seed", type=int, default=None)
    e.set_defaults(func=_eval)

    a = sub.add_parser("ablate", help="per-resolution content-enhancement ablation")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=5)
    c.set_defaults(func=_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args) or 0
    except (ConfigError, CheckpointError, sb.DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
