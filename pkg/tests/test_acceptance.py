"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Criteria 8-10 train the desk-scale model (configs/desk.cfg) and take the
better part of an hour on one CPU core; the 12 ablation runs are shared.
"""
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cmformer import objective as ob
from cmformer import pixelnet
from cmformer import segmodel as sm
from cmformer import synthbench as sb
from cmformer.attention import mask_to_bias, masked_attention, scaled_self_attention, sine_position_encoding
from cmformer.harness import ablate as ab
from cmformer.harness import gradcheck as gc
from cmformer.harness.config import load_config
from cmformer.harness.metrics import confusion_and_miou
from cmformer.harness.train import train
from cmformer.ndtensor import Tensor

from . import oracles as O
from .test_attention import _params as attention_params
from .test_cma import _instance, _random_layer, _run

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"


def test_01_gradient_suite(criterion):
    t0 = time.perf_counter()
    results = gc.run_suite(seeds=gc.SEEDS)
    seconds = time.perf_counter() - t0
    names = {r.name for r in results}
    assert set(gc.REQUIRED_OPS) <= names and {"cma_layer", "dice_loss", "bce_mask_loss", "cls_loss"} <= names
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.ok for r in results) and seconds <= 60
    criterion(1, ok, f"{len(results)} checks x 5 seeds, worst {worst.name} {worst.max_rel_error:.2e}, {seconds:.1f}s")
    assert ok, gc.format_report(results)


def test_02_attention_oracles(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng([2, seed])
        n, side, d = int(rng.integers(1, 9)), int(rng.choice([2, 4, 8])), int(rng.choice([4, 8, 16]))
        x, f = rng.standard_normal((n, d)), rng.standard_normal((side * side, d))
        qp, kp = rng.standard_normal((n, d)), rng.standard_normal((side * side, d))
        bias = mask_to_bias(rng.standard_normal((n, 2 * side, 2 * side)), (side, side))
        p, ap = attention_params(rng, d)
        got = masked_attention(Tensor(x), Tensor(f), bias, ap, q_pos=qp, k_pos=kp).data
        worst = max(worst, np.abs(got - O.masked_attention_loop(x, f, bias.values, p, qp, kp)).max())
        got = scaled_self_attention(Tensor(x), ap).data
        worst = max(worst, np.abs(got - O.self_attention_loop(x, p)).max())
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-10 and seconds <= 10
    criterion(2, ok, f"max abs diff {worst:.1e}, {seconds:.2f}s")
    assert ok


def test_03_layer_oracle(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng([3, seed])
        inst, d = _instance(rng)
        raw, lp = _random_layer(rng, d)
        out = _run(inst, lp)
        ref, ref_lo = O.cma_steps(inst["x_prev"], inst["x_prev_d"], inst["f"], inst["masks"], raw,
                                  q_pos=inst["q_pos"], pos_hi=inst["pos_hi"], pos_lo=inst["pos_lo"])
        worst = max(worst, np.abs(out.x_final.data - ref).max(), np.abs(out.x_lo.data - ref_lo).max())
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-9 and seconds <= 10
    criterion(3, ok, f"max abs diff {worst:.1e}, {seconds:.2f}s")
    assert ok


def test_04_plain_decoder_path(criterion):
    cfg = sm.ModelConfig(decoder=sm.DecoderConfig(enhancement={32: False, 16: False, 8: False}))
    worst = 0.0
    for seed in range(3):
        model = sm.CMFormerMini(cfg, seed=seed)
        img = np.random.default_rng(seed).uniform(size=(64, 64, 3))
        preds = model(img)
        decoded, mf = pixelnet.decode_multiscale(pixelnet.encode(img, model.params), model.params)
        levels = {s: decoded[s].data[0] for s in (8, 16, 32)}
        pos = {(64 // s, 64 // s): sine_position_encoding(64 // s, 64 // s, cfg.width) for s in (8, 16, 32)}
        p = {k: v.data for k, v in model.params.items()}
        ref = O.plain_decoder(levels, mf.data[0], p, cfg.decoder.resolution_schedule, p["query.pos"], pos)
        for got, (cls, masks) in zip(preds, ref):
            worst = max(worst, np.abs(got.class_logits.data[0] - cls).max(), np.abs(got.mask_logits.data[0] - masks).max())
    ok = worst <= 1e-12
    criterion(4, ok, f"max abs diff vs plain decoder {worst:.1e}")
    assert ok


def test_05_hungarian(criterion):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    agree = 0
    for _ in range(200):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, n + 1))
        cost = rng.standard_normal((n, m))
        pairs = ob.hungarian_match(cost)
        agree += sum(cost[q, j] for q, j in pairs) == pytest.approx(O.hungarian_brute(cost), abs=1e-12)
    seconds = time.perf_counter() - t0
    ok = agree == 200 and seconds <= 5
    criterion(5, ok, f"{agree}/200 optimal, {seconds:.2f}s")
    assert ok


def test_06_closed_forms(criterion):
    one = Tensor(1.0)
    values = {
        "dice 2/7": (float(ob.dice_loss(Tensor(np.zeros(4)), np.ones(4)).data), 2 / 7),
        "bce ln2": (float(ob.bce_mask_loss(Tensor(np.zeros(8)), np.arange(8) % 2 == 0).data), np.log(2)),
        "miou 7/12": (confusion_and_miou(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), 2).miou, 7 / 12),
        "total 12": (float(ob.weighted_total(one, one, one).data), 12.0),
    }
    errs = {k: abs(a - b) for k, (a, b) in values.items()}
    ok = max(errs.values()) <= 1e-9
    criterion(6, ok, ", ".join(f"{k} err {v:.0e}" for k, v in errs.items()))
    assert ok


def test_07_content_style_separation(criterion):
    seeds = range(100)
    labels = {d: sb.generate_domain(d, seeds).labels for d in sb.DOMAINS}
    same = all(labels[d].tobytes() == labels["clear"].tobytes() for d in sb.DOMAINS)
    criterion(7, same, f"100 seeds x {len(sb.DOMAINS)} domains, labels identical: {same}")
    assert same


@pytest.fixture(scope="session")
def ablation(tmp_path_factory):
    cfg = load_config(DESK, env={})
    out = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    table, results = ab.ablate(cfg, out)
    return cfg, out, table, results, time.perf_counter() - t0


def test_08_trainability(ablation, criterion):
    cfg, _, _, results, _ = ablation
    full = [r for r in results if r["enhancement"] == "32,16,8"]
    scores = [r["in_domain"] for r in full]
    seconds = sum(r["seconds"] for r in full)
    ok = len(full) == 3 and all(s >= 0.60 for s in scores) and seconds <= 30 * 60
    criterion(8, ok, f"in-domain mIoU {', '.join(f'{s:.3f}' for s in scores)}; {seconds / 60:.1f} min")
    assert ok


def test_09_enhancement_helps_unseen_domains(ablation, criterion):
    cfg, out, table, results, seconds = ablation
    def unseen(name):
        return np.mean([np.mean(list(r["unseen"].values())) for r in results if r["enhancement"] == name])

    delta = unseen("32,16,8") - unseen("none")
    rows = {r["config"]: r for r in table}
    csv_ok = (out / "ablation.csv").exists() and rows["32,16,8"]["unseen_mean"][0] >= rows["none"]["unseen_mean"][0]
    ok = delta > 0 and csv_ok and seconds <= 2.5 * 3600
    criterion(9, ok, f"unseen mIoU full {unseen('32,16,8'):.4f} vs none {unseen('none'):.4f} "
                     f"(delta {delta:+.4f}); 12 runs {seconds / 60:.1f} min")
    assert ok


def test_10_training_is_reproducible(ablation, criterion, tmp_path):
    cfg, out, _, _, _ = ablation
    rerun = replace(cfg, seed=cfg.ablation_seeds[0])
    data = ab.build_data(rerun)
    train(rerun, data["train"], data["val"], tmp_path)
    first = out / f"32-16-8_s{rerun.seed}"
    same = all((first / f).read_bytes() == (tmp_path / f).read_bytes() for f in ("train_log.csv", "checkpoint.cmck"))
    criterion(10, same, f"log and checkpoint byte-identical across two runs: {same}")
    assert same


def test_11_format_round_trips(criterion, tmp_path):
    ds = sb.generate_domain("fog", range(4))
    sb.write_dataset(ds, tmp_path / "d.cmsb")
    back = sb.read_dataset(tmp_path / "d.cmsb")
    ds_ok = back.images.tobytes() == ds.images.tobytes() and back.labels.tobytes() == ds.labels.tobytes()
    model = sm.CMFormerMini(seed=0)
    sm.save_checkpoint(model, tmp_path / "m.cmck")
    loaded, _ = sm.load_checkpoint(tmp_path / "m.cmck")
    ck_ok = sm.checkpoint_bytes(loaded) == (tmp_path / "m.cmck").read_bytes()

    typed = 0
    buf = sb.encode_dataset(ds)
    for bad, err in ((b"XXXX" + buf[4:], sb.DatasetMagicError),
                     (buf[:4] + b"\x07\0\0\0" + buf[8:], sb.DatasetVersionError),
                     (buf[:20], sb.DatasetTruncatedError)):
        with pytest.raises(err):
            sb.decode_dataset(bad)
        typed += 1
    raw = (tmp_path / "m.cmck").read_bytes()
    for bad, err in ((b"XXXX" + raw[4:], sm.CheckpointMagicError),
                     (raw[:4] + b"\x07\0\0\0" + raw[8:], sm.CheckpointVersionError),
                     (raw[:6], sm.CheckpointTruncatedError)):
        with pytest.raises(err):
            sm.decode_checkpoint(bad)
        typed += 1
    ok = ds_ok and ck_ok and typed == 6
    criterion(11, ok, f"CMSB round trip {ds_ok}, CMCK round trip {ck_ok}, {typed}/6 corruptions typed")
    assert ok
