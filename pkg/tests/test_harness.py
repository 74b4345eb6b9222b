import csv

import numpy as np
import pytest

from cmformer import synthbench as sb
from cmformer.harness import ablate as ab
from cmformer.harness import cli
from cmformer.harness.config import (
    ConfigError,
    TrainConfig,
    dump_config,
    load_config,
    parse_config_text,
    parse_enhancement,
)
from cmformer.harness.metrics import confusion_and_miou, confusion_matrix
from cmformer.harness.train import AdamW, train
from cmformer.ndtensor import Tensor

from . import oracles as O


# metrics

def test_miou_hand_example():
    rep = confusion_and_miou(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), 2)
    assert rep.per_class_iou == pytest.approx([1 / 2, 2 / 3], abs=1e-12)
    assert rep.miou == pytest.approx(7 / 12, abs=1e-12)


def test_perfect_prediction_and_absent_classes():
    lab = np.array([[0, 2], [2, 2]])
    rep = confusion_and_miou(lab, lab, 4)
    assert rep.miou == 1.0
    assert rep.per_class_iou[1] is None and rep.per_class_iou[3] is None


def test_all_ignore_gives_absent_miou():
    rep = confusion_and_miou(np.zeros((2, 2)), np.full((2, 2), 255), 3)
    assert rep.miou is None
    assert rep.per_class_iou == [None, None, None]


def test_out_of_range_label_raises():
    with pytest.raises(ValueError):
        confusion_matrix(np.array([0, 7]), np.array([0, 1]), 3)


@pytest.mark.parametrize("seed", range(3))
def test_miou_matches_pixel_loop(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, (6, 6))
    gt[0, :3] = 255
    pred = rng.integers(0, 4, (6, 6))
    assert confusion_and_miou(pred, gt, 4).miou == pytest.approx(O.miou_loop(pred, gt, 4), abs=1e-12)


# config

def test_config_parsing_and_validation():
    vals = parse_config_text("lr = 0.001  # faster\nenhancement = 32,8\n\ntarget_domains = fog, dusk\n")
    assert vals["lr"] == 1e-3
    assert vals["enhancement"] == {32: True, 16: False, 8: True}
    assert vals["target_domains"] == ("fog", "dusk")
    with pytest.raises(ConfigError):
        parse_config_text("learning_rate = 1")
    with pytest.raises(ConfigError):
        parse_enhancement("64")
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(enhancement={32: True})


def test_seed_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 1\n")
    assert load_config(path, env={}).seed == 1
    assert load_config(path, env={"CMA_SEED": "2"}).seed == 2
    assert load_config(path, seed=3, env={"CMA_SEED": "2"}).seed == 3


def test_dump_round_trips():
    cfg = TrainConfig(lr=3e-4, enhancement={32: False, 16: True, 8: False}, ablation_seeds=(4, 5))
    assert TrainConfig(**parse_config_text(dump_config(cfg))) == cfg


def test_paper_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.lambda_ce, cfg.lambda_dice, cfg.lambda_cls) == (1e-4, 0.05, 5.0, 5.0, 2.0)


# optimiser

def test_adamw_first_step_oracle():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["w"].grad = np.array([0.5, -0.1])
    opt = AdamW(p, lr=0.1, weight_decay=0.01)
    opt.step()
    # first Adam step moves by lr * sign(g) (up to eps), decay acts on the old weights
    expected = np.array([1.0, -2.0]) - 0.1 * (np.sign([0.5, -0.1]) * (1 - 1e-7) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p["w"].data, expected, atol=1e-7)


# training, evaluation and CLI on a tiny problem

TINY = "lr = 0.001\nepochs = 2\nbatch_size = 4\nwidth = 16\nn_queries = 8\ntrain_scenes = 8\nval_scenes = 4\n"


@pytest.fixture(scope="module")
def tiny_data():
    return sb.generate_domain("clear", range(8)), sb.generate_domain("clear", range(100, 104))


def test_train_is_deterministic(tmp_path, tiny_data):
    cfg = TrainConfig(**parse_config_text(TINY))
    train(cfg, *tiny_data, out_dir=tmp_path / "a")
    train(cfg, *tiny_data, out_dir=tmp_path / "b")
    for name in ("train_log.csv", "checkpoint.cmck"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    log_text = (tmp_path / "a" / "train_log.csv").read_text()
    assert log_text.startswith("# lambda_ce=5.0 lambda_dice=5.0 lambda_cls=2.0 lr=0.001")
    assert log_text.splitlines()[1] == "epoch,loss,ce,dice,cls,val_miou"


def test_train_rejects_wrong_class_count(tiny_data):
    cfg = TrainConfig(**parse_config_text(TINY + "n_classes = 4\n"))
    with pytest.raises(ConfigError):
        train(cfg, *tiny_data)


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    data, run = tmp_path / "data", tmp_path / "run"
    assert cli.main(["gen-data", "--out", str(data), "--domains", "clear,fog", "--scenes", "8", "--seed", "0",
                     "--val-scenes", "4"]) == 0
    assert sorted(p.name for p in data.iterdir()) == ["clear_train.cmsb", "clear_val.cmsb",
                                                       "fog_train.cmsb", "fog_val.cmsb"]
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run), "--seed", "5"]) == 0
    assert "seed = 5" in (run / "config.txt").read_text()
    report = tmp_path / "report.csv"
    for _ in range(2):
        assert cli.main(["eval", "--ckpt", str(run / "checkpoint.cmck"), "--data", str(data / "fog_val.cmsb"),
                         "--domain", "fog", "--report", str(report), "--seed", "5"]) == 0
    rows = list(csv.reader(report.open(encoding="utf-8")))
    assert rows[0][0] == "domain" and rows[0][-3:] == ["miou", "checkpoint", "seed"]
    assert len(rows) == 3 and rows[1] == rows[2]
    # typed failures become a clean exit code
    (tmp_path / "bad.cmck").write_bytes(b"nope")
    assert cli.main(["eval", "--ckpt", str(tmp_path / "bad.cmck"), "--data", str(data / "fog_val.cmsb"),
                     "--domain", "fog"]) == 2
    assert cli.main(["gen-data", "--out", str(data), "--domains", "mars", "--scenes", "1"]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_env_seed(tmp_path, monkeypatch):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY.replace("epochs = 2", "epochs = 1"))
    data = tmp_path / "data"
    cli.main(["gen-data", "--out", str(data), "--domains", "clear", "--scenes", "4", "--val-scenes", "2"])
    monkeypatch.setenv("CMA_SEED", "9")
    cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "r")])
    assert "seed = 9" in (tmp_path / "r" / "config.txt").read_text()


def test_cli_gradcheck_subset(capsys, monkeypatch):
    from cmformer.harness import gradcheck as gc

    monkeypatch.setattr(gc, "REQUIRED_OPS", ("matmul",))
    monkeypatch.setattr(gc, "EXTRA_OPS", ())
    monkeypatch.setattr(gc, "COMPOSITES", ("dice_loss",))
    assert cli.main(["gradcheck", "--seeds", "2"]) == 0
    assert capsys.readouterr().out.strip().endswith("all passed")


# ablation table

def test_ablation_table_shape_and_stats(tmp_path):
    domains = ["dusk", "fog", "noiseCam", "coolHue"]
    results = []
    for i, setting in enumerate(ab.ABLATION_SETTINGS):
        name = ",".join(map(str, setting)) or "none"
        for seed in range(3):
            results.append({"enhancement": name, "seed": seed, "checkpoint": "x", "in_domain": 0.5,
                            "unseen": {d: 0.1 * i + 0.01 * seed for d in domains}})
    table = ab.ablation_table(results, domains)
    assert [r["config"] for r in table] == ["none", "32", "32,16", "32,16,8"]
    assert table[3]["fog"][0] == pytest.approx(0.31)
    assert table[3]["fog"][1] == pytest.approx(0.01)
    path = tmp_path / "ablation.csv"
    ab.write_table(path, table, domains)
    rows = list(csv.reader(path.open(encoding="utf-8")))
    assert rows[0] == ["config", *domains, "unseen_mean"]
    assert len(rows) == 5 and rows[4][2] == "0.3100±0.0100"


def test_ablation_refuses_source_among_targets():
    with pytest.raises(ConfigError):
        ab.build_data(TrainConfig(target_domains=("clear", "fog")))
