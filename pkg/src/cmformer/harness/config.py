"""Run configuration and the ``key = value`` config file format."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from ..objective import LossWeights
from ..segmodel import DecoderConfig, ModelConfig, RESOLUTIONS


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # optimisation
    lr: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 30
    batch_size: int = 8
    grad_clip: float = 0.0
    seed: int = 0
    # model
    enhancement: dict = field(default_factory=lambda: {32: True, 16: True, 8: True})
    n_queries: int = 20
    width: int = 32
    n_classes: int = 6
    n_heads: int = 1
    share_query_proj: bool = False
    # loss
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    lambda_cls: float = 2.0
    no_object_weight: float = 0.1
    dice_eps: float = 1.0
    # data / protocol
    image_size: int = 64
    source_domain: str = "clear"
    target_domains: tuple = ("dusk", "fog", "noiseCam", "coolHue")
    train_scenes: int = 200
    val_scenes: int = 50
    data_seed: int = 0
    style_jitter: float = 0.05
    ablation_seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        self.enhancement = {int(k): bool(v) for k, v in self.enhancement.items()}
        if set(self.enhancement) != set(RESOLUTIONS):
            raise ConfigError(f"enhancement keys must be exactly {RESOLUTIONS}")
        for name in ("lr", "epochs", "batch_size", "n_queries", "width", "n_classes", "image_size",
                     "train_scenes", "val_scenes"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.image_size % 32:
            raise ConfigError(f"image_size must be a multiple of 32, got {self.image_size}")

    def model_config(self):
        return ModelConfig(
            n_classes=self.n_classes,
            width=self.width,
            n_queries=self.n_queries,
            n_heads=self.n_heads,
            share_query_proj=self.share_query_proj,
            decoder=DecoderConfig(enhancement=dict(self.enhancement)),
        )

    def loss_weights(self):
        return LossWeights(self.lambda_ce, self.lambda_dice, self.lambda_cls, self.no_object_weight, self.dice_eps)


def format_enhancement(enh):
    on = [str(r) for r in RESOLUTIONS if enh[r]]
    return ",".join(on) if on else "none"


def parse_enhancement(text):
    text = text.strip().lower()
    on = set() if text in ("", "none") else {int(t) for t in text.replace(" ", "").split(",")}
    if not on <= set(RESOLUTIONS):
        raise ConfigError(f"enhancement resolutions must be among {RESOLUTIONS}, got {sorted(on)}")
    return {r: r in on for r in RESOLUTIONS}


def _coerce(name, typ, raw):
    if name == "enhancement":
        return parse_enhancement(raw)
    if name in ("target_domains",):
        return tuple(t.strip() for t in raw.split(",") if t.strip())
    if name == "ablation_seeds":
        return tuple(int(t) for t in raw.split(",") if t.strip())
    if typ in (bool, "bool"):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    try:
        return {"int": int, "float": float, "str": str}.get(typ, typ)(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` starts a comment) into a dict of typed overrides."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, types[key], raw)
    return out


def load_config(path=None, seed=None, env=None):
    """Config from file, then ``CMA_SEED`` from the environment, then an explicit seed (highest)."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values = parse_config_text(fh.read())
    env = os.environ if env is None else env
    if env.get("CMA_SEED", "").strip():
        values["seed"] = int(env["CMA_SEED"])
    if seed is not None:
        values["seed"] = int(seed)
    return TrainConfig(**values)


def dump_config(cfg):
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "enhancement":
            v = format_enhancement(v)
        elif isinstance(v, tuple):
            v = ",".join(str(t) for t in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
