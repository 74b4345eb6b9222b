"""The mini mask-transformer segmenter: queries, 9-layer decoder, heads, inference, checkpoints."""
from __future__ import annotations

import hashlib
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from . import pixelnet
from .attention import sine_position_encoding
from .cma import cma_layer, layer_param_shapes, layer_params
from .ndtensor import DimensionError, Tensor

RESOLUTIONS = (32, 16, 8)
DEFAULT_SCHEDULE = (32, 16, 8) * 3


@dataclass
class DecoderConfig:
    n_layers: int = 9
    resolution_schedule: tuple = DEFAULT_SCHEDULE
    enhancement: dict = field(default_factory=lambda: {32: True, 16: True, 8: True})

    def __post_init__(self):
        self.resolution_schedule = tuple(int(r) for r in self.resolution_schedule)
        self.enhancement = {int(k): bool(v) for k, v in self.enhancement.items()}
        if len(self.resolution_schedule) != self.n_layers:
            raise ValueError(f"schedule length {len(self.resolution_schedule)} != n_layers {self.n_layers}")
        if not set(self.resolution_schedule) <= set(RESOLUTIONS):
            raise ValueError(f"schedule values must be in {RESOLUTIONS}")
        if set(self.enhancement) != set(RESOLUTIONS):
            raise ValueError(f"enhancement keys must be exactly {RESOLUTIONS}")

    def enhanced(self, layer):
        return self.enhancement[self.resolution_schedule[layer]]


@dataclass
class ModelConfig:
    n_classes: int = 6
    width: int = 32
    n_queries: int = 20
    n_heads: int = 1
    share_query_proj: bool = False
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.n_queries < self.n_classes:
            warnings.warn(f"{self.n_queries} queries for {self.n_classes} classes", stacklevel=2)
        if self.width % self.n_heads:
            raise ValueError("width must be divisible by n_heads")


@dataclass
class QuerySet:
    x0: Tensor
    q_pos: Tensor

    @property
    def n_queries(self):
        return self.x0.shape[0]


@dataclass
class LayerPrediction:
    class_logits: Tensor  # (..., N, K+1)
    mask_logits: Tensor  # (..., N, H/4, W/4)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg):
    d, k = cfg.width, cfg.n_classes
    shapes = pixelnet.param_shapes(d)
    shapes["query.feat"] = (cfg.n_queries, d)
    shapes["query.pos"] = (cfg.n_queries, d)
    for l in range(cfg.decoder.n_layers):
        shapes.update(layer_param_shapes(f"dec{l}", d, cfg.decoder.enhanced(l), cfg.share_query_proj))
    shapes["head.cls.w"] = (d, k + 1)
    shapes["head.cls.b"] = (k + 1,)
    for i in range(3):
        shapes[f"head.mlp{i}.w"] = (d, d)
        shapes[f"head.mlp{i}.b"] = (d,)
    return shapes


def _init_one(name, shape, seed):
    # one generator per parameter name, so toggling optional tensors leaves the rest untouched
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith("query."):
        return rng.normal(0.0, 1.0, shape)
    if leaf == "gamma":
        return np.ones(shape)
    if len(shape) == 4:
        fan_in = shape[0] * shape[1] * shape[2]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    if len(shape) == 2:
        a = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-a, a, shape)
    return np.zeros(shape)


def init_params(cfg, seed=0):
    return {name: Tensor(_init_one(name, shape, seed), requires_grad=True)
            for name, shape in param_shapes(cfg).items()}


# ---------------------------------------------------------------------------
# forward


def predict_heads(x, mask_features, params):
    """Class logits from an affine head; mask logits as <mlp(query), pixel feature>."""
    if x.shape[-1] != mask_features.shape[-1]:
        raise DimensionError(f"heads: query width {x.shape} vs mask features {mask_features.shape}")
    class_logits = nd.linear(x, params["head.cls.w"], params["head.cls.b"])
    m = x
    for i in range(3):
        m = nd.linear(m, params[f"head.mlp{i}.w"], params[f"head.mlp{i}.b"])
        if i < 2:
            m = nd.relu(m)
    *lead, h, w, d = mask_features.shape
    pix = nd.reshape(mask_features, (*lead, h * w, d))
    logits = nd.matmul(m, nd.transpose(pix))
    logits = nd.reshape(logits, (*logits.shape[:-1], h, w))
    return LayerPrediction(class_logits, logits)


def init_queries(params, mask_features):
    """Returns (x0, x0_d, mask_logits_0); both query streams start from the same embeddings."""
    x0 = params["query.feat"]
    return x0, x0, predict_heads(x0, mask_features, params).mask_logits


def decoder_forward(pyramid, mask_features, queries, cfg, params):
    """Runs the decoder; returns the initial prediction followed by one per layer."""
    dec = cfg.decoder if isinstance(cfg, ModelConfig) else cfg
    n_heads = cfg.n_heads if isinstance(cfg, ModelConfig) else 1
    d = mask_features.shape[-1]
    x0 = queries.x0
    lead = mask_features.shape[:-3]
    if lead and x0.ndim == 2:
        x0 = x0 + np.zeros(lead + x0.shape)  # one query set per image
    preds = [predict_heads(x0, mask_features, params)]
    x, x_d = x0, x0
    pos_cache = {}
    for l in range(dec.n_layers):
        f = pyramid.levels[dec.resolution_schedule[l]]
        h, w = f.shape[-3:-1]
        if (h, w) not in pos_cache:
            pos_cache[(h, w)] = sine_position_encoding(h, w, d)
            if h % 2 == 0 and w % 2 == 0:
                pos_cache[(h // 2, w // 2)] = sine_position_encoding(h // 2, w // 2, d)
        lp = layer_params(params, f"dec{l}", n_heads)
        out = cma_layer(
            x, x_d, f, preds[-1].mask_logits, lp,
            q_pos=queries.q_pos,
            pos_hi=pos_cache[(h, w)],
            pos_lo=pos_cache.get((h // 2, w // 2)),
        )
        x, x_d = out.x_final, out.x_lo
        preds.append(predict_heads(x, mask_features, params))
    return preds


def semantic_inference(pred, upsample=4):
    """Per-pixel argmax of sum_i p_i(c) * sigmoid(m_i); no-object is excluded. Returns uint8 labels."""
    cl = pred.class_logits.data if isinstance(pred.class_logits, Tensor) else np.asarray(pred.class_logits)
    ml = pred.mask_logits.data if isinstance(pred.mask_logits, Tensor) else np.asarray(pred.mask_logits)
    e = np.exp(cl - cl.max(axis=-1, keepdims=True))
    probs = (e / e.sum(axis=-1, keepdims=True))[..., :-1]
    masks = 1.0 / (1.0 + np.exp(-ml))
    score = np.einsum("...nc,...nhw->...chw", probs, masks)
    labels = np.argmax(score, axis=-3).astype(np.uint8)
    if upsample > 1:
        labels = np.repeat(np.repeat(labels, upsample, axis=-2), upsample, axis=-1)
    return labels


class CMFormerMini:
    def __init__(self, cfg=None, params=None, seed=0):
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)
        expected = param_shapes(self.cfg)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise DimensionError(f"parameter set mismatch; missing={missing[:4]} extra={extra[:4]}")
        for name, shape in expected.items():
            if self.params[name].shape != tuple(shape):
                raise DimensionError(f"parameter {name}: shape {self.params[name].shape} != {shape}")

    @property
    def n_params(self):
        return int(np.sum([p.data.size for p in self.params.values()]))

    def parameters(self):
        return list(self.params.values())

    def forward(self, images):
        pyramid = pixelnet.encode(images, self.params)
        decoded, mask_features = pixelnet.decode_multiscale(pyramid, self.params)
        queries = QuerySet(self.params["query.feat"], self.params["query.pos"])
        return decoder_forward(decoded, mask_features, queries, self.cfg, self.params)

    __call__ = forward

    def predict(self, images):
        with nd.no_grad():
            return semantic_inference(self.forward(images)[-1])


# ---------------------------------------------------------------------------
# checkpoint file: "CMCK", u32 version, u32 count, then per tensor
# u16 name length, utf-8 name, u8 rank, u32 dims[rank], f32 payload (all little-endian)

CKPT_MAGIC = b"CMCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _meta_tensors(cfg):
    dec = cfg.decoder
    meta = {
        "meta.n_classes": cfg.n_classes,
        "meta.width": cfg.width,
        "meta.n_queries": cfg.n_queries,
        "meta.n_heads": cfg.n_heads,
        "meta.share_query_proj": int(cfg.share_query_proj),
        "meta.schedule": list(dec.resolution_schedule),
    }
    for r in RESOLUTIONS:
        meta[f"meta.enh{r}"] = int(dec.enhancement[r])
    return {k: np.asarray(v, dtype=np.float32) for k, v in meta.items()}


def encode_checkpoint(tensors):
    """Serialize a name -> array mapping (stored as float32)."""
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_checkpoint(buf):
    """Inverse of :func:`encode_checkpoint`; returns name -> float32 array."""
    if len(buf) < 4:
        raise CheckpointTruncatedError("checkpoint shorter than its magic")
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {pos} (need {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor name is not utf-8: {exc}") from None
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return tensors


def checkpoint_bytes(model):
    tensors = dict(_meta_tensors(model.cfg))
    tensors.update(model.params)
    return encode_checkpoint(tensors)


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return checkpoint_id(data)


def checkpoint_id(data):
    return hashlib.sha256(data).hexdigest()[:12]


def model_from_tensors(tensors):
    try:
        sched = tuple(int(v) for v in tensors["meta.schedule"])
        cfg = ModelConfig(
            n_classes=int(tensors["meta.n_classes"]),
            width=int(tensors["meta.width"]),
            n_queries=int(tensors["meta.n_queries"]),
            n_heads=int(tensors["meta.n_heads"]),
            share_query_proj=bool(tensors["meta.share_query_proj"]),
            decoder=DecoderConfig(
                n_layers=len(sched),
                resolution_schedule=sched,
                enhancement={r: bool(tensors[f"meta.enh{r}"]) for r in RESOLUTIONS},
            ),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks model metadata {exc}") from None
    params = {k: Tensor(v.astype(np.float64), requires_grad=True) for k, v in tensors.items()
              if not k.startswith("meta.")}
    return CMFormerMini(cfg, params)


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return model_from_tensors(decode_checkpoint(data)), checkpoint_id(data)
