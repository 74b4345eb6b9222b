"""Procedural street-like scenes rendered under several visual styles.

A scene seed fixes the layout (what is where); a domain style fixes the
appearance (lighting, weather, colour cast, sensor noise). Labels depend on the
layout only, so the same seed gives the same label map in every domain.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

CLASSES = ("sky", "terrain", "road", "vehicle", "pedestrian", "sign")
N_CLASSES = len(CLASSES)
BAND_CLASSES = (0, 1, 2)
FOREGROUND_CLASSES = (3, 4, 5)
IGNORE = 255

BASE_COLORS = np.array([
    [0.55, 0.70, 0.90],  # sky
    [0.35, 0.55, 0.25],  # terrain
    [0.42, 0.42, 0.44],  # road
    [0.78, 0.18, 0.15],  # vehicle
    [0.92, 0.74, 0.32],  # pedestrian
    [0.20, 0.32, 0.80],  # sign
])
FOG_GRAY = 0.7


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 6
    texture: float = 0.03


@dataclass
class SceneSpec:
    seed: int
    layout: list  # (class_id, shape, params, shade); later entries overwrite earlier ones
    canvas: tuple


# ---------------------------------------------------------------------------
# content


def _fg_primitive(rng, cls, h, w, horizon, road_top):
    if cls == 3:  # vehicle: box resting on the road
        bw = rng.uniform(0.18, 0.32) * w
        bh = rng.uniform(0.12, 0.20) * h
        y1 = rng.uniform(road_top + bh * 0.5, h)
        x0 = rng.uniform(0, w - bw)
        return "rect", (x0, y1 - bh, x0 + bw, y1)
    if cls == 4:  # pedestrian: upright bar standing below the horizon
        bw = rng.uniform(0.10, 0.16) * w
        bh = rng.uniform(0.25, 0.40) * h
        y1 = rng.uniform(horizon + bh * 0.5, h)
        x0 = rng.uniform(0, w - bw)
        return "bar", (x0, y1 - bh, x0 + bw, y1)
    r = rng.uniform(0.07, 0.12) * w  # sign: disc above the horizon
    cy = rng.uniform(r, max(horizon, r + 1))
    cx = rng.uniform(r, w - r)
    return "circle", (cx, cy, r)


def gen_scene(seed, cfg=None):
    """Deterministic layout and its label map (uint8, values in [0, K))."""
    cfg = cfg or SceneConfig()
    h, w = cfg.height, cfg.width
    if h % 32 or w % 32:
        raise ValueError(f"canvas must be a multiple of 32, got {h}x{w}")
    rng = np.random.default_rng([int(seed), 0x5CE4E])
    horizon = rng.uniform(0.28, 0.45) * h
    road_top = rng.uniform(max(horizon + 0.1 * h, 0.55 * h), 0.72 * h)
    road_w = rng.uniform(0.55, 0.9) * w
    road_x0 = rng.uniform(0, w - road_w)
    layout = [
        (0, "rect", (0.0, 0.0, float(w), float(h)), rng.uniform(-0.05, 0.05)),
        (1, "rect", (0.0, horizon, float(w), float(h)), rng.uniform(-0.05, 0.05)),
        (2, "rect", (road_x0, road_top, road_x0 + road_w, float(h)), rng.uniform(-0.05, 0.05)),
    ]
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(n_obj):
        cls = int(rng.choice(FOREGROUND_CLASSES))
        shape, params = _fg_primitive(rng, cls, h, w, horizon, road_top)
        layout.append((cls, shape, tuple(float(p) for p in params), rng.uniform(-0.06, 0.06)))
    spec = SceneSpec(int(seed), layout, (h, w))
    return spec, render_labels(spec)


def _coverage(shape, params, yy, xx):
    if shape == "circle":
        cx, cy, r = params
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    x0, y0, x1, y1 = params
    return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return yy + 0.5, xx + 0.5


def render_labels(spec):
    h, w = spec.canvas
    yy, xx = _grid(h, w)
    labels = np.zeros((h, w), dtype=np.uint8)
    for cls, shape, params, _ in spec.layout:
        labels[_coverage(shape, params, yy, xx)] = cls
    return labels


def render_base(spec, texture=0.03):
    """Neutral-style rendering: per-class colour, per-primitive shade, fixed per-scene texture."""
    h, w = spec.canvas
    yy, xx = _grid(h, w)
    img = np.zeros((h, w, 3))
    for cls, shape, params, shade in spec.layout:
        m = _coverage(shape, params, yy, xx)
        img[m] = BASE_COLORS[cls] + shade
    # sky brightens toward the horizon
    sky = render_labels(spec) == 0
    img[sky] += (0.12 * yy / h)[sky][:, None]
    rng = np.random.default_rng([spec.seed, 0x7E47])
    img += texture * rng.standard_normal((h, w, 1))
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# style


@dataclass(frozen=True)
class DomainStyle:
    hue_shift: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    fog_alpha: float = 0.0
    illum_gradient: float = 0.0

    def __post_init__(self):
        checks = {
            "hue_shift": (-np.pi, np.pi),
            "brightness": (-0.3, 0.3),
            "contrast": (0.6, 1.5),
            "noise_sigma": (0.0, 0.1),
            "fog_alpha": (0.0, 0.6),
            "illum_gradient": (-0.3, 0.3),
        }
        for name, (lo, hi) in checks.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")


NEUTRAL = DomainStyle()
_RANGES = {
    "brightness": (-0.3, 0.3),
    "contrast": (0.6, 1.5),
    "noise_sigma": (0.0, 0.1),
    "fog_alpha": (0.0, 0.6),
    "illum_gradient": (-0.3, 0.3),
    "hue_shift": (-np.pi, np.pi),
}

DOMAINS = {
    "clear": DomainStyle(noise_sigma=0.01),
    "dusk": DomainStyle(hue_shift=0.25, brightness=-0.2, contrast=0.75, noise_sigma=0.02, illum_gradient=0.25),
    "fog": DomainStyle(brightness=0.05, contrast=0.8, noise_sigma=0.01, fog_alpha=0.5),
    "noiseCam": DomainStyle(contrast=1.3, noise_sigma=0.08, illum_gradient=-0.2),
    "coolHue": DomainStyle(hue_shift=-0.9, brightness=0.05, contrast=1.1, noise_sigma=0.01, fog_alpha=0.1,
                           illum_gradient=0.1),
}


def jittered(style, rng, amount):
    """Scale each parameter's offset from neutral by (1 + amount * u), u ~ U[-1, 1]."""
    if amount == 0:
        return style
    neutral = asdict(NEUTRAL)
    out = {}
    for name, value in asdict(style).items():
        v = neutral[name] + (value - neutral[name]) * (1.0 + amount * rng.uniform(-1, 1))
        lo, hi = _RANGES[name]
        out[name] = float(np.clip(v, lo, hi))
    return replace(style, **out)


def hue_rotation(theta):
    """RGB rotation by ``theta`` about the gray axis (Rodrigues)."""
    k = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]]) / np.sqrt(3.0)
    return np.cos(theta) * np.eye(3) + (1 - np.cos(theta)) / 3.0 * np.ones((3, 3)) + np.sin(theta) * k


def style_image(base, style, rng):
    h, w, _ = base.shape
    img = base.astype(np.float64)
    if style.illum_gradient:
        gain = 1.0 + style.illum_gradient * (2.0 * np.arange(w) / max(w - 1, 1) - 1.0)
        img = img * gain[None, :, None]
    if style.contrast != 1.0:
        img = (img - 0.5) * style.contrast + 0.5
    if style.brightness:
        img = img + style.brightness
    if style.hue_shift:
        img = img @ hue_rotation(style.hue_shift).T
    if style.fog_alpha:
        img = (1.0 - style.fog_alpha) * img + style.fog_alpha * FOG_GRAY
    if style.noise_sigma:
        img = img + rng.normal(0.0, style.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def apply_style(scene, style, jitter_seed, jitter=0.0, texture=0.03):
    """Render ``scene`` under ``style``; returns float32 (H, W, 3) in [0, 1].

    Order: illumination gradient, contrast, brightness, hue rotation, fog,
    noise, clip. ``jitter_seed`` drives the noise and the optional per-sample
    parameter jitter.
    """
    rng = np.random.default_rng([int(jitter_seed), 0x57E1])
    style = jittered(style, rng, jitter)
    return style_image(render_base(scene, texture), style, rng).astype(np.float32)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # float32 (n, H, W, 3)
    labels: np.ndarray  # uint8 (n, H, W)
    n_classes: int = N_CLASSES
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i], self.labels[i]


def domain_jitter_seed(scene_seed, domain):
    return zlib.crc32(f"{domain}:{scene_seed}".encode())


def generate_domain(domain, scene_seeds, cfg=None, jitter=0.05):
    """Render the scenes ``scene_seeds`` in the named domain preset (or a DomainStyle)."""
    cfg = cfg or SceneConfig()
    style = DOMAINS[domain] if isinstance(domain, str) else domain
    name = domain if isinstance(domain, str) else "custom"
    images, labels = [], []
    for s in scene_seeds:
        spec, lab = gen_scene(s, cfg)
        images.append(apply_style(spec, style, domain_jitter_seed(s, name), jitter, cfg.texture))
        labels.append(lab)
    return Dataset(np.stack(images), np.stack(labels), N_CLASSES, {"domain": name})


# "CMSB" file: magic, u32 version, count, H, W, channels, K; per sample f32 image then u8 labels

DS_MAGIC = b"CMSB"
DS_VERSION = 1
_HEADER = struct.Struct("<4s6I")


class DatasetError(ValueError):
    pass


class DatasetMagicError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


def encode_dataset(ds):
    images = np.asarray(ds.images, dtype="<f4")
    labels = np.asarray(ds.labels, dtype=np.uint8)
    n, h, w, c = images.shape
    if labels.shape != (n, h, w) or c != 3:
        raise DatasetError(f"inconsistent sample shapes {images.shape} / {labels.shape}")
    parts = [_HEADER.pack(DS_MAGIC, DS_VERSION, n, h, w, c, ds.n_classes)]
    for i in range(n):
        parts.append(np.ascontiguousarray(images[i]).tobytes())
        parts.append(np.ascontiguousarray(labels[i]).tobytes())
    return b"".join(parts)


def decode_dataset(buf):
    if len(buf) < _HEADER.size:
        if buf[:4] and DS_MAGIC[:len(buf[:4])] != buf[:4]:
            raise DatasetMagicError(f"bad dataset magic {buf[:4]!r}")
        raise DatasetTruncatedError(f"dataset header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, version, n, h, w, c, k = _HEADER.unpack_from(buf)
    if magic != DS_MAGIC:
        raise DatasetMagicError(f"bad dataset magic {magic!r}")
    if version != DS_VERSION:
        raise DatasetVersionError(f"unsupported dataset version {version}")
    if c != 3:
        raise DatasetError(f"expected 3 channels, got {c}")
    img_bytes, lab_bytes = h * w * c * 4, h * w
    expected = _HEADER.size + n * (img_bytes + lab_bytes)
    if len(buf) < expected:
        raise DatasetTruncatedError(f"dataset truncated: {len(buf)} bytes, header implies {expected}")
    if len(buf) > expected:
        raise DatasetError(f"{len(buf) - expected} trailing bytes after {n} samples")
    images = np.empty((n, h, w, c), dtype=np.float32)
    labels = np.empty((n, h, w), dtype=np.uint8)
    pos = _HEADER.size
    for i in range(n):
        images[i] = np.frombuffer(buf, "<f4", h * w * c, pos).reshape(h, w, c)
        pos += img_bytes
        labels[i] = np.frombuffer(buf, np.uint8, h * w, pos).reshape(h, w)
        pos += lab_bytes
    bad = (labels >= k) & (labels != IGNORE)
    if bad.any():
        raise DatasetError(f"label values >= K={k} found")
    return Dataset(images, labels, k)


def write_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def read_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
