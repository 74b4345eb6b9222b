"""Convolutional feature pyramid and upsample-and-sum pixel decoder."""
from __future__ import annotations

from dataclasses import dataclass

from . import ndtensor as nd
from .ndtensor import DimensionError, Tensor

STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    levels: dict  # stride -> Tensor (B, H/s, W/s, d)
    input_hw: tuple

    def __getitem__(self, stride):
        return self.levels[stride]


def param_shapes(d, stem_width=None):
    stem_width = stem_width or max(d // 2, 8)
    shapes = {
        "enc.stem.w": (3, 3, 3, stem_width),
        "enc.stem.b": (stem_width,),
        "enc.stem.gamma": (stem_width,),
        "enc.stem.beta": (stem_width,),
    }
    cin = stem_width
    for s in STRIDES:
        shapes[f"enc.s{s}.w"] = (3, 3, cin, d)
        shapes[f"enc.s{s}.b"] = (d,)
        shapes[f"enc.s{s}.gamma"] = (d,)
        shapes[f"enc.s{s}.beta"] = (d,)
        shapes[f"pix.lat{s}.w"] = (d, d)
        shapes[f"pix.lat{s}.b"] = (d,)
        cin = d
    shapes["pix.mask.w"] = (d, d)
    shapes["pix.mask.b"] = (d,)
    return shapes


def _block(x, params, name, stride):
    y = nd.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, pad=1)
    return nd.relu(nd.layernorm(y, params[f"{name}.gamma"], params[f"{name}.beta"]))


def _batched(image):
    if image.ndim == 3:
        return nd.reshape(image, (1,) + image.shape), True
    return image, False


def encode(image, params):
    """Stem plus four stride-2 conv blocks; returns levels at strides 4, 8, 16, 32.

    ``image`` is (H, W, 3) or (B, H, W, 3) with H, W multiples of 32. Levels
    always carry a batch axis.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    x, _ = _batched(image)
    h, w = x.shape[1:3]
    if h % 32 or w % 32 or x.shape[-1] != 3:
        raise DimensionError(f"input must be (H, W, 3) with H and W multiples of 32, got {image.shape}")
    x = _block(x, params, "enc.stem", 2)
    levels = {}
    for s in STRIDES:
        x = _block(x, params, f"enc.s{s}", 2)
        levels[s] = x
    return FeaturePyramid(levels, (h, w))


def decode_multiscale(p, params):
    """Top-down pass: lateral projection, nearest 2x upsample, sum.

    Returns the decoded maps at strides 32/16/8 (what the transformer decoder
    attends to) and the stride-4 mask features.
    """
    out = {}
    y = None
    for s in reversed(STRIDES):
        lat = nd.linear(p.levels[s], params[f"pix.lat{s}.w"], params[f"pix.lat{s}.b"])
        y = lat if y is None else nd.upsample_nearest(y, 2) + lat
        out[s] = y
    mask_features = nd.linear(y, params["pix.mask.w"], params["pix.mask.b"])
    return FeaturePyramid({s: out[s] for s in (8, 16, 32)}, p.input_hw), mask_features


def pixel_decode(p, params):
    """Mask features at 1/4 of the input resolution, (B, H/4, W/4, d)."""
    return decode_multiscale(p, params)[1]
