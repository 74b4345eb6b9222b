"""Content-enhanced mask attention layer.

A layer runs masked + self attention twice: once against the feature map and
once against its 2x average-pooled copy, each with its own query stream. The
two query results are concatenated and mapped back to width d by an affine
fusion, then pass through a shared feed-forward block.

With the low-resolution branch disabled the same code runs only the
high-resolution branch and the feed-forward block; that path is the plain
mask-transformer decoder layer used as the ablation baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .attention import (
    PROJECTIONS,
    AttentionParams,
    attention_param_shapes,
    mask_to_bias,
    masked_attention,
    scaled_self_attention,
)
from .ndtensor import DimensionError, NonFiniteError, Tensor


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor

    def __call__(self, x):
        return nd.layernorm(x, self.gamma, self.beta)


@dataclass
class BranchParams:
    cross: AttentionParams
    cross_norm: Norm
    self_attn: AttentionParams
    self_norm: Norm


@dataclass
class CmaLayerParams:
    hi: BranchParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ffn_norm: Norm
    lo: BranchParams | None = None
    fuse_w: Tensor | None = None
    fuse_b: Tensor | None = None

    @property
    def enhanced(self):
        return self.lo is not None


@dataclass
class CmaLayerOutput:
    x_final: Tensor
    x_lo: Tensor | None = None
    diagnostics: dict = field(default_factory=dict)


def _branch_shapes(prefix, d):
    shapes = {}
    shapes.update(attention_param_shapes(f"{prefix}.cross", d))
    shapes.update(attention_param_shapes(f"{prefix}.self", d))
    for norm in ("cross_norm", "self_norm"):
        shapes[f"{prefix}.{norm}.gamma"] = (d,)
        shapes[f"{prefix}.{norm}.beta"] = (d,)
    return shapes


def layer_param_shapes(prefix, d, enhanced, share_query_proj=False, ffn_mult=4):
    shapes = _branch_shapes(f"{prefix}.hi", d)
    shapes.update({
        f"{prefix}.ffn.w1": (d, ffn_mult * d),
        f"{prefix}.ffn.b1": (ffn_mult * d,),
        f"{prefix}.ffn.w2": (ffn_mult * d, d),
        f"{prefix}.ffn.b2": (d,),
        f"{prefix}.ffn_norm.gamma": (d,),
        f"{prefix}.ffn_norm.beta": (d,),
    })
    if enhanced:
        lo = _branch_shapes(f"{prefix}.lo", d)
        if share_query_proj:
            del lo[f"{prefix}.lo.cross.wq"], lo[f"{prefix}.lo.cross.bq"]
        shapes.update(lo)
        shapes[f"{prefix}.fuse.w"] = (2 * d, d)
        shapes[f"{prefix}.fuse.b"] = (d,)
    return shapes


def _branch(params, prefix, n_heads, share_from=None):
    cross_keys = {}
    for k in PROJECTIONS:
        name = f"{prefix}.cross.{k}"
        if name not in params and share_from is not None and k in ("wq", "bq"):
            name = f"{share_from}.cross.{k}"
        cross_keys[k] = params[name]
    return BranchParams(
        cross=AttentionParams(**cross_keys, n_heads=n_heads),
        cross_norm=Norm(params[f"{prefix}.cross_norm.gamma"], params[f"{prefix}.cross_norm.beta"]),
        self_attn=AttentionParams.from_params(params, f"{prefix}.self", n_heads),
        self_norm=Norm(params[f"{prefix}.self_norm.gamma"], params[f"{prefix}.self_norm.beta"]),
    )


def layer_params(params, prefix, n_heads=1):
    """Collect a layer's tensors from a flat name -> Tensor mapping."""
    enhanced = f"{prefix}.fuse.w" in params
    return CmaLayerParams(
        hi=_branch(params, f"{prefix}.hi", n_heads),
        ffn_w1=params[f"{prefix}.ffn.w1"],
        ffn_b1=params[f"{prefix}.ffn.b1"],
        ffn_w2=params[f"{prefix}.ffn.w2"],
        ffn_b2=params[f"{prefix}.ffn.b2"],
        ffn_norm=Norm(params[f"{prefix}.ffn_norm.gamma"], params[f"{prefix}.ffn_norm.beta"]),
        lo=_branch(params, f"{prefix}.lo", n_heads, share_from=f"{prefix}.hi") if enhanced else None,
        fuse_w=params.get(f"{prefix}.fuse.w"),
        fuse_b=params.get(f"{prefix}.fuse.b"),
    )


def flatten_spatial(f):
    *lead, h, w, d = f.shape
    return nd.reshape(f, (*lead, h * w, d))


def downsample_feature(f):
    """Half-resolution copy of a (..., H, W, d) feature map by 2x2 average pooling."""
    return nd.avgpool2x2(f)


def fuse(x_hi, x_lo, fuse_w, fuse_b=None):
    """Affine map of the concatenated query streams back to width d (no activation)."""
    if x_hi.shape != x_lo.shape:
        raise DimensionError(f"fuse: stream shapes differ, {x_hi.shape} vs {x_lo.shape}")
    return nd.linear(nd.concat_lastdim(x_hi, x_lo), fuse_w, fuse_b)


def feed_forward(x, p):
    h = nd.relu(nd.linear(x, p.ffn_w1, p.ffn_b1))
    return p.ffn_norm(x + nd.linear(h, p.ffn_w2, p.ffn_b2))


def run_branch(x_prev, f_flat, bias, bp, q_pos=None, k_pos=None):
    """masked attention -> add & norm -> self-attention -> add & norm."""
    a = bp.cross_norm(masked_attention(x_prev, f_flat, bias, bp.cross, q_pos=q_pos, k_pos=k_pos))
    return bp.self_norm(a + scaled_self_attention(a, bp.self_attn))


def _check(name, t, diagnostics):
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite activations in sublayer '{name}'")
    diagnostics[name] = float(np.linalg.norm(t.data))


def cma_layer(x_prev, x_prev_d, f, mask_logits_prev, params, q_pos=None, pos_hi=None, pos_lo=None):
    """One decoder layer.

    Parameters are the previous fused query stream ``x_prev`` (..., N, d),
    the previous low-resolution stream ``x_prev_d``, the feature map ``f``
    (..., H, W, d) and the previous layer's mask logits (..., N, H0, W0).
    ``pos_hi``/``pos_lo`` are key positional encodings for the two feature
    resolutions, flattened to (HW, d).

    When ``params.lo`` is None only the high-resolution branch and the FFN run
    and ``x_lo`` passes ``x_prev_d`` through unchanged.
    """
    *_, h, w, _ = f.shape
    diagnostics = {}
    bias_hi = mask_to_bias(mask_logits_prev, (h, w))
    x_hi = run_branch(x_prev, flatten_spatial(f), bias_hi, params.hi, q_pos, pos_hi)
    _check("hi", x_hi, diagnostics)

    if params.lo is None:
        x_final = feed_forward(x_hi, params)
        _check("ffn", x_final, diagnostics)
        return CmaLayerOutput(x_final, x_prev_d, diagnostics)

    f_d = downsample_feature(f)
    bias_lo = mask_to_bias(mask_logits_prev, (h // 2, w // 2))
    x_lo = run_branch(x_prev_d, flatten_spatial(f_d), bias_lo, params.lo, q_pos, pos_lo)
    _check("lo", x_lo, diagnostics)

    fused = fuse(x_hi, x_lo, params.fuse_w, params.fuse_b)
    _check("fuse", fused, diagnostics)
    x_final = feed_forward(fused, params)
    _check("ffn", x_final, diagnostics)
    return CmaLayerOutput(x_final, x_lo, diagnostics)
