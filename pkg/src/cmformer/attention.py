"""Mask binarization, masked cross-attention and scaled self-attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import DimensionError, Tensor


@dataclass
class AttentionParams:
    """Query/key/value projections; weights are (d, d), biases (d,).

    The key projection carries no bias: it would add q . b_k to every logit of
    a row, which the softmax cancels, so it could never receive a gradient.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    n_heads: int = 1

    @property
    def d(self):
        return self.wq.shape[0]

    @property
    def d_k(self):
        return self.d // self.n_heads

    @classmethod
    def from_params(cls, params, prefix, n_heads=1):
        return cls(*(params[f"{prefix}.{k}"] for k in PROJECTIONS), n_heads=n_heads)

    def tensors(self):
        return [self.wq, self.bq, self.wk, self.wv, self.bv]


PROJECTIONS = ("wq", "bq", "wk", "wv", "bv")


def attention_param_shapes(prefix, d):
    return {f"{prefix}.{k}": (d, d) if k[0] == "w" else (d,) for k in PROJECTIONS}


@dataclass
class AttentionBias:
    """Additive attention bias with entries in {0, -inf}.

    ``values`` has shape (..., N, h*w). ``empty`` flags the query rows that had
    no foreground position and were reset to all-zero (unmasked) rows.
    """

    values: np.ndarray
    empty: np.ndarray

    @property
    def empty_rows(self):
        idx = np.argwhere(self.empty)
        if self.empty.ndim == 1:
            return {int(i[0]) for i in idx}
        return {tuple(int(v) for v in i) for i in idx}

    @property
    def shape(self):
        return self.values.shape


def resize_nearest(x, target):
    """Nearest-neighbour resize of the last two axes; source dims must be multiples of target."""
    h0, w0 = x.shape[-2:]
    h, w = target
    if h0 % h or w0 % w:
        raise DimensionError(f"cannot resize {h0}x{w0} to {h}x{w}: target must divide source")
    rows = (np.arange(h) * h0) // h
    cols = (np.arange(w) * w0) // w
    return x[..., rows[:, None], cols[None, :]]


def mask_to_bias(mask_logits, target):
    """Binarize mask logits (sigmoid >= 0.5, i.e. logit >= 0) into an attention bias at ``target`` size."""
    logits = mask_logits.data if isinstance(mask_logits, Tensor) else np.asarray(mask_logits)
    small = resize_nearest(logits, target)
    fg = small.reshape(*small.shape[:-2], -1) >= 0.0
    empty = ~fg.any(axis=-1)
    fg[empty] = True
    values = np.where(fg, 0.0, -np.inf)
    return AttentionBias(values, empty)


def _split_heads(x, n_heads):
    *lead, n, d = x.shape
    x = nd.reshape(x, (*lead, n, n_heads, d // n_heads))
    perm = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return nd.transpose(x, perm)


def _merge_heads(x):
    *lead, h, n, dh = x.shape
    perm = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    x = nd.transpose(x, perm)
    return nd.reshape(x, (*lead, n, h * dh))


def _attend(q, k, v, bias, n_heads):
    d_k = q.shape[-1] // n_heads
    scale = 1.0 / np.sqrt(d_k)
    if n_heads == 1:
        logits = nd.matmul(q, nd.transpose(k)) * scale
        if bias is not None:
            logits = logits + bias
        return nd.matmul(nd.softmax_lastdim(logits), v)
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    logits = nd.matmul(qh, nd.transpose(kh)) * scale
    if bias is not None:
        logits = logits + np.expand_dims(bias, -3)
    return _merge_heads(nd.matmul(nd.softmax_lastdim(logits), vh))


def masked_attention(x_prev, f, bias, params, q_pos=None, k_pos=None):
    """softmax(bias + Q K^T / sqrt(d_k)) V + x_prev.

    ``f`` is the flattened feature map (..., HW, d). Optional positional terms
    are added to the query input and to the key input only.
    """
    if f.shape[-1] != x_prev.shape[-1]:
        raise DimensionError(f"masked_attention: query width {x_prev.shape} vs feature width {f.shape}")
    b = bias.values if isinstance(bias, AttentionBias) else bias
    if b.shape[-2:] != (x_prev.shape[-2], f.shape[-2]):
        raise DimensionError(
            f"masked_attention: bias {b.shape} does not match {x_prev.shape[-2]} queries x {f.shape[-2]} positions"
        )
    q = nd.linear(x_prev if q_pos is None else x_prev + q_pos, params.wq, params.bq)
    k = nd.linear(f if k_pos is None else f + k_pos, params.wk)
    v = nd.linear(f, params.wv, params.bv)
    return _attend(q, k, v, b, params.n_heads) + x_prev


def scaled_self_attention(x, params):
    """Softmax(Q K^T / sqrt(d_k)) V with Q, K, V projected from the same rows."""
    if x.shape[-1] != params.d:
        raise DimensionError(f"self-attention: input {x.shape} vs projection width {params.d}")
    q = nd.linear(x, params.wq, params.bq)
    k = nd.linear(x, params.wk)
    v = nd.linear(x, params.wv, params.bv)
    return _attend(q, k, v, None, params.n_heads)


def sine_position_encoding(h, w, d, temperature=10000.0):
    """Fixed 2-D sinusoidal encoding, (h*w, d): first half encodes y, second half x."""
    if d % 4:
        raise DimensionError(f"positional width must be a multiple of 4, got {d}")
    half = d // 2
    ys = (np.arange(h) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2 * np.pi
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)

    def enc(coord):
        t = coord[:, None] / dim_t
        out = np.empty_like(t)
        out[:, 0::2] = np.sin(t[:, 0::2])
        out[:, 1::2] = np.cos(t[:, 1::2])
        return out

    ey, ex = enc(ys), enc(xs)
    pos = np.concatenate([np.repeat(ey[:, None, :], w, 1), np.repeat(ex[None, :, :], h, 0)], axis=-1)
    return pos.reshape(h * w, d)
