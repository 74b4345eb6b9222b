"""Plain numpy / explicit-loop reference implementations used as test oracles.

Nothing here imports the autodiff engine; every routine is written
independently of the package code it checks.
"""
import itertools
import math

import numpy as np


def linear(x, w, b=None):
    y = x @ w
    return y if b is None else y + b


def layernorm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) if v != -math.inf else 0.0 for v in row]
    s = sum(e)
    return [v / s for v in e]


def resize_nearest_loop(x, h, w):
    h0, w0 = x.shape[-2:]
    out = np.empty(x.shape[:-2] + (h, w))
    for i in range(h):
        for j in range(w):
            out[..., i, j] = x[..., (i * h0) // h, (j * w0) // w]
    return out


def bias_loop(mask_logits, h, w):
    """(N, H0, W0) logits -> (N, h*w) bias in {0, -inf}; all-background rows become all-zero."""
    small = resize_nearest_loop(mask_logits, h, w).reshape(mask_logits.shape[0], -1)
    out = np.zeros_like(small)
    for i in range(small.shape[0]):
        if np.any(small[i] >= 0):
            for j in range(small.shape[1]):
                out[i, j] = 0.0 if small[i, j] >= 0 else -np.inf
    return out


def attention_loop(q, k, v, bias=None):
    """softmax(bias + q k^T / sqrt(d)) v with every dot product written out."""
    n, d = q.shape
    m = k.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        logits = []
        for j in range(m):
            s = 0.0
            for c in range(d):
                s += q[i, c] * k[j, c]
            s /= math.sqrt(d)
            logits.append(s + (0.0 if bias is None else bias[i, j]))
        a = softmax_row(logits)
        for j in range(m):
            out[i] += a[j] * v[j]
    return out


def masked_attention_loop(x_prev, f, bias, p, q_pos=None, k_pos=None):
    q = linear(x_prev if q_pos is None else x_prev + q_pos, p["wq"], p["bq"])
    k = linear(f if k_pos is None else f + k_pos, p["wk"])
    v = linear(f, p["wv"], p["bv"])
    return attention_loop(q, k, v, bias) + x_prev


def self_attention_loop(x, p):
    return attention_loop(linear(x, p["wq"], p["bq"]), linear(x, p["wk"]), linear(x, p["wv"], p["bv"]))


def avgpool_loop(f):
    h, w, d = f.shape
    out = np.zeros((h // 2, w // 2, d))
    for i in range(h // 2):
        for j in range(w // 2):
            out[i, j] = (f[2 * i, 2 * j] + f[2 * i + 1, 2 * j] + f[2 * i, 2 * j + 1] + f[2 * i + 1, 2 * j + 1]) / 4
    return out


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def branch_steps(x_prev, f_flat, bias, params, prefix, q_pos=None, k_pos=None):
    """Masked attention, add & norm, self-attention, add & norm; one step at a time."""
    cross = _sub(params, f"{prefix}.cross")
    a = masked_attention_loop(x_prev, f_flat, bias, cross, q_pos, k_pos)
    a = layernorm(a, params[f"{prefix}.cross_norm.gamma"], params[f"{prefix}.cross_norm.beta"])
    s = self_attention_loop(a, _sub(params, f"{prefix}.self"))
    return layernorm(a + s, params[f"{prefix}.self_norm.gamma"], params[f"{prefix}.self_norm.beta"])


def ffn_step(x, params, prefix):
    h = np.maximum(linear(x, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]), 0.0)
    return layernorm(x + linear(h, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"]),
                     params[f"{prefix}.ffn_norm.gamma"], params[f"{prefix}.ffn_norm.beta"])


def cma_steps(x_prev, x_prev_d, f, masks, params, prefix="L", q_pos=None, pos_hi=None, pos_lo=None):
    """Step-wise layer oracle on unbatched numpy inputs; returns (x_final, x_lo)."""
    h, w, d = f.shape
    x_hi = branch_steps(x_prev, f.reshape(h * w, d), bias_loop(masks, h, w), params, f"{prefix}.hi", q_pos, pos_hi)
    if f"{prefix}.fuse.w" not in params:
        return ffn_step(x_hi, params, prefix), x_prev_d
    f_d = avgpool_loop(f)
    lo = dict(params)
    for k in ("wq", "bq"):
        lo.setdefault(f"{prefix}.lo.cross.{k}", params[f"{prefix}.hi.cross.{k}"])
    x_lo = branch_steps(x_prev_d, f_d.reshape(-1, d), bias_loop(masks, h // 2, w // 2), lo, f"{prefix}.lo",
                        q_pos, pos_lo)
    fused = np.concatenate([x_hi, x_lo], -1) @ params[f"{prefix}.fuse.w"] + params[f"{prefix}.fuse.b"]
    return ffn_step(fused, params, prefix), x_lo


def heads(x, mask_features, params):
    cls = linear(x, params["head.cls.w"], params["head.cls.b"])
    m = x
    for i in range(3):
        m = linear(m, params[f"head.mlp{i}.w"], params[f"head.mlp{i}.b"])
        if i < 2:
            m = np.maximum(m, 0.0)
    return cls, np.einsum("nd,hwd->nhw", m, mask_features)


def hungarian_brute(cost):
    """Minimum total cost over all injective segment -> query maps (columns to rows)."""
    n, m = cost.shape
    best = math.inf
    for perm in itertools.permutations(range(n), m):
        best = min(best, sum(cost[q, j] for j, q in enumerate(perm)))
    return best


def miou_loop(pred, gt, k, ignore=255):
    ious = []
    for c in range(k):
        tp = fp = fn = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g == ignore:
                continue
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)


def conv2d_loop(x, w, b, stride, pad):
    """(H, W, Cin) input, (k, k, Cin, Cout) kernel, zero padding."""
    h, wd, _ = x.shape
    k = w.shape[0]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, w.shape[3]))
    for i in range(ho):
        for j in range(wo):
            patch = xp[i * stride:i * stride + k, j * stride:j * stride + k]
            out[i, j] = np.tensordot(patch, w, axes=3) + b
    return out


def plain_decoder(levels, mask_features, params, schedule, q_pos, pos):
    """Mask-transformer decoder without any low-resolution stream (numpy, unbatched).

    ``levels`` maps stride -> (h, w, d); ``pos`` maps (h, w) -> key encodings.
    Returns [(class_logits, mask_logits), ...] for the initial queries and each layer.
    """
    x = params["query.feat"]
    preds = [heads(x, mask_features, params)]
    for l, s in enumerate(schedule):
        f = levels[s]
        h, w, d = f.shape
        p = f"dec{l}"
        x = branch_steps(x, f.reshape(h * w, d), bias_loop(preds[-1][1], h, w), params, f"{p}.hi", q_pos, pos[(h, w)])
        x = ffn_step(x, params, p)
        preds.append(heads(x, mask_features, params))
    return preds
