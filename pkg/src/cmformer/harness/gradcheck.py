"""Central finite-difference checks for every differentiable op and the composite layers/losses."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import ndtensor as nd
from ..attention import AttentionParams, mask_to_bias, masked_attention, scaled_self_attention
from ..cma import cma_layer, layer_param_shapes, layer_params
from ..ndtensor import Tensor
from ..objective import GtSegment, bce_mask_loss, cls_loss, dice_loss
from ..pixelnet import FeaturePyramid, param_shapes as pixel_param_shapes, pixel_decode

EPS = 1e-5
TOL = 1e-4
SEEDS = (0, 1, 2, 3, 4)

REQUIRED_OPS = (
    "matmul", "softmax_lastdim", "avgpool2x2", "concat_lastdim", "add", "mul", "sigmoid", "relu",
    "exp", "log", "mean", "transpose", "reshape", "layernorm", "linear",
)
EXTRA_OPS = (
    "sub", "neg", "div", "sum", "softplus", "log_softmax_lastdim", "gather_rows", "upsample_nearest", "conv2d",
)
COMPOSITES = (
    "masked_attention", "scaled_self_attention", "cma_layer", "pixel_decode",
    "dice_loss", "bce_mask_loss", "cls_loss",
)


def _t(rng, *shape, low=None):
    x = rng.standard_normal(shape)
    if low is not None:  # keep away from kinks / the log domain boundary
        x = np.sign(x) * (np.abs(x) + low)
    return Tensor(x, requires_grad=True)


def _pos(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)


def _attn(rng, d):
    # weights at the usual 1/sqrt(d) scale; unit-variance projections saturate the softmax
    w = lambda: Tensor(rng.standard_normal((d, d)) / np.sqrt(d), requires_grad=True)  # noqa: E731
    return AttentionParams(w(), _t(rng, d), w(), w(), _t(rng, d))


def _params_from_shapes(rng, shapes):
    return {k: Tensor(rng.standard_normal(s) * (0.5 if len(s) > 1 else 0.2) + (1.0 if k.endswith("gamma") else 0.0),
                      requires_grad=True) for k, s in shapes.items()}


def _case(name, rng):
    """Returns (function producing a Tensor, list of input leaves)."""
    if name == "matmul":
        a, b = _t(rng, 2, 4, 3), _t(rng, 3, 5)
        return lambda: nd.matmul(a, b), [a, b]
    if name == "softmax_lastdim":
        x = _t(rng, 3, 6)
        mask = np.where(rng.uniform(size=(3, 6)) < 0.3, -np.inf, 0.0)
        mask[:, 0] = 0.0
        return lambda: nd.softmax_lastdim(x + mask), [x]
    if name == "avgpool2x2":
        f = _t(rng, 2, 4, 6, 3)
        return lambda: nd.avgpool2x2(f), [f]
    if name == "concat_lastdim":
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        return lambda: nd.concat_lastdim(a, b), [a, b]
    if name == "add":
        a, b = _t(rng, 3, 4), _t(rng, 4)
        return lambda: nd.add(a, b), [a, b]
    if name == "sub":
        a, b = _t(rng, 3, 4), _t(rng, 3, 1)
        return lambda: nd.sub(a, b), [a, b]
    if name == "mul":
        a, b = _t(rng, 3, 4), _t(rng, 1, 4)
        return lambda: nd.mul(a, b), [a, b]
    if name == "div":
        a, b = _t(rng, 3, 4), _pos(rng, 3, 4)
        return lambda: nd.div(a, b), [a, b]
    if name == "neg":
        a = _t(rng, 5)
        return lambda: nd.neg(a), [a]
    if name == "sigmoid":
        a = _t(rng, 4, 3)
        return lambda: nd.sigmoid(a * 3.0), [a]
    if name == "softplus":
        a = _t(rng, 4, 3)
        return lambda: nd.softplus(a * 3.0), [a]
    if name == "relu":
        a = _t(rng, 4, 5, low=0.05)
        return lambda: nd.relu(a), [a]
    if name == "exp":
        a = _t(rng, 6)
        return lambda: nd.exp(a), [a]
    if name == "log":
        a = _pos(rng, 6)
        return lambda: nd.log(a), [a]
    if name == "mean":
        a = _t(rng, 3, 4, 5)
        return lambda: nd.mean(a, axis=1) * nd.mean(a), [a]
    if name == "sum":
        a = _t(rng, 3, 4, 5)
        return lambda: nd.sum(a, axis=(0, 2), keepdims=True) * nd.sum(a), [a]
    if name == "transpose":
        a = _t(rng, 2, 3, 4)
        return lambda: nd.transpose(a, (2, 0, 1)) * nd.transpose(a, (2, 0, 1)), [a]
    if name == "reshape":
        a = _t(rng, 2, 3, 4)
        return lambda: nd.reshape(a, (4, 6)) * nd.reshape(a, (4, 6)), [a]
    if name == "layernorm":
        x, g, b = _t(rng, 3, 6), _t(rng, 6), _t(rng, 6)
        return lambda: nd.layernorm(x, g, b), [x, g, b]
    if name == "linear":
        x, w, b = _t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)
        return lambda: nd.linear(x, w, b), [x, w, b]
    if name == "log_softmax_lastdim":
        x = _t(rng, 3, 5)
        return lambda: nd.log_softmax_lastdim(x), [x]
    if name == "gather_rows":
        x = _t(rng, 5, 3)
        return lambda: nd.gather_rows(x, [4, 0, 4, 2]), [x]
    if name == "upsample_nearest":
        f = _t(rng, 2, 2, 3, 2)
        return lambda: nd.upsample_nearest(f, 2), [f]
    if name == "conv2d":
        x, w, b = _t(rng, 2, 6, 6, 2), _t(rng, 3, 3, 2, 3), _t(rng, 3)
        return lambda: nd.conv2d(x, w, b, stride=2, pad=1), [x, w, b]
    if name == "masked_attention":
        d, n, hw = 4, 3, 8
        x, f = _t(rng, n, d), _t(rng, hw, d)
        p = _attn(rng, d)
        bias = mask_to_bias(rng.standard_normal((n, 2, 4)), (2, 4))
        return lambda: masked_attention(x, f, bias, p), [x, f] + p.tensors()
    if name == "scaled_self_attention":
        d, n = 4, 5
        x = _t(rng, n, d)
        p = _attn(rng, d)
        return lambda: scaled_self_attention(x, p), [x] + p.tensors()
    if name == "cma_layer":
        d, n = 4, 3
        params = _params_from_shapes(rng, layer_param_shapes("L", d, enhanced=True, ffn_mult=2))
        lp = layer_params(params, "L")
        x, xd, f = _t(rng, n, d), _t(rng, n, d), _t(rng, 4, 4, d)
        q_pos = rng.standard_normal((n, d))
        masks = rng.standard_normal((n, 8, 8))
        leaves = [x, xd, f] + list(params.values())
        return lambda: cma_layer(x, xd, f, masks, lp, q_pos=q_pos).x_final, leaves
    if name == "pixel_decode":
        d = 4
        shapes = {k: s for k, s in pixel_param_shapes(d).items() if k.startswith("pix.")}
        params = _params_from_shapes(rng, shapes)
        levels = {s: _t(rng, 1, 64 // s, 64 // s, d) for s in (4, 8, 16, 32)}
        pyr = FeaturePyramid(levels, (64, 64))
        return lambda: pixel_decode(pyr, params), list(levels.values()) + list(params.values())
    if name == "dice_loss":
        x = _t(rng, 3, 10)
        t = rng.uniform(size=(3, 10)) < 0.5
        return lambda: dice_loss(x, t), [x]
    if name == "bce_mask_loss":
        x = _t(rng, 16)
        t = rng.uniform(size=16) < 0.5
        return lambda: bce_mask_loss(x * 2.0, t), [x]
    if name == "cls_loss":
        logits = _t(rng, 4, 5)
        gt = [GtSegment(1, np.ones((2, 2), bool)), GtSegment(3, np.ones((2, 2), bool))]
        return lambda: cls_loss(logits, [(2, 0), (0, 1)], gt), [logits]
    raise KeyError(name)


def max_relative_error(fn, leaves, rng, eps=EPS):
    """Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over all leaf entries."""
    probe = rng.standard_normal(fn().shape)

    for t in leaves:
        t.grad = None
    nd.backward(nd.sum(fn() * probe))
    worst = 0.0
    with nd.no_grad():
        for t in leaves:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = fn().data
                flat[i] = orig - eps
                fm = fn().data
                flat[i] = orig
                # difference outputs before reducing to limit cancellation
                num = float(np.sum((fp - fm) * probe)) / (2 * eps)
                a = analytic.reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    return worst


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def ok(self):
        return self.max_rel_error <= TOL


def run_suite(names=None, seeds=SEEDS):
    results = []
    for name in names or REQUIRED_OPS + EXTRA_OPS + COMPOSITES:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng([seed, len(name)])
            fn, leaves = _case(name, rng)
            worst = max(worst, max_relative_error(fn, leaves, rng))
        results.append(GradcheckResult(name, worst, time.perf_counter() - t0))
    return results


def format_report(results):
    lines = [f"{'op':24s} {'max rel err':>12s}  status"]
    for r in results:
        lines.append(f"{r.name:24s} {r.max_rel_error:12.3e}  {'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    lines.append("all passed" if not failed else f"FAILED: {', '.join(failed)}")
    return "\n".join(lines)
