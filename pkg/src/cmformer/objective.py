"""Bipartite matching between queries and ground-truth segments, and the mask/class losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

LAMBDA_CE = 5.0
LAMBDA_DICE = 5.0
LAMBDA_CLS = 2.0
NO_OBJECT_WEIGHT = 0.1
DICE_EPS = 1.0
IGNORE = 255


@dataclass
class GtSegment:
    class_id: int
    mask: np.ndarray  # bool (h, w)


@dataclass
class LossWeights:
    ce: float = LAMBDA_CE
    dice: float = LAMBDA_DICE
    cls: float = LAMBDA_CLS
    no_object: float = NO_OBJECT_WEIGHT
    dice_eps: float = DICE_EPS


@dataclass
class LossBreakdown:
    ce: Tensor
    dice: Tensor
    cls: Tensor
    total: Tensor
    weights: tuple = (LAMBDA_CE, LAMBDA_DICE, LAMBDA_CLS)

    def values(self):
        return {k: float(getattr(self, k).data) for k in ("ce", "dice", "cls", "total")}


class TooManySegmentsError(ValueError):
    pass


def segments_from_labels(labels, n_classes, stride=4):
    """Ground-truth segments at 1/stride resolution; each cell takes the most frequent label of its block.

    Cells whose block is entirely ignore (255) belong to no segment.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    blocks = labels.reshape(h // stride, stride, w // stride, stride).transpose(0, 2, 1, 3).reshape(
        h // stride, w // stride, stride * stride)
    counts = np.stack([(blocks == c).sum(-1) for c in range(n_classes)], axis=-1)
    small = np.argmax(counts, axis=-1)
    small[counts.sum(-1) == 0] = IGNORE
    return [GtSegment(int(c), small == c) for c in range(n_classes) if np.any(small == c)]


# ---------------------------------------------------------------------------
# matching


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def build_match_cost(class_logits, mask_logits, gt, weights=None):
    """Cost[i, j] of assigning query i to segment j (no gradient)."""
    w = weights or LossWeights()
    cl = np.asarray(class_logits.data if isinstance(class_logits, Tensor) else class_logits)
    ml = np.asarray(mask_logits.data if isinstance(mask_logits, Tensor) else mask_logits)
    n = cl.shape[0]
    if len(gt) > n:
        raise TooManySegmentsError(f"too many segments for query budget ({len(gt)} > {n})")
    if not gt:
        return np.zeros((n, 0))
    ml = ml.reshape(n, -1)
    t = np.stack([g.mask.reshape(-1) for g in gt]).astype(np.float64)  # (M, P)
    p = ml.shape[1]
    e = np.exp(cl - cl.max(axis=-1, keepdims=True))
    prob = e / e.sum(axis=-1, keepdims=True)
    cost_cls = -prob[:, [g.class_id for g in gt]]
    cost_ce = (_softplus(-ml) @ t.T + _softplus(ml) @ (1.0 - t).T) / p
    s = _sigmoid(ml)
    cost_dice = 1.0 - (2.0 * s @ t.T + w.dice_eps) / (s.sum(-1)[:, None] + t.sum(-1)[None, :] + w.dice_eps)
    return w.cls * cost_cls + w.ce * cost_ce + w.dice * cost_dice


def _rect_hungarian(cost):
    """Min-cost assignment of every row of an (n x m) matrix, n <= m.

    Returns (col_of_row, u, v) where u/v are optimal dual potentials with
    u_i + v_j <= c_ij, equality on assigned pairs, v_j <= 0 and v_j == 0 on
    unassigned columns.
    """
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.intp)  # owner[j] = 1-based row on column j, 0 = free
    way = np.zeros(m + 1, dtype=np.intp)
    c = np.zeros((n + 1, m + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = c[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.intp)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _augment_within(tight, row_of_col, fixed_cols, start_row, target_col):
    """Alternating path in the tight graph from ``start_row`` to the free ``target_col``.

    Rows are gt segments plus (implicitly) dummy rows for unused queries. Returns
    the path as a list of (row, col) reassignments or None.
    """
    m = tight.shape[1]
    seen = np.zeros(m, dtype=bool)
    seen[list(fixed_cols)] = True
    stack = [(start_row, [])]
    while stack:
        row, path = stack.pop()
        # row -1 (dummy) indexes the shared dummy row of ``tight``
        for col in np.flatnonzero(tight[row]):
            if seen[col]:
                continue
            seen[col] = True
            step = path + [(row, col)]
            if col == target_col:
                return step
            stack.append((row_of_col[col], step))
    return None


def hungarian_match(cost):
    """Optimal assignment of every column (segment) of an N x M cost matrix to a distinct row (query).

    Returns [(query, segment), ...] sorted by segment. Among optimal
    assignments the one whose query sequence (read in segment order) is
    lexicographically smallest is returned, so ties resolve deterministically.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if m == 0:
        return []
    if m > n:
        raise TooManySegmentsError(f"too many segments for query budget ({m} > {n})")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    # rows = segments, columns = queries
    ct = cost.T
    q_of_seg, u, v = _rect_hungarian(ct)
    tol = 1e-9 * (1.0 + np.abs(ct).max())
    # tight[j, i]: edge seg j - query i has zero reduced cost; the last row stands for any dummy row
    # (cost 0, potential 0), tight exactly on queries with v_i == 0
    tight = np.zeros((m + 1, n), dtype=bool)
    tight[:m] = np.abs(ct - u[:, None] - v[None, :]) <= tol
    tight[m] = np.abs(v) <= tol
    row_of_col = np.full(n, -1, dtype=np.intp)  # -1 = dummy
    row_of_col[q_of_seg] = np.arange(m)
    fixed = set()
    for j in range(m):
        current = q_of_seg[j]
        for i in np.flatnonzero(tight[j, :current]):
            if i in fixed:
                continue
            # give query i to segment j, then re-route its previous owner to the freed query
            path = _augment_within(tight, row_of_col, fixed | {i}, row_of_col[i], current)
            if path is None:
                continue
            for row, col in path:
                row_of_col[col] = row
                if row >= 0:
                    q_of_seg[row] = col
            row_of_col[i] = j
            q_of_seg[j] = i
            break
        fixed.add(int(q_of_seg[j]))
    return [(int(q_of_seg[j]), j) for j in range(m)]


# ---------------------------------------------------------------------------
# losses


def dice_loss(pred_logits, target, eps=DICE_EPS):
    """1 - (2 sum(s t) + eps) / (sum(s) + sum(t) + eps), s = sigmoid(logits), over the last axis."""
    t = np.asarray(target, dtype=np.float64)
    s = nd.sigmoid(pred_logits)
    num = nd.sum(s * t, axis=-1) * 2.0 + eps
    den = nd.sum(s, axis=-1) + (t.sum(-1) + eps)
    return 1.0 - num / den


def bce_mask_loss(pred_logits, target):
    """Mean over pixels of the logit-form binary cross-entropy."""
    t = np.asarray(target, dtype=np.float64)
    # -[t log s(x) + (1-t) log(1-s(x))] = softplus(x) - t x
    return nd.mean(nd.softplus(pred_logits) - pred_logits * t)


def _cls_weights(shape, assignment, gt, no_object_weight):
    n, c = shape
    w = np.zeros((n, c))
    w[:, c - 1] = no_object_weight
    for q, j in assignment:
        w[q, :] = 0.0
        w[q, gt[j].class_id] = 1.0
    return w


def cls_loss(class_logits, assignment, gt, no_object_weight=NO_OBJECT_WEIGHT):
    """(1/N) sum_i w_i * CE_i; matched queries target their class (w=1), others no-object (w=0.1)."""
    n = class_logits.shape[-2]
    w = _cls_weights(class_logits.shape[-2:], assignment, gt, no_object_weight)
    return nd.sum(nd.log_softmax_lastdim(class_logits) * w) * (-1.0 / n)


def _layer_terms(pred, gts, weights):
    """Batched losses for one prediction; returns (ce, dice, cls) tensors."""
    cl, ml = pred.class_logits, pred.mask_logits
    bsz, n, c = cl.shape
    p = int(np.prod(ml.shape[2:]))
    flat = nd.reshape(ml, (bsz * n, p))
    rows, targets, cls_w = [], [], np.zeros((bsz, n, c))
    for b, gt in enumerate(gts):
        cost = build_match_cost(cl.data[b], ml.data[b], gt, weights)
        assignment = hungarian_match(cost)
        cls_w[b] = _cls_weights((n, c), assignment, gt, weights.no_object)
        for q, j in assignment:
            rows.append(b * n + q)
            targets.append(gt[j].mask.reshape(-1))
    cls = nd.sum(nd.log_softmax_lastdim(cl) * cls_w) * (-1.0 / (bsz * n))
    if not rows:
        zero = Tensor(0.0)
        return zero, zero, cls
    picked = nd.gather_rows(flat, rows)
    t = np.stack(targets).astype(np.float64)
    ce = bce_mask_loss(picked, t)
    dice = nd.mean(dice_loss(picked, t, weights.dice_eps))
    return ce, dice, cls


def weighted_total(ce, dice, cls, weights=None):
    """lambda_ce * ce + lambda_dice * dice + lambda_cls * cls."""
    w = weights or LossWeights()
    return ce * w.ce + dice * w.dice + cls * w.cls


def total_loss(preds, gt, weights=None, layer_weights=None):
    """Weighted set-prediction loss summed over all supervised predictions.

    ``preds`` may be unbatched (gt is a list of GtSegment) or batched (gt is
    one such list per sample); batched terms average over matched masks and
    over queries of the whole batch.
    """
    weights = weights or LossWeights()
    if not preds:
        raise ValueError("total_loss needs at least one prediction")
    batched = preds[0].class_logits.ndim == 3
    gts = gt if batched else [gt]
    layer_weights = layer_weights or [1.0] * len(preds)
    ce = dice = cls = Tensor(0.0)
    for lw, pred in zip(layer_weights, preds):
        if not batched:
            pred = type(pred)(nd.reshape(pred.class_logits, (1,) + pred.class_logits.shape),
                              nd.reshape(pred.mask_logits, (1,) + pred.mask_logits.shape))
        c, d, k = _layer_terms(pred, gts, weights)
        ce, dice, cls = ce + c * lw, dice + d * lw, cls + k * lw
    total = weighted_total(ce, dice, cls, weights)
    return LossBreakdown(ce, dice, cls, total, (weights.ce, weights.dice, weights.cls))
