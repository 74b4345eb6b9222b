"""Small dense-tensor engine with define-by-run reverse-mode gradients.

Everything is float64. Each differentiable op builds its output eagerly and,
when any input requires a gradient, records its parents together with a
vector-Jacobian product (vjp) closure. ``backward`` orders the recorded graph
topologically into a :class:`Tape`, runs it once in reverse and then drops the
graph.

Leading dimensions broadcast in the elementwise ops and in ``matmul`` (numpy
rules); gradients are summed back to the input shapes.

Summation order: ``matmul`` and ``linear`` delegate to numpy's BLAS ``dgemm``
whose blocking is fixed for a given shape, BLAS build and thread count, so
reruns in the same environment are bitwise identical. Axis reductions use
numpy's pairwise summation over the row-major layout.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

DTYPE = np.float64

_state = threading.local()


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._vjp is None

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), vjp, "sub")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        gb = -g * data / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), vjp, "div")


def exp(a):
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("exp overflow")
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sigmoid(a):
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    y[~pos] = e / (1.0 + e)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a):
    x = a.data
    on = x > 0
    return _make(np.where(on, x, 0.0), (a,), lambda g: (g * on,), "relu")


def softplus(a):
    """log(1 + e^x), stable for either sign."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return _make(y, (a,), vjp, "softplus")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis=None, keepdims=False):  # noqa: A001
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    shape = a.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), vjp, "mean")


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs ndim >= 2, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def gather_rows(a, index):
    """Rows of a 2-D tensor selected by an integer index (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]

    def vjp(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), vjp, "gather_rows")


def concat_lastdim(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_lastdim: leading shapes differ, {a.shape} vs {b.shape}")
    d = a.shape[-1]
    data = np.concatenate([a.data, b.data], axis=-1)
    return _make(data, (a, b), lambda g: (g[..., :d], g[..., d:]), "concat_lastdim")


# ---------------------------------------------------------------------------
# linear algebra


def _matmul_vjp(g, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


def matmul(a, b):
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga, gb = _matmul_vjp(g, a.data, b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), vjp, "matmul")


def linear(x, w, b=None):
    """Affine map x @ w + b on the last axis; w is (d_in, d_out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd = x.data
    y = xd @ w.data
    if b is not None:
        y = y + b.data
    lead = xd.reshape(-1, xd.shape[-1])

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data.T
        gw = lead.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, vjp, "linear")


def softmax_lastdim(x):
    """Softmax over the last axis; -inf entries get exactly zero probability."""
    xd = x.data
    m = np.max(xd, axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise NonFiniteError("degenerate softmax row")
    if np.any(np.isnan(xd)) or np.any(np.isposinf(m)):
        raise NonFiniteError("softmax input is not finite")
    e = np.exp(xd - m)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), vjp, "softmax_lastdim")


def log_softmax_lastdim(x):
    xd = x.data
    m = np.max(xd, axis=-1, keepdims=True)
    z = xd - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * np.sum(g, axis=-1, keepdims=True),)

    return _make(y, (x,), vjp, "log_softmax_lastdim")


def layernorm(x, gamma, beta, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def vjp(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _make(y, (x, gamma, beta), vjp, "layernorm")


# ---------------------------------------------------------------------------
# spatial ops, channels-last (..., H, W, C)


def avgpool2x2(f):
    if f.ndim < 3:
        raise DimensionError(f"avgpool2x2 expects (..., H, W, d), got {f.shape}")
    *lead, h, w, d = f.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x2 needs even H and W, got {h}x{w}")
    blocks = f.data.reshape(*lead, h // 2, 2, w // 2, 2, d)
    y = blocks.mean(axis=(-4, -2))

    def vjp(g):
        g = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2)
        return (g * 0.25,)

    return _make(y, (f,), vjp, "avgpool2x2")


def upsample_nearest(f, factor):
    """Repeat every cell ``factor`` times along H and W."""
    *lead, h, w, d = f.shape
    y = np.repeat(np.repeat(f.data, factor, axis=-3), factor, axis=-2)

    def vjp(g):
        return (g.reshape(*lead, h, factor, w, factor, d).sum(axis=(-4, -2)),)

    return _make(y, (f,), vjp, "upsample_nearest")


def _conv_windows(xp, k, stride, ho, wo):
    return [
        xp[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :]
        for dy in range(k)
        for dx in range(k)
    ]


def conv2d(x, w, b=None, stride=1, pad=1):
    """Channels-last 2-D convolution; x is (B, H, W, Cin), w is (k, k, Cin, Cout)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k, _, cin, cout = w.shape
    bsz, h, wd, _ = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.concatenate(_conv_windows(xp, k, stride, ho, wo), axis=-1)
    w2 = w.data.reshape(k * k * cin, cout)
    y = cols @ w2
    if b is not None:
        y = y + b.data

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, k * k * cin).T @ g2).reshape(w.shape)
        gcols = g @ w2.T
        gxp = np.zeros_like(xp)
        for t, (dy, dx) in enumerate((dy, dx) for dy in range(k) for dx in range(k)):
            gxp[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :] += gcols[..., t * cin:(t + 1) * cin]
        gx = gxp[:, pad:pad + h, pad:pad + wd, :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, vjp, "conv2d")


# ---------------------------------------------------------------------------
# backward


class Tape:
    """Topologically ordered record of the ops that produced a scalar."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def run(self, seed):
        grads = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if not p.requires_grad or pg is None:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    def clear(self):
        for node in self.nodes:
            if not node.is_leaf:
                node._parents = ()
                node._vjp = None
        self.nodes = []


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from the tape (nothing requires grad)")
    tape = Tape.from_output(loss)
    tape.run(np.ones_like(loss.data))
    tape.clear()
