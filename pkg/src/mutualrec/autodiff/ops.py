"""Differentiable primitives.

Shapes are explicit: elementwise ops need identical shapes, and the only
broadcasting forms are the named ones (``linear`` shares a weight matrix
across leading axes, ``add_bias`` adds a vector along the last axis).
Reductions use numpy's fixed-order kernels, so results are reproducible.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, as_tensor, make_node

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _same_shape(name, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(name, a.shape, b.shape)


def _unbroadcast_rows(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands carry the same leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), back, "matmul")


def linear(x, w) -> Tensor:
    """``x[..., k] @ w[k, n]`` with ``w`` shared over the leading axes of ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError("linear", x.shape, w.shape)
    out = x.data @ w.data

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return make_node(out, (x, w), back, "linear")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise DimensionError("transpose", a.shape)
    out = np.swapaxes(a.data, -1, -2)
    return make_node(out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError("permute", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inverse),), "permute")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError("reshape", a.shape, shape)
    out = np.ascontiguousarray(a.data).reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---------------------------------------------------------------- indexing


def embedding(table, index) -> Tensor:
    """Row lookup: ``table[index]`` for an integer array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(index)
    if table.data.ndim != 2:
        raise DimensionError("embedding", table.shape, idx.shape)
    if idx.dtype.kind not in "iu":
        raise DimensionError("embedding", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError("embedding", table.shape, (int(idx.min()), int(idx.max())))
    out = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_node(out, (table,), back, "embedding")


def take_rows(x, rows) -> Tensor:
    """Select rows along axis 0 (rows may repeat)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim != 1 or (rows.size and (rows.min() < 0 or rows.max() >= x.shape[0])):
        raise DimensionError("take_rows", x.shape, rows.shape)
    out = x.data[rows]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        return (gx,)

    return make_node(out, (x,), back, "take_rows")


def pick(x, index) -> Tensor:
    """``out[n] = x[n, index[n]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError("pick", x.shape, idx.shape)
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return make_node(out, (x,), back, "pick")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ndim = ts[0].data.ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.data.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise DimensionError("concat", ts[0].shape, t.shape)
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_node(out, ts, back, "concat")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)

    def back(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return make_node(a.data * b.data, (a, b), back, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x, b) -> Tensor:
    """Add a vector ``b[n]`` along the last axis of ``x[..., n]``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError("add_bias", x.shape, b.shape)
    n = b.shape[0]

    def back(g):
        return g, (_unbroadcast_rows(g, n) if b.requires_grad else None)

    return make_node(x.data + b.data, (x, b), back, "add_bias")


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_SQRT_2_OVER_PI * (xd + 0.044715 * x2 * xd))
    out = 0.5 * xd * (1.0 + th)

    def back(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return make_node(out, (x,), back, "gelu")


def dropout(x, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    x = as_tensor(x)
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return make_node(out, (a,), back, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- normalisation


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _stable_log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_softmax(a.data)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_node(s, (a,), back, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_log_softmax(a.data)

    def back(g):
        s = np.exp(out)
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (a,), back, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast_rows(g * xhat, n) if gain.requires_grad else None
        gb = _unbroadcast_rows(g, n) if bias.requires_grad else None
        return gx, gg, gb

    return make_node(out, (x, gain, bias), back, "layer_norm")


# ---------------------------------------------------------------- attention


def attention(q, k, v, causal: bool = True, drop_keep: np.ndarray | None = None) -> Tensor:
    """Masked scaled dot-product attention over ``[..., T, dh]`` operands.

    ``drop_keep`` is an optional pre-scaled keep mask ``[..., T, T]`` applied
    to the attention probabilities (attention dropout).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or q.shape != v.shape or q.data.ndim < 2:
        raise DimensionError("attention", q.shape, k.shape, v.shape)
    t, dh = q.shape[-2], q.shape[-1]
    c = 1.0 / math.sqrt(dh)
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * c
    if causal:
        future = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = np.where(future, -np.inf, scores)
    probs = _stable_softmax(scores)
    weights = probs if drop_keep is None else probs * drop_keep
    out = weights @ v.data

    def back(g):
        gv = np.swapaxes(weights, -1, -2) @ g if v.requires_grad else None
        gw = g @ np.swapaxes(v.data, -1, -2)
        if drop_keep is not None:
            gw = gw * drop_keep
        gs = probs * (gw - (gw * probs).sum(axis=-1, keepdims=True)) * c
        gq = gs @ k.data if q.requires_grad else None
        gk = np.swapaxes(gs, -1, -2) @ q.data if k.requires_grad else None
        return gq, gk, gv

    return make_node(out, (q, k, v), back, "attention")
