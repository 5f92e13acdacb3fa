"""Pre-norm causal transformer blocks shared by both recommenders."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .autodiff import Tensor, ops

INIT_STD = 0.02


def normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def init_block(rng: np.random.Generator, prefix: str, width: int, ffn_mult: int = 4) -> dict[str, np.ndarray]:
    hidden = ffn_mult * width
    p = {}
    for name in ("ln1", "ln2"):
        p[f"{prefix}.{name}.g"] = np.ones(width)
        p[f"{prefix}.{name}.b"] = np.zeros(width)
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.attn.{name}"] = normal(rng, (width, width))
        p[f"{prefix}.attn.b{name[1]}"] = np.zeros(width)
    p[f"{prefix}.ffn.w1"] = normal(rng, (width, hidden))
    p[f"{prefix}.ffn.b1"] = np.zeros(hidden)
    p[f"{prefix}.ffn.w2"] = normal(rng, (hidden, width))
    p[f"{prefix}.ffn.b2"] = np.zeros(width)
    return p


def _dense(x: Tensor, P: Mapping[str, Tensor], w: str, b: str) -> Tensor:
    return ops.add_bias(ops.linear(x, P[w]), P[b])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, w = x.shape
    return ops.permute(ops.reshape(x, (b, t, n_heads, w // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ops.reshape(ops.permute(x, (0, 2, 1, 3)), (b, t, h * dh))


def low_rank_delta(x: Tensor, a: Tensor, b: Tensor, scale: float) -> Tensor:
    """``scale * x @ A^T @ B^T`` for ``A: r x D``, ``B: D x r``."""
    return ops.scale(ops.linear(ops.linear(x, ops.transpose(a)), ops.transpose(b)), scale)


def block_forward(x: Tensor, P: Mapping[str, Tensor], prefix: str, n_heads: int,
                  dropout: float = 0.0, rng: np.random.Generator | None = None,
                  adapters: Mapping[str, tuple[Tensor, Tensor]] | None = None,
                  adapter_scale: float = 1.0) -> Tensor:
    """One causal block over ``x: [B, T, W]``.

    ``adapters`` maps ``"q"``/``"v"`` to ``(A, B)`` low-rank pairs added on top
    of the (possibly frozen) query/value projections.
    """
    h = ops.layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    proj = {}
    for c in ("q", "k", "v"):
        out = _dense(h, P, f"{prefix}.attn.w{c}", f"{prefix}.attn.b{c}")
        if adapters and c in adapters:
            a, b = adapters[c]
            out = ops.add(out, low_rank_delta(h, a, b, adapter_scale))
        proj[c] = _split_heads(out, n_heads)
    keep = None
    if rng is not None and dropout > 0:
        shape = proj["q"].shape[:-1] + (proj["q"].shape[-2],)
        keep = (rng.random(shape) >= dropout) / (1.0 - dropout)
    att = ops.attention(proj["q"], proj["k"], proj["v"], causal=True, drop_keep=keep)
    att = _dense(_merge_heads(att), P, f"{prefix}.attn.wo", f"{prefix}.attn.bo")
    x = ops.add(x, ops.dropout(att, dropout, rng))

    h = ops.layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    h = _dense(ops.gelu(_dense(h, P, f"{prefix}.ffn.w1", f"{prefix}.ffn.b1")), P,
               f"{prefix}.ffn.w2", f"{prefix}.ffn.b2")
    return ops.add(x, ops.dropout(h, dropout, rng))


def pad_right(seqs: list[list[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns ids and lengths.

    With a causal mask, right padding never influences real positions.
    """
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if len(seqs) else 0
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s
    return ids, lengths


def length_sorted_chunks(seqs: list[list[int]], batch_size: int):
    """Yield ``(indices, chunk)`` groups of similar length to limit padding."""
    order = np.argsort([len(s) for s in seqs], kind="stable")
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield idx, [seqs[i] for i in idx]


def positions_for(ids: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.arange(ids.shape[1]), ids.shape).copy()


def flat_rows(lengths: np.ndarray, width: int, offset: int = 0) -> np.ndarray:
    """Row indices into a flattened ``[B*width]`` axis for every real position."""
    return np.concatenate([b * width + offset + np.arange(n) for b, n in enumerate(lengths)]) \
        if len(lengths) else np.zeros(0, dtype=np.int64)


def last_rows(lengths: np.ndarray, width: int, offset: int = 0) -> np.ndarray:
    return np.arange(len(lengths)) * width + offset + lengths - 1


def sqrt_width(width: int) -> float:
    return math.sqrt(width)
