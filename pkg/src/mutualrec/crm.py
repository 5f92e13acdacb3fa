"""Self-attentive sequential recommender with a tied dot-product head."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .autodiff import Adam, Tensor, backward, check_finite, checksum, no_grad, ops
from .autodiff.serialize import load_checkpoint, save_checkpoint
from .distill import DistillContext, LossBreakdown, adaptive_weight_up, distillation_objective
from .errors import ContractError
from .layers import flat_rows, last_rows, pad_right


@dataclass(frozen=True)
class CrmConfig:
    num_items: int
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 50
    dropout: float = 0.2
    ffn_mult: int = 1


@dataclass
class PairBatch:
    """Training prefixes for a batch of users, expanded to next-item pairs.

    ``inputs[b]`` is ``seq[:-1]``; the pair order is row-major over
    (user, position), matching :func:`layers.flat_rows`.
    """

    inputs: list[list[int]]
    targets: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: list[list[int]]) -> "PairBatch":
        seqs = [s for s in seqs if len(s) >= 2]
        inputs = [list(s[:-1]) for s in seqs]
        targets = np.array([t for s in seqs for t in s[1:]], dtype=np.int64)
        return cls(inputs, targets)

    def __len__(self):
        return int(self.targets.shape[0])


class CrmModel:
    def __init__(self, config: CrmConfig, rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        if params is None:
            params = self._init_params(rng if rng is not None else np.random.default_rng(0))
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}

    def _init_params(self, rng):
        c = self.config
        p = {
            "item_emb": layers.normal(rng, (c.num_items, c.dim)),
            "pos_emb": layers.normal(rng, (c.max_len, c.dim)),
        }
        for layer in range(c.layers):
            p.update(layers.init_block(rng, f"block{layer}", c.dim, c.ffn_mult))
        p["final_ln.g"] = np.ones(c.dim)
        p["final_ln.b"] = np.zeros(c.dim)
        return p

    # ------------------------------------------------------------ forward

    def _check_ids(self, seqs):
        for s in seqs:
            if not 1 <= len(s) <= self.config.max_len:
                raise ContractError(f"sequence length {len(s)} outside [1, {self.config.max_len}]")
            if min(s) < 0 or max(s) >= self.config.num_items:
                raise ContractError(f"item id out of range [0, {self.config.num_items})")

    def encode(self, ids: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        """Hidden states ``[B, T, d]``; dropout is active only when ``rng`` is given."""
        c, P = self.config, self.params
        x = ops.scale(ops.embedding(P["item_emb"], ids), math.sqrt(c.dim))
        x = ops.add(x, ops.embedding(P["pos_emb"], layers.positions_for(ids)))
        x = ops.dropout(x, c.dropout, rng)
        for layer in range(c.layers):
            x = layers.block_forward(x, P, f"block{layer}", c.heads, c.dropout, rng)
        return ops.layer_norm(x, P["final_ln.g"], P["final_ln.b"])

    def logits_at(self, hidden_rows: Tensor) -> Tensor:
        return ops.linear(hidden_rows, ops.transpose(self.params["item_emb"]))

    def pair_logits(self, batch: PairBatch, rng: np.random.Generator | None = None) -> Tensor:
        self._check_ids(batch.inputs)
        ids, lengths = pad_right(batch.inputs)
        h = self.encode(ids, rng)
        b, t, d = h.shape
        rows = ops.take_rows(ops.reshape(h, (b * t, d)), flat_rows(lengths, t))
        return self.logits_at(rows)

    def score(self, seqs: list[list[int]], batch_size: int = 256) -> np.ndarray:
        """Full-catalog logits for the last position of each sequence (eval mode)."""
        self._check_ids(seqs)
        out = np.empty((len(seqs), self.config.num_items))
        with no_grad():
            for idx, chunk in layers.length_sorted_chunks(seqs, batch_size):
                ids, lengths = pad_right(chunk)
                h = self.encode(ids)
                b, t, d = h.shape
                rows = ops.take_rows(ops.reshape(h, (b * t, d)), last_rows(lengths, t))
                out[idx] = self.logits_at(rows).data
        check_finite(out, "crm scores")
        return out

    def pair_scores(self, batch: PairBatch) -> np.ndarray:
        """Eval-mode logits for every pair in ``batch`` (used as teacher signal)."""
        with no_grad():
            return self.pair_logits(batch).data

    def forward(self, sequence: list[int]) -> np.ndarray:
        return self.score([list(sequence)])[0]

    # ------------------------------------------------------------ state

    @property
    def item_embeddings(self) -> np.ndarray:
        return self.params["item_emb"].data

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def checksum(self) -> str:
        return checksum({k: p.data for k, p in self.params.items()})

    def save(self, path) -> None:
        meta = {"kind": "crm", "config": asdict(self.config)}
        save_checkpoint(path, {"crm": self.state()}, meta)
        with open(os.path.splitext(path)[0] + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "CrmModel":
        sections, meta = load_checkpoint(path)
        if meta.get("kind") != "crm":
            raise ContractError(f"{path} is not a CRM checkpoint")
        return cls(CrmConfig(**meta["config"]), params=sections["crm"])


def crm_rec_loss(model: CrmModel, batch: PairBatch, rng=None) -> Tensor:
    total, _ = distillation_objective(model.pair_logits(batch, rng), batch.targets, None, adaptive_weight_up)
    return total


def crm_total_loss(model: CrmModel, batch: PairBatch, ctx: DistillContext | None = None,
                   rng=None) -> tuple[Tensor, LossBreakdown]:
    """Recommendation CE plus ``beta * mean(w2 * KL(p_llm || p_crm))`` when a teacher is given."""
    if ctx is not None and ctx.teacher_scores.shape[-1] != model.config.num_items:
        raise ContractError(
            f"teacher score length {ctx.teacher_scores.shape[-1]} != catalog size {model.config.num_items}")
    logits = model.pair_logits(batch, rng)
    check_finite(logits, "crm logits")
    return distillation_objective(logits, batch.targets, ctx, adaptive_weight_up)


def crm_train_step(model: CrmModel, optimizer: Adam, batch: PairBatch, ctx: DistillContext | None = None,
                   rng=None) -> LossBreakdown:
    loss, parts = crm_total_loss(model, batch, ctx, rng)
    optimizer.step(backward(loss, model.params))
    return parts
