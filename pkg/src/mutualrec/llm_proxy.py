"""Frozen-backbone transformer recommender adapted through projections and low-rank adapters.

The token sequence is ``(bos, F[i_1], ..., F[i_t])`` with ``F = E @ W_in^T``
built from the CRM's item embeddings ``E``, which enter as a constant. Only
``W_in``, the q/v adapters, ``W_out`` and ``bos`` are trainable.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .autodiff import Adam, Tensor, backward, check_finite, checksum, no_grad, ops
from .autodiff.serialize import load_checkpoint, save_checkpoint
from .crm import PairBatch
from .distill import DistillContext, LossBreakdown, adaptive_weight_down, distillation_objective
from .errors import ContractError, DimensionError, FreezeViolation
from .layers import flat_rows, last_rows, pad_right

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LlmConfig:
    num_items: int
    item_dim: int = 64
    width: int = 128
    layers: int = 4
    heads: int = 4
    max_len: int = 50
    lora_rank: int = 8
    ffn_mult: int = 2

    @property
    def adapter_scale(self) -> float:
        # alpha = 2r
        return 2.0


def inject_embeddings(E, w_in) -> Tensor:
    """``F_proj = E @ W_in^T``: one ``D``-wide token row per item."""
    E = E if isinstance(E, Tensor) else Tensor(E)
    w_in = w_in if isinstance(w_in, Tensor) else Tensor(w_in)
    if E.data.ndim != 2 or w_in.data.ndim != 2 or w_in.shape[1] != E.shape[1]:
        raise DimensionError("inject_embeddings", E.shape, w_in.shape)
    return ops.linear(E, ops.transpose(w_in))


def init_backbone(config: LlmConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p = {"pos_emb": layers.normal(rng, (config.max_len + 1, config.width))}
    for layer in range(config.layers):
        p.update(layers.init_block(rng, f"block{layer}", config.width, config.ffn_mult))
    p["final_ln.g"] = np.ones(config.width)
    p["final_ln.b"] = np.zeros(config.width)
    return p


def init_trainable(config: LlmConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D, d, r = config.width, config.item_dim, config.lora_rank
    p = {
        "w_in": rng.normal(0.0, 1.0 / np.sqrt(d), size=(D, d)),
        "w_out": layers.normal(rng, (D, config.num_items)),
        "bos": layers.normal(rng, (D,)),
    }
    for layer in range(config.layers):
        for c in ("q", "v"):
            # A = 0 makes every adapter an exact no-op until trained
            p[f"lora{layer}.{c}.A"] = np.zeros((r, D))
            p[f"lora{layer}.{c}.B"] = rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, r))
    return p


def backbone_forward(tokens: Tensor, backbone, config: LlmConfig, lora=None) -> Tensor:
    """Run the causal stack over ``[B, T, D]`` tokens (positional rows added here)."""
    b, t, _ = tokens.shape
    pos = np.broadcast_to(np.arange(t), (b, t))
    x = ops.add(tokens, ops.embedding(backbone["pos_emb"], pos))
    for layer in range(config.layers):
        adapters = None
        if lora is not None:
            adapters = {c: (lora[f"lora{layer}.{c}.A"], lora[f"lora{layer}.{c}.B"]) for c in ("q", "v")}
        x = layers.block_forward(x, backbone, f"block{layer}", config.heads,
                                 adapters=adapters, adapter_scale=config.adapter_scale)
    return ops.layer_norm(x, backbone["final_ln.g"], backbone["final_ln.b"])


def _with_bos(bos: Tensor, item_tokens: Tensor) -> Tensor:
    b = item_tokens.shape[0]
    start = ops.embedding(ops.reshape(bos, (1, bos.shape[0])), np.zeros((b, 1), dtype=np.int64))
    return ops.concat([start, item_tokens], axis=1)


class LlmProxyModel:
    def __init__(self, config: LlmConfig, rng: np.random.Generator | None = None,
                 backbone: dict[str, np.ndarray] | None = None,
                 trainable: dict[str, np.ndarray] | None = None,
                 item_embeddings: np.ndarray | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        if backbone is None:
            backbone = init_backbone(config, rng)
        if trainable is None:
            trainable = init_trainable(config, rng)
        self.backbone = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=False) for k, v in backbone.items()}
        self.trainable = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in trainable.items()}
        self.item_embeddings = None
        if item_embeddings is not None:
            self.inject(item_embeddings)

    @property
    def lora(self):
        return {k: v for k, v in self.trainable.items() if k.startswith("lora")}

    # ------------------------------------------------------------ embedding refresh

    def inject(self, E: np.ndarray) -> None:
        """Snapshot the CRM item table; it stays constant until the next refresh."""
        E = np.array(E, dtype=np.float64)
        if E.shape != (self.config.num_items, self.config.item_dim):
            raise DimensionError("inject", E.shape, (self.config.num_items, self.config.item_dim))
        self.item_embeddings = E

    def projected(self) -> Tensor:
        if self.item_embeddings is None:
            raise ContractError("LLM proxy has no injected item embeddings")
        return inject_embeddings(Tensor(self.item_embeddings), self.trainable["w_in"])

    # ------------------------------------------------------------ forward

    def _check_ids(self, seqs):
        for s in seqs:
            if not 1 <= len(s) <= self.config.max_len:
                raise ContractError(f"sequence length {len(s)} outside [1, {self.config.max_len}]")
            if min(s) < 0 or max(s) >= self.config.num_items:
                raise ContractError(f"item id out of range [0, {self.config.num_items})")

    def hidden(self, ids: np.ndarray, use_adapters: bool = True) -> Tensor:
        tokens = _with_bos(self.trainable["bos"], ops.embedding(self.projected(), ids))
        return backbone_forward(tokens, self.backbone, self.config, self.lora if use_adapters else None)

    def logits_at(self, rows: Tensor) -> Tensor:
        return ops.linear(rows, self.trainable["w_out"])

    def pair_logits(self, batch: PairBatch) -> Tensor:
        self._check_ids(batch.inputs)
        ids, lengths = pad_right(batch.inputs)
        h = self.hidden(ids)
        b, t, w = h.shape
        # token 0 is bos, so item position j sits at token j + 1
        rows = ops.take_rows(ops.reshape(h, (b * t, w)), flat_rows(lengths, t, offset=1))
        return self.logits_at(rows)

    def score(self, seqs: list[list[int]], batch_size: int = 256, use_adapters: bool = True) -> np.ndarray:
        self._check_ids(seqs)
        out = np.empty((len(seqs), self.config.num_items))
        with no_grad():
            for idx, chunk in layers.length_sorted_chunks(seqs, batch_size):
                ids, lengths = pad_right(chunk)
                h = self.hidden(ids, use_adapters)
                b, t, w = h.shape
                rows = ops.take_rows(ops.reshape(h, (b * t, w)), last_rows(lengths, t, offset=1))
                out[idx] = self.logits_at(rows).data
        check_finite(out, "llm scores")
        return out

    def pair_scores(self, batch: PairBatch) -> np.ndarray:
        with no_grad():
            return self.pair_logits(batch).data

    def forward(self, sequence: list[int]) -> np.ndarray:
        return self.score([list(sequence)])[0]

    # ------------------------------------------------------------ state

    def backbone_state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.backbone.items()}

    def trainable_state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.trainable.items()}

    def load_trainable(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.trainable[k].data[...] = v

    def reset_adapters(self, rng: np.random.Generator) -> None:
        fresh = init_trainable(self.config, rng)
        self.load_trainable({k: v for k, v in fresh.items() if k.startswith("lora")})

    def backbone_checksum(self) -> str:
        return checksum({k: p.data for k, p in self.backbone.items()})

    def checksum(self) -> str:
        arrays = {f"backbone/{k}": p.data for k, p in self.backbone.items()}
        arrays.update({f"trainable/{k}": p.data for k, p in self.trainable.items()})
        if self.item_embeddings is not None:
            arrays["injected/item_emb"] = self.item_embeddings
        return checksum(arrays)

    def save(self, path) -> None:
        meta = {"kind": "llm", "config": asdict(self.config)}
        sections = {"backbone": self.backbone_state(), "trainable": self.trainable_state()}
        if self.item_embeddings is not None:
            sections["injected"] = {"item_emb": self.item_embeddings}
        save_checkpoint(path, sections, meta)
        with open(os.path.splitext(path)[0] + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "LlmProxyModel":
        sections, meta = load_checkpoint(path)
        if meta.get("kind") != "llm":
            raise ContractError(f"{path} is not an LLM proxy checkpoint")
        injected = sections.get("injected", {}).get("item_emb")
        return cls(LlmConfig(**meta["config"]), backbone=sections["backbone"],
                   trainable=sections["trainable"], item_embeddings=injected)


def llm_total_loss(model: LlmProxyModel, batch: PairBatch,
                   ctx: DistillContext | None = None) -> tuple[Tensor, LossBreakdown]:
    """Cross-entropy plus ``gamma * mean(w1 * KL(p_crm || p_llm))`` when a teacher is given."""
    if ctx is not None and ctx.teacher_scores.shape[-1] != model.config.num_items:
        raise ContractError(
            f"teacher score length {ctx.teacher_scores.shape[-1]} != catalog size {model.config.num_items}")
    logits = model.pair_logits(batch)
    check_finite(logits, "llm logits")
    return distillation_objective(logits, batch.targets, ctx, adaptive_weight_down)


def llm_train_step(model: LlmProxyModel, optimizer: Adam, batch: PairBatch,
                   ctx: DistillContext | None = None) -> LossBreakdown:
    loss, parts = llm_total_loss(model, batch, ctx)
    params = dict(model.trainable)
    params.update({f"backbone/{k}": v for k, v in model.backbone.items()})
    grads = backward(loss, params)
    leaked = [k for k in grads if k.startswith("backbone/")]
    if leaked:
        raise FreezeViolation(f"gradient produced for frozen backbone weights: {leaked[:5]}")
    optimizer.step(grads)
    return parts


def pretrain_backbone(config: LlmConfig, sequences: list[list[int]], rng: np.random.Generator,
                      epochs: int = 2, batch_size: int = 128, lr: float = 1e-3) -> dict[str, np.ndarray]:
    """Briefly fit a fresh backbone as a next-item predictor, then return its weights.

    The item table, start token and output head used here are throwaway.
    """
    backbone = {k: Tensor(v, requires_grad=True) for k, v in init_backbone(config, rng).items()}
    scratch = {
        "tok": Tensor(layers.normal(rng, (config.num_items, config.width), 0.1), requires_grad=True),
        "bos": Tensor(layers.normal(rng, (config.width,)), requires_grad=True),
        "head": Tensor(layers.normal(rng, (config.width, config.num_items)), requires_grad=True),
    }
    params = {**{f"backbone/{k}": v for k, v in backbone.items()}, **scratch}
    opt = Adam(params, lr=lr)
    usable = [s[-(config.max_len + 1):] for s in sequences if len(s) >= 2]
    for epoch in range(epochs):
        order = rng.permutation(len(usable))
        for start in range(0, len(order), batch_size):
            batch = PairBatch.from_sequences([usable[i] for i in order[start:start + batch_size]])
            ids, lengths = pad_right(batch.inputs)
            tokens = _with_bos(scratch["bos"], ops.embedding(scratch["tok"], ids))
            h = backbone_forward(tokens, backbone, config)
            b, t, w = h.shape
            rows = ops.take_rows(ops.reshape(h, (b * t, w)), flat_rows(lengths, t, offset=1))
            loss, _ = distillation_objective(ops.linear(rows, scratch["head"]), batch.targets, None, None)
            opt.step(backward(loss, params))
        log.info("backbone pretrain epoch %d loss %.4f", epoch + 1, float(loss.data))
    return {k: v.data.copy() for k, v in backbone.items()}
