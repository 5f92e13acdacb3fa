"""Alternating mutual distillation between the CRM and the LLM proxy.

Round ``t`` (0-based in the loop, reported as ``t + 1``) refreshes the
projected item table, fine-tunes the LLM proxy against the frozen CRM, then
trains the CRM against the frozen LLM proxy. Every phase early-stops on
validation NDCG@10 and keeps its best-validation state.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Adam, backward
from .crm import CrmConfig, CrmModel, PairBatch, crm_total_loss
from .data import SequenceDataset
from .distill import DistillContext, LossBreakdown
from .errors import ConfigError, ContractError, FreezeViolation, NumericError
from .evaluation import evaluate
from .llm_proxy import LlmConfig, LlmProxyModel, llm_total_loss, pretrain_backbone

log = logging.getLogger(__name__)

EARLY_STOP_K = 10


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named purpose, all derived from one root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class DistillConfig:
    t1: float = 0.6
    t2: float = 0.2
    gamma: float = 1.0
    beta: float = 0.5
    t_max: int = 2
    use_loop: bool = True
    use_weights: bool = True
    refresh_embeddings: bool = True
    reset_adapters: bool = False
    patience: int = 3
    max_epochs_per_phase: int = 20
    batch_size: int = 128
    lr: float = 3e-4
    pretrain_batch_size: int = 256
    pretrain_lr: float = 1e-3
    pretrain_max_epochs: int = 200
    seed: int = 0

    def validate(self) -> None:
        problems = []
        for name in ("t1", "t2"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                problems.append(f"distill.{name} must lie in (0, 1], got {v}")
        for name in ("gamma", "beta", "lr", "pretrain_lr"):
            if getattr(self, name) < 0:
                problems.append(f"distill.{name} must be >= 0")
        if self.t_max < 0:
            problems.append("distill.t_max must be >= 0")
        if self.patience < 1:
            problems.append("distill.patience must be >= 1")
        for name in ("max_epochs_per_phase", "pretrain_max_epochs", "batch_size", "pretrain_batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"distill.{name} must be >= 1")
        if problems:
            raise ConfigError(problems)


@dataclass
class PhaseRecord:
    round: int
    phase: str
    epochs_run: int
    best_epoch: int
    best_valid: float
    seconds: float
    train_loss: list[float] = field(default_factory=list)
    valid_curve: list[float] = field(default_factory=list)
    mean_weight: list[float] = field(default_factory=list)
    frozen_checksums: dict[str, str] = field(default_factory=dict)

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("seconds")
        return d


@dataclass
class RoundHistory:
    records: list[PhaseRecord] = field(default_factory=list)

    @property
    def rounds(self) -> list[int]:
        return sorted({r.round for r in self.records if r.phase != "pretrain"})

    def phase(self, round: int, phase: str) -> PhaseRecord:
        for r in self.records:
            if r.round == round and r.phase == phase:
                return r
        raise KeyError((round, phase))

    def to_list(self, timing: bool = True) -> list[dict]:
        return [r.to_dict(timing) for r in self.records]


# ---------------------------------------------------------------- batching


def epoch_batches(sequences: list[list[int]], batch_size: int, rng: np.random.Generator,
                  bucket: int = 4) -> list[PairBatch]:
    """Shuffle users, sort within windows of ``bucket`` batches by length, shuffle batch order."""
    usable = [i for i, s in enumerate(sequences) if len(s) >= 2]
    order = [usable[i] for i in rng.permutation(len(usable))]
    groups = []
    window = batch_size * bucket
    for start in range(0, len(order), window):
        chunk = sorted(order[start:start + window], key=lambda u: len(sequences[u]))
        groups.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    perm = rng.permutation(len(groups))
    return [PairBatch.from_sequences([sequences[u] for u in groups[g]]) for g in perm]


def valid_ndcg(score_fn, dataset: SequenceDataset) -> float:
    return evaluate(score_fn, dataset, "valid", ks=(EARLY_STOP_K,)).value("NDCG", EARLY_STOP_K)


# ---------------------------------------------------------------- generic phase runner


@dataclass
class _PhaseState:
    best: float = -np.inf
    best_epoch: int = 0
    best_state: dict | None = None


def _fit(record: PhaseRecord, run_epoch: Callable[[int], tuple[float, float]], score: Callable[[], float],
         get_state: Callable[[], dict], set_state: Callable[[dict], None], max_epochs: int, patience: int,
         include_initial: bool, freeze_check: Callable[[], None] | None = None) -> PhaseRecord:
    start = time.perf_counter()
    st = _PhaseState()
    if include_initial:
        st.best = score()
        st.best_state = get_state()
        record.valid_curve.append(st.best)
    stale = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        loss, weight = run_epoch(epoch)
        if freeze_check is not None:
            freeze_check()
        metric = score()
        record.train_loss.append(loss)
        record.mean_weight.append(weight)
        record.valid_curve.append(metric)
        if metric > st.best:
            st.best, st.best_epoch, st.best_state = metric, epoch, get_state()
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    set_state(st.best_state)
    record.epochs_run = epoch
    record.best_epoch = st.best_epoch
    record.best_valid = float(st.best)
    record.seconds = time.perf_counter() - start
    return record


def _mean_parts(parts: list[LossBreakdown]) -> tuple[float, float]:
    n = sum(p.pairs for p in parts)
    loss = sum(p.total * p.pairs for p in parts) / n
    weight = sum(p.mean_weight * p.pairs for p in parts) / n
    return float(loss), float(weight)


def _check_parts(parts: LossBreakdown, phase: str, step: int) -> None:
    for term in ("rec", "kl", "total"):
        if not np.isfinite(getattr(parts, term)):
            raise NumericError(f"{phase}: non-finite {term} loss at step {step}")


# ---------------------------------------------------------------- pretraining


def pretrain_crm(dataset: SequenceDataset, config: DistillConfig, crm_config: CrmConfig | None = None,
                 crm: CrmModel | None = None) -> tuple[CrmModel, PhaseRecord]:
    """Fit the CRM on next-item cross-entropy alone; returns the best-validation state."""
    config.validate()
    if dataset.eval_users("valid").size == 0:
        raise ConfigError("validation split is empty; cannot early-stop pretraining")
    if crm is None:
        crm_config = crm_config or CrmConfig(num_items=dataset.num_items, max_len=dataset.max_len)
        crm = CrmModel(crm_config, stream(config.seed, "crm-init"))
    opt = Adam(crm.params, lr=config.pretrain_lr)
    shuffle = stream(config.seed, "shuffle/pretrain")
    drop = stream(config.seed, "dropout/pretrain")
    record = PhaseRecord(0, "pretrain", 0, 0, 0.0, 0.0)
    step = 0

    def run_epoch(epoch):
        nonlocal step
        parts = []
        for batch in epoch_batches(dataset.train, config.pretrain_batch_size, shuffle):
            loss, p = crm_total_loss(crm, batch, None, drop)
            step += 1
            _check_parts(p, "pretrain", step)
            opt.step(backward(loss, crm.params))
            parts.append(p)
        return _mean_parts(parts)

    _fit(record, run_epoch, lambda: valid_ndcg(crm.score, dataset), crm.state, crm.load_state,
         config.pretrain_max_epochs, config.patience, include_initial=False)
    log.info("pretrain: %d epochs, best valid NDCG@10 %.4f (epoch %d)",
             record.epochs_run, record.best_valid, record.best_epoch)
    return crm, record


def init_llm_proxy(dataset: SequenceDataset, crm: CrmModel, llm_config: LlmConfig | None = None,
                   seed: int = 0, pretrain: bool = True, pretrain_epochs: int = 2) -> LlmProxyModel:
    """Build the proxy: optionally pre-fit its backbone, then freeze it; fresh projections/adapters."""
    llm_config = llm_config or LlmConfig(num_items=dataset.num_items, item_dim=crm.config.dim,
                                         max_len=dataset.max_len)
    backbone = None
    if pretrain:
        backbone = pretrain_backbone(llm_config, dataset.train, stream(seed, "backbone-pretrain"),
                                     epochs=pretrain_epochs)
    return LlmProxyModel(llm_config, stream(seed, "llm-init"), backbone=backbone)


# ---------------------------------------------------------------- distillation phases


def train_llm_phase(llm: LlmProxyModel, crm: CrmModel, dataset: SequenceDataset, config: DistillConfig,
                    round: int, gamma: float | None = None) -> PhaseRecord:
    """Step 2: CRM frozen as teacher; only the proxy's trainable parts move."""
    gamma = config.gamma if gamma is None else gamma
    opt = Adam(llm.trainable, lr=config.lr)
    shuffle = stream(config.seed, f"shuffle/round{round}/llm")
    crm_sum = crm.checksum()
    backbone_sum = llm.backbone_checksum()
    record = PhaseRecord(round, "llm", 0, 0, 0.0, 0.0,
                         frozen_checksums={"crm": crm_sum, "llm_backbone": backbone_sum})
    step = 0

    def run_epoch(epoch):
        nonlocal step
        parts = []
        for batch in epoch_batches(dataset.train, config.batch_size, shuffle):
            ctx = DistillContext(crm.pair_scores(batch), config.t1, gamma, config.use_weights)
            loss, p = llm_total_loss(llm, batch, ctx)
            step += 1
            _check_parts(p, f"round {round} llm phase", step)
            grads = backward(loss, {**llm.trainable, **{f"backbone/{k}": v for k, v in llm.backbone.items()}})
            if any(k.startswith("backbone/") for k in grads):
                raise FreezeViolation("gradient reached the frozen backbone")
            opt.step(grads)
            parts.append(p)
        return _mean_parts(parts)

    def freeze_check():
        if crm.checksum() != crm_sum:
            raise FreezeViolation(f"round {round}: CRM changed during LLM phase")
        if llm.backbone_checksum() != backbone_sum:
            raise FreezeViolation(f"round {round}: LLM backbone changed during fine-tuning")

    _fit(record, run_epoch, lambda: valid_ndcg(llm.score, dataset), llm.trainable_state, llm.load_trainable,
         config.max_epochs_per_phase, config.patience, include_initial=True, freeze_check=freeze_check)
    log.info("round %d llm: %d epochs, best valid NDCG@10 %.4f (epoch %d)",
             round, record.epochs_run, record.best_valid, record.best_epoch)
    return record


def train_crm_phase(crm: CrmModel, llm: LlmProxyModel, dataset: SequenceDataset, config: DistillConfig,
                    round: int) -> PhaseRecord:
    """Step 3: LLM proxy frozen as teacher; every CRM parameter (including E) trains."""
    opt = Adam(crm.params, lr=config.lr)
    shuffle = stream(config.seed, f"shuffle/round{round}/crm")
    drop = stream(config.seed, f"dropout/round{round}/crm")
    llm_sum = llm.checksum()
    record = PhaseRecord(round, "crm", 0, 0, 0.0, 0.0, frozen_checksums={"llm": llm_sum})
    step = 0

    def run_epoch(epoch):
        nonlocal step
        parts = []
        for batch in epoch_batches(dataset.train, config.batch_size, shuffle):
            ctx = DistillContext(llm.pair_scores(batch), config.t2, config.beta, config.use_weights)
            loss, p = crm_total_loss(crm, batch, ctx, drop)
            step += 1
            _check_parts(p, f"round {round} crm phase", step)
            opt.step(backward(loss, crm.params))
            parts.append(p)
        return _mean_parts(parts)

    def freeze_check():
        if llm.checksum() != llm_sum:
            raise FreezeViolation(f"round {round}: LLM proxy changed during CRM phase")

    _fit(record, run_epoch, lambda: valid_ndcg(crm.score, dataset), crm.state, crm.load_state,
         config.max_epochs_per_phase, config.patience, include_initial=True, freeze_check=freeze_check)
    log.info("round %d crm: %d epochs, best valid NDCG@10 %.4f (epoch %d)",
             round, record.epochs_run, record.best_valid, record.best_epoch)
    return record


PhaseHook = Callable[[int, str, CrmModel, LlmProxyModel], None]


def mutual_distill(crm: CrmModel, dataset: SequenceDataset, config: DistillConfig,
                   llm: LlmProxyModel | None = None, on_phase_end: PhaseHook | None = None,
                   llm_config: LlmConfig | None = None, pretrain_backbone_flag: bool = True
                   ) -> tuple[CrmModel, LlmProxyModel, RoundHistory]:
    """Run the alternating loop; rounds are labelled 1..t_max+1 (round 0 is pretraining)."""
    config.validate()
    if llm is None:
        llm = init_llm_proxy(dataset, crm, llm_config, config.seed, pretrain_backbone_flag)
    if llm.config.num_items != crm.config.num_items or llm.config.item_dim != crm.config.dim:
        raise ContractError("CRM and LLM proxy disagree on catalog size or embedding width")
    history = RoundHistory()
    last = config.t_max if config.use_loop else 0
    for t in range(last + 1):
        rnd = t + 1
        if t == 0 or config.refresh_embeddings:
            llm.inject(crm.item_embeddings)
        if t > 0 and config.reset_adapters:
            llm.reset_adapters(stream(config.seed, f"adapter-reset/round{rnd}"))
        history.records.append(train_llm_phase(llm, crm, dataset, config, rnd))
        if on_phase_end:
            on_phase_end(rnd, "llm", crm, llm)
        history.records.append(train_crm_phase(crm, llm, dataset, config, rnd))
        if on_phase_end:
            on_phase_end(rnd, "crm", crm, llm)
    return crm, llm, history
