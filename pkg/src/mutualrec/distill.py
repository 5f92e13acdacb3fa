"""Temperature softening, KL matching and rank-based sample weights.

Both transfer directions share the same machinery: the teacher's scores are
softened into a fixed target distribution, the student's softened log-probs
stay on the graph, and each sample's KL term is scaled by a weight derived
from where each model ranks the ground-truth item.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.ops import _stable_softmax
from .errors import ContractError, DimensionError

WEIGHT_MIN = 0.0
WEIGHT_MAX = 2.0


@dataclass(frozen=True)
class SoftDistribution:
    probs: np.ndarray
    temperature: float


def _check_temperature(T: float) -> None:
    if not (0.0 < T <= 1.0):
        raise ContractError(f"temperature must lie in (0, 1], got {T}")


def soften(scores, T: float) -> SoftDistribution:
    """``Softmax(scores / T)`` along the last axis, max-shifted."""
    _check_temperature(T)
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ContractError("soften: scores must be finite")
    return SoftDistribution(_stable_softmax(s / T), float(T))


def _xlogx(p: np.ndarray) -> np.ndarray:
    safe = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * np.log(safe), 0.0)


def kl_loss(teacher: SoftDistribution, student: SoftDistribution) -> np.ndarray | float:
    """KL(teacher || student) in nats, per row; a float for 1-D inputs."""
    t, s = teacher.probs, student.probs
    if t.shape != s.shape:
        raise DimensionError("kl_loss", t.shape, s.shape)
    with np.errstate(divide="ignore"):
        log_s = np.log(s)
    cross = np.where(t > 0, t * np.where(t > 0, log_s, 0.0), 0.0)
    kl = (_xlogx(t) - cross).sum(axis=-1)
    return float(kl) if kl.ndim == 0 else kl


def kl_per_sample(teacher_probs: np.ndarray, student_logits: Tensor, T: float) -> Tensor:
    """Differentiable ``KL(teacher || Softmax(student_logits / T))`` per row.

    The teacher enters as a constant, so no gradient reaches it. The
    gradient w.r.t. the student logits is ``(softmax(z/T) - teacher) / T``.
    """
    _check_temperature(T)
    t = np.asarray(teacher_probs, dtype=np.float64)
    if t.shape != student_logits.shape or t.ndim != 2:
        raise DimensionError("kl_per_sample", t.shape, student_logits.shape)
    entropy_term = _xlogx(t).sum(axis=-1)
    log_s = ops.log_softmax(ops.scale(student_logits, 1.0 / T))
    cross = ops.sum(ops.mul(log_s, Tensor(t)), axis=-1)
    return ops.sub(Tensor(entropy_term), cross)


def target_rank(scores, target) -> np.ndarray | int:
    """Competition rank of the target item, ties broken by ascending item index.

    Accepts one score vector with an int target, or a ``[N, |I|]`` matrix with
    a length-``N`` target array.
    """
    s = np.asarray(scores)
    tgt = np.asarray(target)
    single = s.ndim == 1
    if single:
        s, tgt = s[None, :], tgt.reshape(1)
    n_items = s.shape[1]
    if np.any(tgt < 0) or np.any(tgt >= n_items):
        raise ContractError("target_rank: target index out of range")
    ts = s[np.arange(s.shape[0]), tgt][:, None]
    greater = (s > ts).sum(axis=1)
    tied_before = ((s == ts) & (np.arange(n_items)[None, :] < tgt[:, None])).sum(axis=1)
    ranks = 1 + greater + tied_before
    return int(ranks[0]) if single else ranks.astype(np.int64)


def _rank_weight(worse_if_greater, other):
    # worse_if_greater: rank of the model whose relative weakness raises the weight
    a = np.asarray(worse_if_greater, dtype=np.float64)
    b = np.asarray(other, dtype=np.float64)
    up = 1.0 + (a - b) / np.maximum(b, 1.0)
    down = 1.0 - (b - a) / np.maximum(a, 1.0)
    w = np.clip(np.where(a > b, up, down), WEIGHT_MIN, WEIGHT_MAX)
    return float(w) if w.ndim == 0 else w


def adaptive_weight_down(r_l, r_c):
    """Weight on the CRM -> LLM KL term: grows when the LLM ranks the target worse."""
    return _rank_weight(r_l, r_c)


def adaptive_weight_up(r_c, r_l):
    """Weight on the LLM -> CRM KL term: grows when the CRM ranks the target worse."""
    return _rank_weight(r_c, r_l)


@dataclass(frozen=True)
class DistillContext:
    """Teacher signal for one training batch.

    ``teacher_scores`` are raw logits aligned row-for-row with the student's
    training pairs; ``coef`` is the balancing coefficient on the KL term.
    """

    teacher_scores: np.ndarray
    temperature: float
    coef: float
    use_weights: bool = True


@dataclass
class LossBreakdown:
    total: float
    rec: float
    kl: float
    mean_weight: float
    pairs: int


def cross_entropy_per_sample(logits: Tensor, targets: np.ndarray) -> Tensor:
    return ops.scale(ops.pick(ops.log_softmax(logits), targets), -1.0)


def distillation_objective(student_logits: Tensor, targets: np.ndarray, ctx: DistillContext | None,
                           weight_fn) -> tuple[Tensor, LossBreakdown]:
    """``mean(CE) + coef * mean(w * KL(teacher_T || student_T))``.

    ``weight_fn(student_rank, teacher_rank)`` gives the per-sample weight;
    when ``ctx.use_weights`` is false every weight is 1. A zero coefficient
    leaves the KL term off the graph entirely.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n = targets.shape[0]
    if n == 0:
        raise ContractError("empty training batch")
    rec = ops.mean(cross_entropy_per_sample(student_logits, targets))
    if ctx is None:
        return rec, LossBreakdown(float(rec.data), float(rec.data), 0.0, 0.0, n)
    teacher = np.asarray(ctx.teacher_scores, dtype=np.float64)
    if teacher.shape != student_logits.shape:
        raise ContractError(
            f"teacher scores shape {teacher.shape} does not match student logits {student_logits.shape}")
    if ctx.use_weights:
        w = np.asarray(weight_fn(target_rank(student_logits.data, targets), target_rank(teacher, targets)),
                       dtype=np.float64)
    else:
        w = np.ones(n)
    t_probs = soften(teacher, ctx.temperature).probs
    kl = kl_per_sample(t_probs, student_logits, ctx.temperature)
    weighted = ops.mean(ops.mul(kl, Tensor(w)))
    if ctx.coef == 0.0:
        total = rec
    else:
        total = ops.add(rec, ops.scale(weighted, ctx.coef))
    return total, LossBreakdown(float(total.data), float(rec.data), float(kl.data.mean()),
                                float(w.mean()), n)
