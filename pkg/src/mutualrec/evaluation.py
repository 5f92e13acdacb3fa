"""Leave-one-out ranking evaluation (HR@K, NDCG@K) and report export."""

from __future__ import annotations

import csv
import json
import math
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import SequenceDataset
from .distill import target_rank
from .errors import ArtifactIOError, ContractError

DEFAULT_KS = (5, 10, 20)
METRICS = ("HR", "NDCG")
CSV_COLUMNS = ("model", "split", "round", "metric", "K", "value")

ScoreFn = Callable[[list[list[int]]], np.ndarray]


def hr_at_k(rank: int, k: int) -> int:
    return 1 if rank <= k else 0


def ndcg_at_k(rank: int, k: int) -> float:
    # a single relevant item has ideal DCG 1
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class MetricsReport:
    model: str
    split: str
    users: int
    policy: str
    metrics: dict[str, dict[int, float]]
    round: int | None = None
    extra: dict = field(default_factory=dict)

    def value(self, metric: str, k: int) -> float:
        return self.metrics[metric][k]

    @property
    def ks(self) -> list[int]:
        return sorted(self.metrics["HR"])

    def to_dict(self) -> dict:
        return {
            "model": self.model, "split": self.split, "round": self.round, "users": self.users,
            "policy": self.policy,
            "metrics": {m: {str(k): v for k, v in sorted(vals.items())} for m, vals in self.metrics.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        metrics = {m: {int(k): float(v) for k, v in vals.items()} for m, vals in d["metrics"].items()}
        return cls(d["model"], d["split"], int(d["users"]), d["policy"], metrics, d.get("round"))


def parse_policy(policy: str) -> tuple[str, int | None]:
    if policy in ("full-catalog", "mask-train"):
        return policy, None
    m = re.fullmatch(r"sampled-(\d+)", policy)
    if m and int(m.group(1)) > 0:
        return "sampled", int(m.group(1))
    raise ContractError(f"unknown candidate policy {policy!r} (full-catalog, mask-train, sampled-N)")


def apply_policy(scores: np.ndarray, prefixes: Sequence[Sequence[int]], targets: np.ndarray,
                 policy: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Return a copy of ``scores`` with non-candidates set to ``-inf``."""
    kind, n_neg = parse_policy(policy)
    out = np.array(scores, dtype=np.float64, copy=True)
    n_items = out.shape[1]
    if kind == "mask-train":
        for row, (prefix, tgt) in enumerate(zip(prefixes, targets)):
            seen = [i for i in set(prefix) if i != tgt]
            out[row, seen] = -np.inf
    elif kind == "sampled":
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = np.zeros_like(out, dtype=bool)
        for row, tgt in enumerate(targets):
            pool = np.delete(np.arange(n_items), tgt)
            negs = rng.choice(pool, size=min(n_neg, pool.size), replace=False)
            keep[row, negs] = True
            keep[row, tgt] = True
        out[~keep] = -np.inf
    return out


def ranks_for(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    rows = np.arange(len(targets))
    if np.any(~np.isfinite(scores[rows, targets])):
        raise ContractError("candidate policy excluded the target item")
    return target_rank(scores, targets)


def metrics_from_ranks(ranks: Iterable[int], ks: Sequence[int] = DEFAULT_KS) -> dict[str, dict[int, float]]:
    ranks = [int(r) for r in ranks]
    n = len(ranks)
    if n == 0:
        raise ContractError("no users to evaluate")
    # integer hit counts and fsum make the result independent of user order
    return {
        "HR": {k: sum(hr_at_k(r, k) for r in ranks) / n for k in ks},
        "NDCG": {k: math.fsum(ndcg_at_k(r, k) for r in ranks) / n for k in ks},
    }


def evaluate(score_fn: ScoreFn, dataset: SequenceDataset, split: str, ks: Sequence[int] = DEFAULT_KS,
             policy: str = "full-catalog", model: str = "model", round: int | None = None,
             rng: np.random.Generator | None = None) -> MetricsReport:
    users, prefixes, targets = dataset.eval_examples(split)
    if len(users) == 0:
        raise ContractError(f"split {split!r} has no evaluable users")
    scores = np.asarray(score_fn(prefixes), dtype=np.float64)
    if scores.shape != (len(users), dataset.num_items):
        raise ContractError(f"scorer returned shape {scores.shape}, expected {(len(users), dataset.num_items)}")
    scores = apply_policy(scores, prefixes, targets, policy, rng)
    ranks = ranks_for(scores, targets)
    return MetricsReport(model, split, int(len(users)), policy, metrics_from_ranks(ranks, ks), round)


def format_metric_row(metric: str, k: int, value: float) -> str:
    """One row in the style of a results table, e.g. ``HR@10 0.0504``."""
    return f"{metric}@{k} {value:.4f}"


def format_report(report: MetricsReport) -> str:
    head = f"[{report.model} | {report.split} | round {report.round} | {report.policy} | {report.users} users]"
    rows = [format_metric_row(m, k, report.metrics[m][k]) for m in METRICS for k in report.ks]
    return "\n".join([head] + rows)


def _report_rows(reports: Sequence[MetricsReport]):
    rows = []
    for r in reports:
        for metric in METRICS:
            for k, v in r.metrics[metric].items():
                rows.append((r.model, r.split, "" if r.round is None else r.round, metric, k, v))
    rows.sort(key=lambda x: (x[0], -1 if x[2] == "" else x[2], x[3], x[4], x[1]))
    return rows


def export_report(reports: Sequence[MetricsReport], path, fmt: str = "csv") -> None:
    if fmt not in ("csv", "json"):
        raise ContractError(f"unknown report format {fmt!r}")
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        with open(path, "w", newline="") as fh:
            if fmt == "json":
                ordered = sorted(reports, key=lambda r: (r.model, -1 if r.round is None else r.round, r.split))
                json.dump([r.to_dict() for r in ordered], fh, indent=2, sort_keys=True)
                fh.write("\n")
                return
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for model, split, rnd, metric, k, v in _report_rows(reports):
                writer.writerow([model, split, rnd, metric, k, f"{v:.6f}"])
    except OSError as exc:
        raise ArtifactIOError(f"cannot write report {path}: {exc}") from exc


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["K"] = int(r["K"])
        r["value"] = float(r["value"])
        r["round"] = int(r["round"]) if r["round"] != "" else None
    return rows


def load_reports(path) -> list[MetricsReport]:
    with open(path) as fh:
        return [MetricsReport.from_dict(d) for d in json.load(fh)]


def export_curves(reports: Sequence[MetricsReport], path, split: str = "test") -> None:
    """Wide per-round table (one row per model/round) for plotting metric trends."""
    chosen = sorted((r for r in reports if r.split == split and r.round is not None),
                    key=lambda r: (r.model, r.round))
    if chosen:
        cols = [f"{m}@{k}" for m in METRICS for k in chosen[0].ks]
    else:
        cols = [f"{m}@{k}" for m in METRICS for k in DEFAULT_KS]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "round", *cols])
        for r in chosen:
            vals = [r.metrics[c.split("@")[0]][int(c.split("@")[1])] for c in cols]
            writer.writerow([r.model, r.round, *(f"{v:.6f}" for v in vals)])
