"""Interaction ingestion, k-core filtering, leave-one-out splits, synthetic logs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ArtifactIOError, ContractError, FilterError, IngestionError

log = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 50


@dataclass
class InteractionLog:
    """Deduplicated (user, item, timestamp) records in input order.

    ``users`` and ``items`` list external ids by contiguous index (first-seen
    order); ``user_index`` / ``item_index`` are the inverse maps.
    """

    records: list[tuple[str, str, int]]
    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)
    skipped: int = 0

    def __post_init__(self):
        if not self.users and self.records:
            self._reindex()

    def _reindex(self):
        users, items = {}, {}
        for u, i, _ in self.records:
            users.setdefault(u, len(users))
            items.setdefault(i, len(items))
        self.users = list(users)
        self.items = list(items)

    @property
    def user_index(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.users)}

    @property
    def item_index(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.items)}

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_items(self) -> int:
        return len(self.items)

    def __len__(self):
        return len(self.records)


def parse_interactions(path, fmt: str = "csv", has_header: bool = False,
                      min_timestamp: int | None = None) -> InteractionLog:
    """Read ``user,item,timestamp`` rows (``fmt`` is ``csv`` or ``tsv``).

    Malformed rows are skipped and counted. Rows older than ``min_timestamp``
    are dropped silently; they are not malformed.
    """
    delimiter = {"csv": ",", "tsv": "\t"}.get(fmt)
    if delimiter is None:
        raise ContractError(f"unknown interaction format {fmt!r}")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh, delimiter=delimiter))
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if has_header and rows:
        rows = rows[1:]
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise IngestionError(f"{path}: no interaction rows")

    seen = set()
    records = []
    skipped = 0
    for row in rows:
        if len(row) != 3 or not row[0].strip() or not row[1].strip():
            skipped += 1
            continue
        try:
            ts = int(row[2].strip())
        except ValueError:
            skipped += 1
            continue
        if min_timestamp is not None and ts < min_timestamp:
            continue
        rec = (row[0].strip(), row[1].strip(), ts)
        if rec in seen:
            continue
        seen.add(rec)
        records.append(rec)
    if skipped * 2 > len(rows):
        raise IngestionError(
            f"{path}: {skipped} of {len(rows)} rows unparseable; expected user{delimiter}item{delimiter}timestamp")
    if skipped:
        log.warning("skipped %d malformed rows in %s", skipped, path)
    if not records:
        raise IngestionError(f"{path}: no records left after filtering")
    return InteractionLog(records, skipped=skipped)


def write_interactions(interactions: InteractionLog, path, fmt: str = "csv") -> None:
    delimiter = "," if fmt == "csv" else "\t"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerows(interactions.records)


def k_core_filter(interactions: InteractionLog, k: int = 5, item_only: bool = False) -> InteractionLog:
    """Iteratively drop items (and, unless ``item_only``, users) with < k interactions."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    records = interactions.records
    while True:
        item_counts: dict[str, int] = {}
        user_counts: dict[str, int] = {}
        for u, i, _ in records:
            item_counts[i] = item_counts.get(i, 0) + 1
            user_counts[u] = user_counts.get(u, 0) + 1
        kept = [r for r in records
                if item_counts[r[1]] >= k and (item_only or user_counts[r[0]] >= k)]
        if len(kept) == len(records):
            break
        records = kept
        if item_only:
            # item-only filtering converges in one pass
            break
    if not records:
        raise FilterError(
            f"{k}-core filter removed everything (input: {interactions.num_users} users, "
            f"{interactions.num_items} items, {len(interactions)} interactions)")
    return InteractionLog(list(records), skipped=interactions.skipped)


@dataclass
class SequenceDataset:
    """Per-user chronological item sequences with leave-one-out targets.

    ``train[u]`` holds at most ``max_len`` of the most recent items before the
    validation target. ``valid_target[u]`` / ``test_target[u]`` are -1 for
    train-only users (fewer than 3 interactions).
    """

    num_items: int
    max_len: int
    train: list[list[int]]
    valid_target: np.ndarray
    test_target: np.ndarray
    item_ids: list[str] = field(default_factory=list)
    user_ids: list[str] = field(default_factory=list)

    @property
    def num_users(self) -> int:
        return len(self.train)

    def eval_users(self, split: str) -> np.ndarray:
        targets = self._targets(split)
        return np.flatnonzero(targets >= 0)

    def _targets(self, split):
        if split == "valid":
            return self.valid_target
        if split == "test":
            return self.test_target
        raise ContractError(f"unknown split {split!r}")

    def eval_prefix(self, user: int, split: str) -> list[int]:
        if split == "valid":
            return self.train[user]
        return (self.train[user] + [int(self.valid_target[user])])[-self.max_len:]

    def eval_examples(self, split: str) -> tuple[np.ndarray, list[list[int]], np.ndarray]:
        users = self.eval_users(split)
        targets = self._targets(split)
        return users, [self.eval_prefix(u, split) for u in users], targets[users]

    def full_sequence(self, user: int) -> list[int]:
        seq = list(self.train[user])
        if self.valid_target[user] >= 0:
            seq += [int(self.valid_target[user]), int(self.test_target[user])]
        return seq

    def num_train_pairs(self) -> int:
        return int(sum(max(len(s) - 1, 0) for s in self.train))


def split_sequences(sequences: list[list[int]], num_items: int, max_len: int = DEFAULT_MAX_LEN,
                    item_ids=None, user_ids=None) -> SequenceDataset:
    if max_len < 3:
        raise ContractError(f"max_len must be >= 3, got {max_len}")
    train, valid, test = [], [], []
    for seq in sequences:
        if len(seq) >= 3:
            train.append(list(seq[:-2])[-max_len:])
            valid.append(seq[-2])
            test.append(seq[-1])
        else:
            train.append(list(seq)[-max_len:])
            valid.append(-1)
            test.append(-1)
    return SequenceDataset(num_items, max_len, train, np.array(valid, dtype=np.int64),
                           np.array(test, dtype=np.int64), list(item_ids or []), list(user_ids or []))


def chronological_sequences(interactions: InteractionLog) -> list[list[int]]:
    uidx, iidx = interactions.user_index, interactions.item_index
    per_user: list[list[tuple[int, int]]] = [[] for _ in interactions.users]
    for u, i, ts in interactions.records:
        per_user[uidx[u]].append((ts, iidx[i]))
    # sorted() is stable: timestamp ties keep input order
    return [[item for _, item in sorted(events, key=lambda e: e[0])] for events in per_user]


def build_sequences(interactions: InteractionLog, max_len: int = DEFAULT_MAX_LEN) -> SequenceDataset:
    return split_sequences(chronological_sequences(interactions), interactions.num_items, max_len,
                           interactions.items, interactions.users)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 1000
    num_items: int = 200
    mean_length: int = 20
    markov_order: int = 1
    transition_sharpness: float = 2.0
    noise_rate: float = 0.2
    seed: int = 0

    def validate(self):
        problems = []
        if self.num_items < 10:
            problems.append("num_items must be >= 10")
        if self.mean_length < 5:
            problems.append("mean_length must be >= 5")
        if not 0.0 <= self.noise_rate <= 1.0:
            problems.append("noise_rate must lie in [0, 1]")
        if self.markov_order not in (1, 2):
            problems.append("markov_order must be 1 or 2")
        if self.transition_sharpness <= 0:
            problems.append("transition_sharpness must be > 0")
        if self.num_users < 1:
            problems.append("num_users must be >= 1")
        if problems:
            raise ContractError("; ".join(problems))


MIN_SYNTHETIC_LENGTH = 5


def _transition_row(rng: np.random.Generator, n: int, sharpness: float) -> np.ndarray:
    # Zipf-shaped preferences over a random ordering of successors:
    # p(rank k) ~ k^-sharpness, so large sharpness means a near-deterministic successor.
    order = rng.permutation(n)
    weights = np.arange(1, n + 1, dtype=np.float64) ** (-sharpness)
    row = np.empty(n)
    row[order] = weights / weights.sum()
    return row


def transition_matrix(spec: SyntheticSpec) -> np.ndarray:
    """First-order transition matrix used by :func:`generate_synthetic`."""
    rng = np.random.default_rng([spec.seed, 1])
    return np.stack([_transition_row(rng, spec.num_items, spec.transition_sharpness)
                     for _ in range(spec.num_items)])


def generate_synthetic(spec: SyntheticSpec) -> InteractionLog:
    """Users walk a peaked Markov chain over items; some steps are uniform noise.

    Lengths are ``5 + Poisson(mean_length - 5)``. Second-order chains build
    their rows lazily from a per-context seed, so output depends on the seed only.
    """
    spec.validate()
    n = spec.num_items
    rng = np.random.default_rng([spec.seed, 0])
    first = transition_matrix(spec) if spec.markov_order == 1 else None
    cdf_cache: dict = {}

    def cdf(context):
        c = cdf_cache.get(context)
        if c is None:
            if first is not None:
                row = first[context]
            else:
                row = _transition_row(np.random.default_rng([spec.seed, 2, *context]), n,
                                      spec.transition_sharpness)
            c = np.cumsum(row)
            c[-1] = 1.0
            cdf_cache[context] = c
        return c

    records = []
    for u in range(spec.num_users):
        length = MIN_SYNTHETIC_LENGTH + int(rng.poisson(spec.mean_length - MIN_SYNTHETIC_LENGTH))
        walk = [int(rng.integers(n))]
        if spec.markov_order == 2 and length > 1:
            walk.append(int(rng.integers(n)))
        while len(walk) < length:
            if rng.random() < spec.noise_rate:
                nxt = int(rng.integers(n))
            else:
                context = walk[-1] if spec.markov_order == 1 else (walk[-2], walk[-1])
                nxt = int(np.searchsorted(cdf(context), rng.random(), side="right"))
                nxt = min(nxt, n - 1)
            walk.append(nxt)
        for t, item in enumerate(walk[:length]):
            records.append((f"u{u}", f"i{item}", 1_000_000 + 3600 * t))
    return InteractionLog(records)


# ---------------------------------------------------------------- artifacts

SEQUENCE_FILE = "sequences.bin"
MANIFEST_FILE = "dataset.json"


def write_sequence_file(path, sequences: list[list[int]]) -> None:
    try:
        with open(path, "wb") as fh:
            for seq in sequences:
                fh.write(struct.pack("<I", len(seq)))
                fh.write(np.asarray(seq, dtype="<u4").tobytes())
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def read_sequence_file(path) -> list[list[int]]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    out, pos = [], 0
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        out.append(np.frombuffer(raw, dtype="<u4", count=n, offset=pos).astype(int).tolist())
        pos += 4 * n
    return out


def dataset_statistics(interactions: InteractionLog, dataset: SequenceDataset) -> dict:
    n_u, n_i, n = interactions.num_users, interactions.num_items, len(interactions)
    return {
        "users": n_u,
        "items": n_i,
        "interactions": n,
        "density": n / (n_u * n_i) if n_u and n_i else 0.0,
        "train_users": dataset.num_users,
        "train_pairs": dataset.num_train_pairs(),
        "valid_users": int(dataset.eval_users("valid").size),
        "test_users": int(dataset.eval_users("test").size),
    }


def format_density(density: float) -> str:
    return f"{100.0 * density:.2f}%"


def format_statistics(stats: dict, name: str = "dataset") -> str:
    header = f"{'Dataset':<12}{'# Users':>10}{'# Items':>10}{'# Interactions':>16}{'Density':>10}"
    row = (f"{name:<12}{stats['users']:>10,}{stats['items']:>10,}"
           f"{stats['interactions']:>16,}{format_density(stats['density']):>10}")
    return header + "\n" + row


def save_dataset(out_dir, interactions: InteractionLog, dataset: SequenceDataset, provenance: dict) -> dict:
    """Write ``sequences.bin`` plus the JSON manifest; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    seq_path = os.path.join(out_dir, SEQUENCE_FILE)
    write_sequence_file(seq_path, chronological_sequences(interactions))
    with open(seq_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    manifest = {
        "statistics": dataset_statistics(interactions, dataset),
        "max_len": dataset.max_len,
        "num_items": dataset.num_items,
        "sequence_file": SEQUENCE_FILE,
        "sequence_sha256": digest,
        "provenance": provenance,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, MANIFEST_FILE), "w") as fh:
        fh.write(text + "\n")
    manifest["manifest_sha256"] = hashlib.sha256(text.encode()).hexdigest()
    return manifest


def load_dataset(data_dir) -> tuple[SequenceDataset, dict]:
    path = os.path.join(data_dir, MANIFEST_FILE)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ArtifactIOError(f"missing dataset manifest: expected {path}") from exc
    manifest = json.loads(text)
    manifest["manifest_sha256"] = hashlib.sha256(text.strip().encode()).hexdigest()
    seqs = read_sequence_file(os.path.join(data_dir, manifest["sequence_file"]))
    return split_sequences(seqs, manifest["num_items"], manifest["max_len"]), manifest


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
