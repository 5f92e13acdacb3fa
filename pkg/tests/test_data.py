"""Ingestion, k-core filtering, leave-one-out splits and the synthetic generator."""

import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mutualrec.data import (InteractionLog, SyntheticSpec, build_sequences, chronological_sequences,
                            dataset_statistics, format_density, format_statistics, generate_synthetic,
                            k_core_filter, load_dataset, parse_interactions, read_sequence_file, save_dataset,
                            transition_matrix, write_sequence_file)
from mutualrec.errors import ContractError, FilterError, IngestionError


def write(tmp_path, text, name="log.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- ingestion


def test_duplicates_removed(tmp_path):
    log = parse_interactions(write(tmp_path, "a,x,1\na,x,1\nb,y,2\n"))
    assert len(log) == 2


def test_user_index_first_seen_order(tmp_path):
    log = parse_interactions(write(tmp_path, "b,x,1\na,y,2\nb,y,3\n"))
    assert log.user_index == {"b": 0, "a": 1}
    assert log.item_index == {"x": 0, "y": 1}


def test_malformed_rows_counted(tmp_path):
    rows = ["u1,i1,1", "u1,i2,2", "u2,i1,3", "bad-row", "u2,i3,4", "u3,i1,five",
            "u3,i2,6", "u4,i4,7", "u4,i1,8", "u5,i2,9"]
    log = parse_interactions(write(tmp_path, "\n".join(rows) + "\n"))
    assert len(log) == 8
    assert log.skipped == 2


def test_tsv_and_header(tmp_path):
    log = parse_interactions(write(tmp_path, "user\titem\tts\na\tx\t5\n", "log.tsv"), "tsv", has_header=True)
    assert log.records == [("a", "x", 5)]


def test_min_timestamp_drops_old_rows(tmp_path):
    log = parse_interactions(write(tmp_path, "a,x,1\na,y,10\n"), min_timestamp=5)
    assert log.records == [("a", "y", 10)]


def test_empty_file_rejected(tmp_path):
    with pytest.raises(IngestionError):
        parse_interactions(write(tmp_path, ""))


def test_mostly_garbage_rejected(tmp_path):
    with pytest.raises(IngestionError, match="unparseable"):
        parse_interactions(write(tmp_path, "a;x;1\nb;y;2\nc,z,3\n"))


# ---------------------------------------------------------------- k-core


def brute_force_core(records, k):
    """Largest user/item subset where every member keeps >= k interactions (exhaustive)."""
    users = sorted({r[0] for r in records})
    items = sorted({r[1] for r in records})
    best = set()
    for nu in range(len(users), 0, -1):
        for us in itertools.combinations(users, nu):
            for ni in range(len(items), 0, -1):
                for its in itertools.combinations(items, ni):
                    sub = [r for r in records if r[0] in us and r[1] in its]
                    cu, ci = Counter(r[0] for r in sub), Counter(r[1] for r in sub)
                    if all(cu[u] >= k for u in us) and all(ci[i] >= k for i in its) and len(sub) > len(best):
                        best = set(sub)
    return best


CASCADE = [
    # a dense 4x4 block of users u1..u4 and items i1..i4 is a 3-core on its own...
    *[(f"u{u}", f"i{i}", 10 * u + i) for u in range(1, 5) for i in range(1, 5) if (u, i) != (4, 4)],
    # ...u5 links to i5 and i6; i6 only has u5 and u6, so removing it starves u5, then i5
    ("u5", "i5", 51), ("u5", "i6", 52), ("u5", "i1", 53),
    ("u6", "i6", 61), ("u6", "i5", 62), ("u4", "i5", 63),
]


def test_k_core_cascade_matches_brute_force():
    log = InteractionLog(list(CASCADE))
    got = set(k_core_filter(log, 3).records)
    assert got == brute_force_core(CASCADE, 3)
    assert not any(r[0] in ("u5", "u6") for r in got)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=18, unique=True),
       st.integers(1, 3))
@settings(max_examples=60, deadline=None)
def test_k_core_matches_brute_force_randomised(pairs, k):
    records = [(f"u{u}", f"i{i}", n) for n, (u, i) in enumerate(pairs)]
    oracle = brute_force_core(records, k)
    if not oracle:
        with pytest.raises(FilterError):
            k_core_filter(InteractionLog(records), k)
        return
    out = k_core_filter(InteractionLog(records), k)
    assert set(out.records) == oracle
    assert k_core_filter(out, k).records == out.records
    assert min(Counter(r[0] for r in out.records).values()) >= k
    assert min(Counter(r[1] for r in out.records).values()) >= k


def test_k_core_identity_cases():
    recs = [(f"u{u}", f"i{i}", u * 10 + i) for u in range(3) for i in range(3)]
    assert k_core_filter(InteractionLog(recs), 3).records == recs
    assert k_core_filter(InteractionLog(CASCADE), 1).records == CASCADE


def test_item_only_mode_keeps_sparse_users():
    recs = [("a", "x", 1), ("b", "x", 2), ("c", "y", 3)]
    out = k_core_filter(InteractionLog(recs), 2, item_only=True)
    assert out.records == recs[:2]


def test_k_core_empty_result_raises():
    with pytest.raises(FilterError, match="removed everything"):
        k_core_filter(InteractionLog([("a", "x", 1)]), 2)


# ---------------------------------------------------------------- sequences


def _log(rows):
    return InteractionLog([(u, i, t) for u, i, t in rows])


def test_sequences_sorted_by_time():
    ds = build_sequences(_log([("u", "a", 3), ("u", "b", 1), ("u", "c", 2)]), 50)
    assert ds.item_ids == ["a", "b", "c"]
    assert ds.full_sequence(0) == [1, 2, 0]


def test_timestamp_ties_keep_input_order():
    ds = build_sequences(_log([("u", "a", 1), ("u", "b", 1), ("u", "c", 1)]), 50)
    assert ds.full_sequence(0) == [0, 1, 2]


def test_leave_one_out_split():
    ds = build_sequences(_log([("u", f"i{n}", n) for n in range(5)]), 50)
    assert ds.train[0] == [0, 1, 2]
    assert ds.valid_target[0] == 3 and ds.test_target[0] == 4
    assert ds.eval_prefix(0, "test") == [0, 1, 2, 3]


def test_truncation_keeps_most_recent():
    ds = build_sequences(_log([("u", f"i{n}", n) for n in range(60)]), 50)
    assert ds.train[0] == list(range(8, 58))
    assert len(ds.eval_prefix(0, "test")) == 50
    assert ds.eval_prefix(0, "test")[-1] == 58


def test_short_users_are_train_only():
    ds = build_sequences(_log([("a", "x", 1), ("a", "y", 2), ("b", "x", 1), ("b", "y", 2), ("b", "z", 3)]), 50)
    assert ds.train[0] == [0, 1] and ds.valid_target[0] == -1
    assert list(ds.eval_users("test")) == [1]


@given(st.lists(st.integers(1, 40), min_size=1, max_size=12), st.integers(3, 10))
@settings(max_examples=50, deadline=None)
def test_split_reassembles_truncated_sequence(lengths, max_len):
    rows = [(f"u{u}", f"i{(u * 7 + n) % 13}", n) for u, L in enumerate(lengths) for n in range(L)]
    log = _log(rows)
    ds = build_sequences(log, max_len)
    for u, seq in enumerate(chronological_sequences(log)):
        if len(seq) >= 3:
            assert ds.train[u] + [ds.valid_target[u], ds.test_target[u]] == \
                seq[-(max_len + 2):][-(len(ds.train[u]) + 2):]
            assert ds.train[u] == seq[:-2][-max_len:]
        else:
            assert ds.train[u] == seq
        assert 1 <= len(ds.train[u]) <= max_len


# ---------------------------------------------------------------- synthetic generator


def test_synthetic_reproducible():
    spec = SyntheticSpec(num_users=50, num_items=30, seed=7)
    assert generate_synthetic(spec).records == generate_synthetic(spec).records


def test_synthetic_seeds_differ():
    a = generate_synthetic(SyntheticSpec(num_users=50, num_items=30, seed=1))
    b = generate_synthetic(SyntheticSpec(num_users=50, num_items=30, seed=2))
    assert a.records != b.records


def test_synthetic_lengths_at_least_five():
    log = generate_synthetic(SyntheticSpec(num_users=200, num_items=30, mean_length=8))
    assert min(Counter(r[0] for r in log.records).values()) >= 5


def test_full_noise_is_statistically_flat():
    spec = SyntheticSpec(num_users=600, num_items=10, mean_length=21, noise_rate=1.0, seed=3)
    seqs = chronological_sequences(generate_synthetic(spec))
    counts = np.zeros((10, 10))
    steps = 0
    for s in seqs:
        for a, b in zip(s, s[1:]):
            counts[a, b] += 1
            steps += 1
    assert steps >= 10_000
    p = stats.chi2_contingency(counts)[1]
    assert p > 0.01


def test_sharp_chain_has_dominant_successor():
    spec = SyntheticSpec(num_users=300, num_items=20, transition_sharpness=12.0, noise_rate=0.0, seed=4)
    seqs = chronological_sequences(generate_synthetic(spec))
    succ: dict[int, Counter] = {}
    for s in seqs:
        for a, b in zip(s, s[1:]):
            succ.setdefault(a, Counter())[b] += 1
    mode = sum(c.most_common(1)[0][1] for c in succ.values())
    total = sum(sum(c.values()) for c in succ.values())
    assert mode / total > 0.95


def test_transition_matrix_rows_stochastic():
    P = transition_matrix(SyntheticSpec(num_items=25))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_second_order_chain_reproducible():
    spec = SyntheticSpec(num_users=30, num_items=15, markov_order=2, seed=5)
    assert generate_synthetic(spec).records == generate_synthetic(spec).records


@pytest.mark.parametrize("field,value", [("num_items", 5), ("mean_length", 3), ("noise_rate", 1.5),
                                         ("markov_order", 3), ("transition_sharpness", 0.0)])
def test_synthetic_spec_validation(field, value):
    with pytest.raises(ContractError):
        SyntheticSpec(**{field: value}).validate()


# ---------------------------------------------------------------- artifacts


def test_sequence_file_round_trip(tmp_path):
    seqs = [[1, 2, 3], [0], [4, 4, 4, 4]]
    write_sequence_file(tmp_path / "s.bin", seqs)
    assert read_sequence_file(tmp_path / "s.bin") == seqs
    raw = (tmp_path / "s.bin").read_bytes()
    assert raw[:4] == (3).to_bytes(4, "little")


def test_saved_dataset_reloads_identically(tmp_path):
    log = k_core_filter(generate_synthetic(SyntheticSpec(num_users=80, num_items=20, seed=2)), 5)
    ds = build_sequences(log, 10)
    m1 = save_dataset(tmp_path / "a", log, ds, {"source": "synthetic"})
    m2 = save_dataset(tmp_path / "b", log, ds, {"source": "synthetic"})
    assert m1["manifest_sha256"] == m2["manifest_sha256"]
    loaded, manifest = load_dataset(tmp_path / "a")
    assert manifest["manifest_sha256"] == m1["manifest_sha256"]
    assert loaded.train == ds.train
    assert np.array_equal(loaded.test_target, ds.test_target)


def test_statistics_table_format():
    assert format_density(198_502 / (22_363 * 12_101)) == "0.07%"
    stats_row = {"users": 22_363, "items": 12_101, "interactions": 198_502,
                 "density": 198_502 / (22_363 * 12_101)}
    text = format_statistics(stats_row, "Beauty")
    assert "22,363" in text and "12,101" in text and "198,502" in text and "0.07%" in text


def test_dataset_statistics_counts():
    log = _log([("a", "x", 1), ("a", "y", 2), ("b", "x", 3)])
    s = dataset_statistics(log, build_sequences(log, 50))
    assert (s["users"], s["items"], s["interactions"]) == (2, 2, 3)
    assert s["density"] == pytest.approx(0.75)
