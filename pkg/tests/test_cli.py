"""Subcommands, configuration handling, exit codes and manifest replay."""

import json
import os

import pytest

from mutualrec.cli import compare_manifests, main
from mutualrec.config import RunConfig, load_config
from mutualrec.errors import ConfigError

SMALL = {
    "data": {"k_core": 3, "max_len": 10,
             "synthetic": {"num_users": 60, "num_items": 20, "mean_length": 8, "transition_sharpness": 3.0}},
    "crm": {"dim": 8, "layers": 1, "heads": 2},
    "llm": {"width": 16, "layers": 1, "heads": 2, "lora_rank": 2, "pretrain_epochs": 1},
    "eval": {"ks": [5, 10]},
    "distill": {"t_max": 1, "max_epochs_per_phase": 2, "pretrain_max_epochs": 3, "batch_size": 16,
                "pretrain_batch_size": 32, "patience": 2, "lr": 1e-3},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def read(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def distilled(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["distill", "--config", str(cfg), "--out", str(root / "a"), "--seed", "3"]) == 0
    return root, str(cfg)


# ---------------------------------------------------------------- configuration


def test_default_config_round_trips():
    cfg = RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_unknown_keys_all_reported(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"distill": {"t3": 1, "gama": 2}, "extra": {}}))
    with pytest.raises(ConfigError) as info:
        load_config(str(path))
    text = str(info.value)
    assert "t3" in text and "gama" in text and "extra" in text


def test_invalid_values_all_reported():
    cfg = RunConfig()
    cfg.distill.t1 = -1.0
    cfg.crm.dim = 0
    cfg.eval.policy = "everything"
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    assert len(info.value.problems) >= 3


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"distill": {"gamma": -1}}))
    assert main(["distill", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "gamma" in capsys.readouterr().err


def test_missing_input_file_exit_code(tmp_path):
    assert main(["prepare", "--input", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 5


def test_unparseable_input_exit_code(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text("a;b;c\n")
    assert main(["prepare", "--input", str(path), "--out", str(tmp_path / "o")]) == 3


def test_flags_override_config(config_file):
    from mutualrec.cli import build_parser, resolve_config, variant_label
    args = build_parser().parse_args(["distill", "--config", config_file, "--seed", "9", "--t1", "0.5",
                                      "--no-loop", "--no-weights"])
    cfg = resolve_config(args)
    assert cfg.distill.seed == 9 and cfg.data.synthetic["seed"] == 9
    assert cfg.distill.t1 == 0.5 and variant_label(cfg) == "w/o l+w/o w"


# ---------------------------------------------------------------- prepare


def test_prepare_twice_gives_identical_manifest(tmp_path, config_file, capsys):
    for name in ("a", "b"):
        assert main(["prepare", "--config", config_file, "--out", str(tmp_path / name), "--name", "toy"]) == 0
    out = capsys.readouterr().out
    assert "toy" in out and "%" in out
    assert read(tmp_path / "a" / "dataset.json") == read(tmp_path / "b" / "dataset.json")


def test_prepare_from_raw_file(tmp_path):
    rows = [f"u{u},i{(u + n) % 7},{n}" for u in range(12) for n in range(6)]
    path = tmp_path / "log.csv"
    path.write_text("\n".join(rows) + "\n")
    assert main(["prepare", "--input", str(path), "--out", str(tmp_path / "o")]) == 0
    assert os.path.exists(tmp_path / "o" / "sequences.bin")


# ---------------------------------------------------------------- distill / eval / report / replay


def test_distill_writes_every_artifact(distilled):
    root, _ = distilled
    run = root / "a"
    manifest = read(run / "run_manifest.json")
    assert set(manifest["checkpoints"]) == {os.path.join("round_0", "pretrain", "crm.bin"),
                                            *(os.path.join(f"round_{r}", p, f"{p}.bin")
                                              for r in (1, 2) for p in ("llm", "crm"))}
    assert manifest["variant"] == "full" and manifest["seed"] == 3
    for name in ("report.csv", "report.json", "curves.csv", "history.json", "timings.json"):
        assert (run / name).exists()
    rounds = {(m["model"], m["round"]) for m in manifest["metrics"]}
    assert rounds == {("crm", 0), ("crm", 1), ("crm", 2), ("llm", 1), ("llm", 2)}


def test_distill_twice_is_byte_identical(distilled, tmp_path):
    root, cfg = distilled
    assert main(["distill", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "3"]) == 0
    for name in ("report.csv", "report.json", "curves.csv", "history.json"):
        assert (root / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_of_pretrained_crm_matches_round_zero(distilled, tmp_path):
    root, cfg = distilled
    run = root / "a"
    out = tmp_path / "eval.json"
    assert main(["eval", "--config", cfg, "--data", str(run / "data"), "--seed", "3", "--round", "0",
                 str(run / "round_0" / "pretrain" / "crm.bin"), "--report", str(out), "--format", "json"]) == 0
    got = {r["split"]: r["metrics"] for r in read(out)}
    ref = {m["split"]: m["metrics"] for m in read(run / "run_manifest.json")["metrics"]
           if m["model"] == "crm" and m["round"] == 0}
    assert got == ref


def test_eval_missing_checkpoint_names_path(distilled, tmp_path, capsys):
    root, cfg = distilled
    missing = str(tmp_path / "nope.bin")
    assert main(["eval", "--config", cfg, "--data", str(root / "a" / "data"), missing]) == 5
    assert missing in capsys.readouterr().err


def test_report_exports_curves(distilled, tmp_path, capsys):
    root, _ = distilled
    assert main(["report", str(root / "a"), "--curves", str(tmp_path / "c.csv")]) == 0
    assert "NDCG@10" in capsys.readouterr().out
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].startswith("model,round,") and len(lines) == 6


def test_replay_reproduces_run(distilled, capsys):
    root, _ = distilled
    manifest = str(root / "a" / "run_manifest.json")
    assert main(["replay", manifest, "--out", str(root / "replay")]) == 0
    assert "replay: identical" in capsys.readouterr().out


def test_compare_manifests_flags_metric_drift(distilled):
    root, _ = distilled
    ref = read(root / "a" / "run_manifest.json")
    new = json.loads(json.dumps(ref))
    assert compare_manifests(ref, new) == []
    new["metrics"][0]["metrics"]["NDCG"]["10"] += 1e-11
    new["checkpoints"][sorted(new["checkpoints"])[0]] = "0" * 64
    problems = compare_manifests(ref, new)
    assert any("NDCG@10" in p for p in problems) and any("checkpoint" in p for p in problems)


def test_replay_missing_manifest(tmp_path):
    assert main(["replay", str(tmp_path / "none.json")]) == 5


@pytest.mark.parametrize("flag,label,field", [("--no-loop", "w/o l", "use_loop"),
                                              ("--no-weights", "w/o w", "use_weights"),
                                              ("--no-embed-refresh", "w/o eu", "refresh_embeddings")])
def test_ablation_flags_give_distinct_manifests(tmp_path, config_file, flag, label, field):
    out = tmp_path / "abl"
    assert main(["distill", "--config", config_file, "--out", str(out), flag]) == 0
    manifest = read(out / "run_manifest.json")
    assert manifest["variant"] == label
    assert manifest["config"]["distill"][field] is False
    rounds = {m["round"] for m in manifest["metrics"]}
    assert rounds == ({0, 1} if flag == "--no-loop" else {0, 1, 2})


def test_pretrain_command_writes_round_zero_only(tmp_path, config_file):
    assert main(["pretrain", "--config", config_file, "--out", str(tmp_path / "p")]) == 0
    manifest = read(tmp_path / "p" / "run_manifest.json")
    assert manifest["command"] == "pretrain"
    assert list(manifest["checkpoints"]) == [os.path.join("round_0", "pretrain", "crm.bin")]
