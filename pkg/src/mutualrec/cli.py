"""Command-line entry point: ``mutualrec {prepare,pretrain,distill,eval,report,replay}``.

Exit codes: 0 success, 2 configuration/contract, 3 data, 4 numeric or freeze
violation, 5 artifact I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time

from .autodiff import file_sha256
from .config import RunConfig, load_config
from .crm import CrmModel
from .data import (build_sequences, dataset_statistics, format_statistics, generate_synthetic,
                   k_core_filter, load_dataset, parse_interactions, save_dataset, spec_dict)
from .errors import ArtifactIOError, ConfigError, MutualRecError
from .evaluation import evaluate, export_curves, export_report, format_report, load_reports
from .llm_proxy import LlmProxyModel
from .training import RoundHistory, init_llm_proxy, mutual_distill, pretrain_crm, stream

log = logging.getLogger("mutualrec")

MANIFEST = "run_manifest.json"
REPLAY_TOLERANCE = 1e-12


# ---------------------------------------------------------------- configuration


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON RunConfig document; flags override its values")
    p.add_argument("--out", help="output directory (output.dir)")
    p.add_argument("--seed", type=int, help="root seed for every random stream, including synthetic data")
    p.add_argument("--data", dest="data_dir", help="prepared dataset directory")
    p.add_argument("--input", dest="data_path", help="raw interaction CSV/TSV")
    p.add_argument("--max-len", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--lora-rank", type=int)
    p.add_argument("--t1", type=float)
    p.add_argument("--t2", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--t-max", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int, help="hard epoch cap per distillation phase")
    p.add_argument("--no-loop", action="store_true", help="single round only (w/o l)")
    p.add_argument("--no-weights", action="store_true", help="fix adaptive weights to 1 (w/o w)")
    p.add_argument("--no-embed-refresh", action="store_true", help="inject CRM embeddings once (w/o eu)")
    p.add_argument("--reset-adapters", action="store_true", help="re-initialise adapters every round")
    p.add_argument("--frozen-random", action="store_true", help="skip backbone pretraining")


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    d, dist = cfg.data, cfg.distill
    if args.seed is not None:
        dist.seed = args.seed
        d.synthetic = {**d.synthetic, "seed": args.seed}
    overrides = [
        (d, "dir", args.data_dir), (d, "path", args.data_path), (d, "max_len", args.max_len),
        (cfg.crm, "dim", args.dim), (cfg.llm, "lora_rank", args.lora_rank),
        (dist, "t1", args.t1), (dist, "t2", args.t2), (dist, "gamma", args.gamma),
        (dist, "beta", args.beta), (dist, "t_max", args.t_max), (dist, "patience", args.patience),
        (dist, "max_epochs_per_phase", args.max_epochs), (cfg.output, "dir", args.out),
    ]
    for section, key, value in overrides:
        if value is not None:
            setattr(section, key, value)
    if args.no_loop:
        dist.use_loop = False
    if args.no_weights:
        dist.use_weights = False
    if args.no_embed_refresh:
        dist.refresh_embeddings = False
    if args.reset_adapters:
        dist.reset_adapters = True
    if args.frozen_random:
        cfg.llm.pretrain_backbone = False
    cfg.validate()
    return cfg


def variant_label(cfg: RunConfig) -> str:
    d = cfg.distill
    parts = [name for flag, name in ((d.use_loop, "w/o l"), (d.use_weights, "w/o w"),
                                     (d.refresh_embeddings, "w/o eu")) if not flag]
    return "+".join(parts) if parts else "full"


# ---------------------------------------------------------------- data


def prepare_data(cfg: RunConfig, out_dir: str):
    """Materialise the dataset described by ``cfg.data`` under ``out_dir``; returns (dataset, manifest)."""
    d = cfg.data
    if d.dir is not None:
        return load_dataset(d.dir)
    if d.path is not None:
        if not os.path.exists(d.path):
            raise ArtifactIOError(f"input file not found: {d.path}")
        raw = parse_interactions(d.path, d.format, d.has_header, d.min_timestamp)
        provenance = {"source": os.path.abspath(d.path), "sha256": file_sha256(d.path), "skipped": raw.skipped}
    else:
        spec = cfg.synthetic_spec()
        raw = generate_synthetic(spec)
        provenance = {"source": "synthetic", "spec": spec_dict(spec)}
    provenance["k_core"] = d.k_core
    log_ = k_core_filter(raw, d.k_core)
    dataset = build_sequences(log_, d.max_len)
    manifest = save_dataset(out_dir, log_, dataset, provenance)
    manifest["statistics"] = dataset_statistics(log_, dataset)
    return dataset, manifest


# ---------------------------------------------------------------- helpers


def _write_json(path, obj) -> None:
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def _evaluate_model(score_fn, dataset, cfg: RunConfig, model: str, round: int | None):
    reports = []
    for split in ("valid", "test"):
        rng = stream(cfg.distill.seed, f"eval/{model}/{round}/{split}")
        reports.append(evaluate(score_fn, dataset, split, tuple(cfg.eval.ks), cfg.eval.policy,
                                model, round, rng))
    return reports


def _write_reports(out_dir, reports) -> None:
    export_report(reports, os.path.join(out_dir, "report.csv"), "csv")
    export_report(reports, os.path.join(out_dir, "report.json"), "json")
    export_curves(reports, os.path.join(out_dir, "curves.csv"), "test")


def _checkpoint(out_dir, round: int, phase: str, name: str) -> tuple[str, str]:
    rel = os.path.join(f"round_{round}", phase, f"{name}.bin")
    return rel, os.path.join(out_dir, rel)


# ---------------------------------------------------------------- run pipeline


def run_pipeline(cfg: RunConfig, distill: bool = True) -> dict:
    """Prepare, pretrain and (optionally) distill; writes every artifact and returns the manifest."""
    out = cfg.output.dir
    os.makedirs(out, exist_ok=True)
    dataset, data_manifest = prepare_data(cfg, os.path.join(out, "data"))
    checkpoints: dict[str, str] = {}
    timings: dict[str, float] = {}

    start = time.perf_counter()
    crm, pre = pretrain_crm(dataset, cfg.distill, cfg.crm_config(dataset.num_items))
    timings["pretrain"] = time.perf_counter() - start
    rel, path = _checkpoint(out, 0, "pretrain", "crm")
    crm.save(path)
    checkpoints[rel] = file_sha256(path)
    reports = _evaluate_model(crm.score, dataset, cfg, "crm", 0)
    history = RoundHistory([pre])

    if distill:
        def on_phase_end(rnd, phase, crm_, llm_):
            model = crm_ if phase == "crm" else llm_
            rel_, path_ = _checkpoint(out, rnd, phase, phase)
            model.save(path_)
            checkpoints[rel_] = file_sha256(path_)
            if phase == "crm":
                reports.extend(_evaluate_model(llm_.score, dataset, cfg, "llm", rnd))
                reports.extend(_evaluate_model(crm_.score, dataset, cfg, "crm", rnd))

        start = time.perf_counter()
        llm = init_llm_proxy(dataset, crm, cfg.llm_config(dataset.num_items), cfg.distill.seed,
                             cfg.llm.pretrain_backbone, cfg.llm.pretrain_epochs)
        timings["backbone"] = time.perf_counter() - start
        _, _, loop_history = mutual_distill(crm, dataset, cfg.distill, llm=llm, on_phase_end=on_phase_end)
        history.records.extend(loop_history.records)
    for r in history.records:
        timings[f"round_{r.round}/{r.phase}"] = r.seconds

    _write_reports(out, reports)
    _write_json(os.path.join(out, "history.json"), history.to_list(timing=False))
    _write_json(os.path.join(out, "timings.json"), timings)
    manifest = {
        "command": "distill" if distill else "pretrain",
        "variant": variant_label(cfg),
        "config": cfg.to_dict(),
        "seed": cfg.distill.seed,
        "dataset": {"manifest_sha256": data_manifest["manifest_sha256"],
                    "sequence_sha256": data_manifest["sequence_sha256"],
                    "statistics": data_manifest["statistics"]},
        "checkpoints": dict(sorted(checkpoints.items())),
        "metrics": [r.to_dict() for r in reports],
        "history": history.to_list(timing=False),
    }
    _write_json(os.path.join(out, MANIFEST), manifest)
    return manifest


def load_any(path):
    """Load a CRM or LLM-proxy checkpoint; returns (model, kind)."""
    if not os.path.exists(path):
        raise ArtifactIOError(f"checkpoint not found: expected {path}")
    try:
        return CrmModel.load(path), "crm"
    except MutualRecError:
        return LlmProxyModel.load(path), "llm"


def compare_manifests(reference: dict, replayed: dict, tol: float = REPLAY_TOLERANCE) -> list[str]:
    """Differences between two run manifests: metrics beyond ``tol`` or any checkpoint byte change."""
    problems = []
    ref = {(m["model"], m["round"], m["split"]): m["metrics"] for m in reference["metrics"]}
    new = {(m["model"], m["round"], m["split"]): m["metrics"] for m in replayed["metrics"]}
    if set(ref) != set(new):
        problems.append(f"report sets differ: {sorted(set(ref) ^ set(new), key=str)}")
    for key in sorted(set(ref) & set(new), key=str):
        for metric, vals in ref[key].items():
            for k, v in vals.items():
                got = new[key].get(metric, {}).get(k)
                if got is None or not math.isclose(v, got, rel_tol=0.0, abs_tol=tol):
                    problems.append(f"{key} {metric}@{k}: {v!r} vs {got!r}")
    if reference["checkpoints"] != replayed["checkpoints"]:
        for name in sorted(set(reference["checkpoints"]) | set(replayed["checkpoints"])):
            if reference["checkpoints"].get(name) != replayed["checkpoints"].get(name):
                problems.append(f"checkpoint {name} differs")
    if reference["history"] != replayed["history"]:
        problems.append("training history differs")
    return problems


# ---------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    cfg = resolve_config(args)
    out = cfg.output.dir
    _, manifest = prepare_data(cfg, out)
    print(format_statistics(manifest["statistics"], args.name))
    print(f"manifest sha256 {manifest['manifest_sha256']}")
    return 0


def cmd_pretrain(args) -> int:
    manifest = run_pipeline(resolve_config(args), distill=False)
    _print_metrics(manifest)
    return 0


def cmd_distill(args) -> int:
    cfg = resolve_config(args)
    manifest = run_pipeline(cfg)
    _print_metrics(manifest)
    print(f"manifest: {os.path.join(cfg.output.dir, MANIFEST)}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if cfg.data.dir is None:
        raise ConfigError("eval needs --data pointing at a prepared dataset directory")
    dataset, _ = load_dataset(cfg.data.dir)
    model, kind = load_any(args.checkpoint)
    reports = _evaluate_model(model.score, dataset, cfg, kind, args.round)
    for r in reports:
        print(format_report(r))
    if args.report:
        export_report(reports, args.report, args.format)
    return 0


def cmd_report(args) -> int:
    path = os.path.join(args.run, "report.json")
    if not os.path.exists(path):
        raise ArtifactIOError(f"no reports found: expected {path}")
    reports = load_reports(path)
    for r in reports:
        print(format_report(r))
    if args.curves:
        export_curves(reports, args.curves, args.split)
    return 0


def cmd_replay(args) -> int:
    if not os.path.exists(args.manifest):
        raise ArtifactIOError(f"run manifest not found: {args.manifest}")
    with open(args.manifest) as fh:
        reference = json.load(fh)
    cfg = RunConfig.from_dict(reference["config"])
    cfg.output.dir = args.out or os.path.join(os.path.dirname(os.path.abspath(args.manifest)), "replay")
    replayed = run_pipeline(cfg, distill=reference["command"] == "distill")
    problems = compare_manifests(reference, replayed)
    for p in problems:
        print(f"MISMATCH {p}")
    print("replay: identical" if not problems else f"replay: {len(problems)} mismatches")
    return 0 if not problems else 4


def _print_metrics(manifest: dict) -> None:
    for m in manifest["metrics"]:
        if m["split"] == "test":
            ndcg = m["metrics"]["NDCG"].get("10")
            hr = m["metrics"]["HR"].get("10")
            print(f"round {m['round']} {m['model']:<4} test HR@10 {hr:.4f} NDCG@10 {ndcg:.4f}")


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mutualrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a k-core dataset and print its statistics")
    _add_config_flags(p)
    p.add_argument("--name", default="dataset", help="row label in the statistics table")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="pretrain the CRM only")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("distill", help="pretrain then run mutual distillation")
    _add_config_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="evaluate one checkpoint in isolation")
    _add_config_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("--round", type=int, default=None, help="round label stamped into the report")
    p.add_argument("--report", help="write the report to this path")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print a finished run's reports; optionally export curves")
    p.add_argument("run", help="run output directory")
    p.add_argument("--curves", help="write per-round plot data (CSV) here")
    p.add_argument("--split", default="test", choices=("valid", "test"))
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-execute a run manifest and compare results")
    p.add_argument("manifest")
    p.add_argument("--out", help="directory for the replayed run")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MutualRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ArtifactIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
