"""Command line: generate, train, eval, explain, grid."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .ehr import (
    atomic_write_text,
    build_vocabulary,
    cohort_samples,
    load_cohort,
    split_cohort,
    write_cohort,
    write_label_grouping,
)
from .errors import ConfigError, TransError
from .explainer import aggregate_importance, importance_csv
from .metrics import FrequencyPrior, MetricReport, evaluate_scores
from .model import ModelConfig
from .synthetic import MODES, GeneratorConfig, generate_synthetic_cohort
from .training import TrainedModel, grid_search, train

log = logging.getLogger("trans_ehr")

def _ks(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("--k values must be positive")
    return ks

def _groups_path(data: Path) -> Path:
    return data.with_suffix(".groups.csv")

def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None

def _load_data(args):
    data = Path(args.data)
    cohort = load_cohort(data)
    groups = Path(args.groups) if getattr(args, "groups", None) else _groups_path(data)
    return cohort, (groups if groups.exists() else None)

def cmd_generate(args) -> None:
    cfg = GeneratorConfig(n_patients=args.patients, noise=args.noise, mode=args.mode, n_label_groups=args.label_groups)
    records, truth = generate_synthetic_cohort(cfg, seed=args.seed)
    out = Path(args.out)
    write_cohort(records, out)
    write_label_grouping(truth.label_groups, _groups_path(out))
    log.info("wrote %d patients to %s", len(records), out)

def cmd_train(args) -> None:
    config = ModelConfig.from_dict(_read_json(args.config)) if args.config else ModelConfig()
    if config.n_labels == 0:
        config = config.replace(n_labels=args.label_groups)
    cohort, groups = _load_data(args)
    train_c, val_c, test_c = split_cohort(cohort, seed=args.split_seed)
    vocab = build_vocabulary(train_c, config.n_labels, groups)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    trained = train(train_c, val_c, config, vocab, log_path=log_path)
    trained.save(out, {"split_seed": args.split_seed, "n_patients": len(cohort)})
    log.info("best val precision@%d %.4f at epoch %d", config.eval_k, trained.best_metric, trained.best_epoch)

def _split(cohort, name: str, seed: int):
    parts = dict(zip(("train", "val", "test"), split_cohort(cohort, seed=seed)))
    return parts, parts[name]

def cmd_eval(args) -> None:
    trained = TrainedModel.load(args.ckpt)
    cohort, groups = _load_data(args)
    seed = trained_seed = int(_metadata(args.ckpt).get("split_seed", 0))
    runs, base_runs = [], []
    for r in range(args.repeats):
        if r == 0:
            model = trained.model
        else:
            # a fresh split and a fresh fit per extra repeat
            seed = trained_seed + r
            parts = dict(zip(("train", "val", "test"), split_cohort(cohort, seed=seed)))
            vocab = build_vocabulary(parts["train"], trained.config.n_labels, groups)
            model = train(parts["train"], parts["val"], trained.config.replace(seed=trained.config.seed + r), vocab).model
        parts, chosen = _split(cohort, args.split, seed)
        samples = cohort_samples(chosen, model.vocab)
        if not samples:
            raise ValueError(f"split {args.split!r} has no samples")
        labels = [s.labels for s in samples]
        runs.append(evaluate_scores(model.predict(samples), labels, args.k))
        prior = FrequencyPrior(model.vocab.n_labels).fit(cohort_samples(parts["train"], model.vocab))
        base_runs.append(evaluate_scores(prior.predict(samples), labels, args.k))
    report = MetricReport.from_runs(runs).to_json()
    atomic_write_text(args.out, json.dumps(report, indent=2) + "\n")
    if args.baseline_out:
        atomic_write_text(args.baseline_out, json.dumps(MetricReport.from_runs(base_runs).to_json(), indent=2) + "\n")
    if trained.model.unknown_codes:
        log.info("unseen codes mapped to UNK: %s", dict(trained.model.unknown_codes))

def _metadata(ckpt) -> dict:
    return json.loads((Path(ckpt) / "manifest.json").read_text()).get("metadata", {})

def cmd_explain(args) -> None:
    trained = TrainedModel.load(args.ckpt)
    cohort, _ = _load_data(args)
    if not 0 <= args.label < trained.vocab.n_labels:
        raise ValueError(f"label {args.label} outside [0, {trained.vocab.n_labels})")
    _, chosen = _split(cohort, args.split, int(_metadata(args.ckpt).get("split_seed", 0)))
    rows = aggregate_importance(
        trained, chosen, args.label, max_nodes=args.max_nodes, lam=args.lam, steps=args.steps
    )
    atomic_write_text(args.out, importance_csv(rows))

def cmd_grid(args) -> None:
    space = _read_json(args.config)
    base = ModelConfig.from_dict(_read_json(args.base)) if args.base else ModelConfig()
    if base.n_labels == 0:
        base = base.replace(n_labels=args.label_groups)
    cohort, groups = _load_data(args)
    train_c, val_c, _ = split_cohort(cohort, seed=args.split_seed)
    vocab = build_vocabulary(train_c, base.n_labels, groups)
    best, rows = grid_search(space, train_c, val_c, base, vocab, report_path=args.out)
    log.info("best config: %s", {k: best.to_dict()[k] for k in space})

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trans-ehr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort (JSONL) and its label grouping")
    g.add_argument("--patients", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--mode", choices=MODES, default="progression")
    g.add_argument("--label-groups", type=int, default=50)
    g.set_defaults(fn=cmd_generate)

    def data_args(q):
        q.add_argument("--data", required=True, help="cohort JSONL")
        q.add_argument("--groups", help="diagnosis_code,label_group CSV (default: <data>.groups.csv if present)")

    t = sub.add_parser("train", help="train on the 75%% split, select on the 10%% split")
    t.add_argument("--config", help="JSON with ModelConfig fields")
    data_args(t)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--label-groups", type=int, default=50)
    t.add_argument("--log", help="training log (JSONL); default <out>.log.jsonl")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("--ckpt", required=True)
    data_args(e)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--k", type=_ks, default=[10, 20, 30])
    e.add_argument("--repeats", type=int, default=1, help="extra repeats retrain on fresh seeded splits")
    e.add_argument("--out", required=True)
    e.add_argument("--baseline-out", help="also write the frequency-prior report here")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("explain", help="rank codes by mean mask importance for one label")
    x.add_argument("--ckpt", required=True)
    data_args(x)
    x.add_argument("--label", type=int, required=True)
    x.add_argument("--split", choices=("train", "val", "test"), default="test")
    x.add_argument("--max-nodes", type=int, default=10)
    x.add_argument("--lam", type=float, default=0.005)
    x.add_argument("--steps", type=int, default=100)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_explain)

    s = sub.add_parser("grid", help="exhaustive search over a JSON space of config lists")
    s.add_argument("--config", required=True, help="JSON object mapping field -> list of values")
    s.add_argument("--base", help="JSON with the fixed ModelConfig fields")
    data_args(s)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--label-groups", type=int, default=50)
    s.add_argument("--out", required=True, help="report JSON")
    s.set_defaults(fn=cmd_grid)
    return p

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "repeats", 1) < 1:
        parser.error("--repeats must be at least 1")
    try:
        args.fn(args)
    except (TransError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0

if __name__ == "__main__":
    sys.exit(main())
