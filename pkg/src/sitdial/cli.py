"""Command-line entry point: ``sitdial <command> [options]``.

Every command writes ``config.resolved.yaml`` into its output directory. Feeding
that file back through ``--config`` repeats the run exactly.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .corpus import Corpus, corpus_stats, load_corpus, save_corpus
from .errors import ConfigError, SitDialError
from .experiments import ABLATIONS, EXPERIMENTS, RunSpec, run_ablation_suite, run_experiment_suite
from .featurize import ALL, FeaturizerConfig
from .heuristics import BaselineKind, mean_over_seeds, run_baseline
from .metrics import format_markdown
from .neural import ModelConfig, TrainConfig, evaluate, train
from .neural.checkpoint import load_checkpoint, save_checkpoint, write_log
from .simmc import ingest_directory
from .stats import analyze_disambiguation_bias, roi_similarity_audit
from .synth import CorpusSpec, generate

log = logging.getLogger("sitdial")

COMMANDS = ("gen", "ingest", "stats", "baseline", "train", "eval", "ablate", "suite")
ALL_SPLITS = ("train", "dev", "devtest", "teststd")
SECTIONS = ("corpus", "featurizer", "model", "train", "baseline", "eval")

_FEATURIZER_BOOLS = [f.name for f in fields(FeaturizerConfig) if f.type in (bool, "bool")]
_MODEL_FLAGS = {
    "d_model": int, "n_heads": int, "language_layers": int, "relational_layers": int,
    "cross_layers": int, "dropout": float, "threshold": float, "pooling": str,
}
_TRAIN_FLAGS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "optimizer": str,
    "max_train_candidates": int, "precision": str,
}


# ---------------------------------------------------------------------------
# configuration


def _history_turns(text: str):
    return ALL if text == ALL else int(text)


def load_config(path: Optional[str]) -> dict:
    """Read a YAML (or JSON) run configuration into plain sections."""
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - set(SECTIONS) - {"data", "seed", "command", "out"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return raw


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and command-line flags (in that order)."""
    cfg = load_config(args.config)
    resolved: dict[str, Any] = {"command": args.command}
    resolved["data"] = args.data or cfg.get("data") or "synthetic"
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    resolved["seed"] = seed

    corpus = dict(cfg.get("corpus", {}))
    corpus["seed"] = seed if args.seed is not None or "seed" not in corpus else corpus["seed"]
    if args.n_dialogues is not None:
        corpus["n_dialogues"] = args.n_dialogues
    resolved["corpus"] = CorpusSpec.from_dict(corpus).to_dict()

    feat = dict(cfg.get("featurizer", {}))
    for name in _FEATURIZER_BOOLS:
        value = getattr(args, name, None)
        if value is not None:
            feat[name] = value
    if args.history_object_turns is not None:
        feat["history_object_turns"] = args.history_object_turns
    if args.max_tokens is not None:
        feat["max_tokens"] = args.max_tokens
    fcfg = FeaturizerConfig.from_dict(feat)
    resolved["featurizer"] = fcfg.to_dict()

    model = dict(cfg.get("model", {}))
    for name in _MODEL_FLAGS:
        if getattr(args, name, None) is not None:
            model[name] = getattr(args, name)
    if args.task is not None:
        model["task"] = args.task
    model.setdefault("max_tokens", fcfg.max_tokens)
    model["seed"] = seed if args.seed is not None or "seed" not in model else model["seed"]
    resolved["model"] = ModelConfig.from_dict(model).to_dict()

    tr = dict(cfg.get("train", {}))
    for name in _TRAIN_FLAGS:
        if getattr(args, name, None) is not None:
            tr[name] = getattr(args, name)
    tr["seed"] = seed if args.seed is not None or "seed" not in tr else tr["seed"]
    resolved["train"] = TrainConfig.from_dict(tr).to_dict()

    base = dict(cfg.get("baseline", {}))
    if getattr(args, "kind", None):
        base["kind"] = args.kind
    if getattr(args, "seeds", None) is not None:
        base["seeds"] = args.seeds
    base.setdefault("seeds", 10)
    resolved["baseline"] = base

    ev = dict(cfg.get("eval", {}))
    if args.split:
        ev["split"] = args.split
    ev.setdefault("split", "devtest")
    resolved["eval"] = ev
    return resolved


def write_snapshot(resolved: dict, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.yaml"
    path.write_text(yaml.safe_dump(resolved, sort_keys=True), encoding="utf-8")
    return path


def load_data(resolved: dict) -> Corpus:
    source = resolved["data"]
    if source == "synthetic":
        return generate(CorpusSpec.from_dict(resolved["corpus"]))
    kind, _, path = source.partition(":")
    if not path:
        raise ConfigError(f"--data {source!r}: expected synthetic, simmc:PATH or json:PATH")
    if kind == "simmc":
        corpus, report = ingest_directory(path, splits=ALL_SPLITS)
        if report.dangling:
            log.warning("%d dangling object ids dropped during ingestion", len(report.dangling))
        return corpus
    if kind == "json":
        return load_corpus(path)
    raise ConfigError(f"unknown data source kind {kind!r}")


def run_spec(resolved: dict) -> RunSpec:
    return RunSpec(
        FeaturizerConfig.from_dict(resolved["featurizer"]),
        ModelConfig.from_dict(resolved["model"]),
        TrainConfig.from_dict(resolved["train"]),
        resolved["eval"]["split"],
    )


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands; each returns the process exit status


def cmd_gen(resolved, out: Path) -> int:
    corpus = load_data(resolved)
    save_corpus(corpus, out / "corpus")
    if corpus.dialogues:
        _dump(corpus_stats(corpus).to_dict(), out / "stats.json")
    print(f"wrote {len(corpus.dialogues)} dialogues to {out / 'corpus'}")
    return 0


def cmd_ingest(resolved, out: Path) -> int:
    kind, _, path = resolved["data"].partition(":")
    if kind != "simmc":
        raise ConfigError("ingest needs --data simmc:PATH")
    corpus, report = ingest_directory(path, splits=ALL_SPLITS)
    save_corpus(corpus, out / "corpus")
    _dump(report.__dict__, out / "ingest_report.json")
    print(f"ingested {report.n_dialogues} dialogues and {report.n_scenes} scenes into {out / 'corpus'}")
    return 0


def cmd_stats(resolved, out: Path) -> int:
    corpus = load_data(resolved)
    split = resolved["eval"]["split"]
    part = corpus.split(split) if split != "all" else corpus
    result: dict[str, Any] = {"split": split, "corpus": corpus_stats(part).to_dict()}
    try:
        result["disambiguation_bias"] = analyze_disambiguation_bias(part).to_dict()
    except SitDialError as exc:
        result["disambiguation_bias"] = {"error": str(exc)}
    try:
        audit = roi_similarity_audit(part)
        result["roi_audit"] = audit.__dict__
    except SitDialError as exc:
        result["roi_audit"] = {"error": str(exc)}
    _dump(result, out / "stats.json")
    lines = [f"## Corpus statistics ({split})", "", "| Statistic | Value |", "|---|---|"]
    for k, v in result["corpus"].items():
        if not isinstance(v, dict):
            lines.append(f"| {k} | {v:.4g} |" if isinstance(v, float) else f"| {k} | {v} |")
    (out / "stats.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print((out / "stats.md").read_text(encoding="utf-8"))
    return 0


def cmd_baseline(resolved, out: Path) -> int:
    if "kind" not in resolved["baseline"]:
        raise ConfigError("baseline needs --kind")
    kind = BaselineKind.parse(resolved["baseline"]["kind"])
    corpus = load_data(resolved).split(resolved["eval"]["split"])
    random = kind.name in ("random_below_k", "random_disambiguation")
    seeds = [resolved["seed"] + s for s in range(resolved["baseline"]["seeds"] if random else 1)]
    metric = "f1" if kind.task == "coref" else "accuracy"
    reports = [run_baseline(kind, corpus, s) for s in seeds]
    mean, sd = mean_over_seeds(kind, corpus, seeds, metric)
    _dump({"baseline": kind.label, "seeds": seeds, "metric": metric, "mean": mean, "sd": sd,
           "reports": [r.to_dict() for r in reports]}, out / "report.json")
    print(f"{kind.label}: {metric} = {100 * mean:.2f} (sd {100 * sd:.2f} over {len(seeds)} seed(s))")
    return 0


def cmd_train(resolved, out: Path) -> int:
    corpus = load_data(resolved)
    spec = run_spec(resolved)
    result = train(corpus, spec.featurizer, spec.model, spec.train)
    save_checkpoint(result, out / "model.ckpt")
    write_log(result.log, out / "train_log.jsonl")
    report, _ = evaluate(result, corpus, spec.eval_split)
    _dump({"task": result.task, "threshold": result.threshold, "split": spec.eval_split, "report": report.to_dict()}, out / "report.json")
    if result.task == "coref":
        (out / "report.md").write_text(format_markdown([("model", report)]), encoding="utf-8")
        print(f"object F1 on {spec.eval_split}: {100 * report.f1:.2f} (threshold {result.threshold})")
    else:
        print(f"disambiguation accuracy on {spec.eval_split}: {100 * report.accuracy:.2f}")
    return 0


def cmd_eval(resolved, out: Path, checkpoint: Optional[str]) -> int:
    if not checkpoint:
        raise ConfigError("eval needs --checkpoint")
    result = load_checkpoint(checkpoint)
    corpus = load_data(resolved)
    split = resolved["eval"]["split"]
    report, preds = evaluate(result, corpus, split)
    _dump({"checkpoint": str(checkpoint), "split": split, "report": report.to_dict()}, out / "report.json")
    _dump({f"{d}|{t}": p for (d, t), p in preds.items()}, out / "predictions.json")
    metric = report.f1 if result.task == "coref" else report.accuracy
    print(f"{'object F1' if result.task == 'coref' else 'accuracy'} on {split}: {100 * metric:.2f}")
    return 0


def _suite(resolved, out: Path, rows: Optional[list[str]], ablation: bool) -> int:
    corpus = load_data(resolved)
    runner = run_ablation_suite if ablation else run_experiment_suite

    def progress(row):
        status = f"{100 * row.report.f1:.2f}" if row.ok else f"FAILED ({row.error})"
        print(f"  {row.name}: {status} [{row.seconds:.1f}s]", flush=True)

    suite = runner(corpus, run_spec(resolved), rows, out, progress)
    print(suite.markdown())
    return 1 if suite.failed else 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run")
    g.add_argument("--config", help="YAML or JSON run configuration")
    g.add_argument("--seed", type=int, help="seed for corpus generation, initialisation and training")
    g.add_argument("--data", help="synthetic | simmc:PATH | json:PATH (default synthetic)")
    g.add_argument("--out", help="output directory (default runs/<command>)")
    g.add_argument("--task", choices=("coref", "disamb"))
    g.add_argument("--split", help="evaluation split (default devtest)")
    g.add_argument("--n-dialogues", type=int, dest="n_dialogues", help="synthetic corpus size")
    g.add_argument("-v", "--verbose", action="store_true")

    f = common.add_argument_group("featurizer")
    for name in _FEATURIZER_BOOLS:
        f.add_argument(f"--{name.replace('_', '-')}", dest=name, action=argparse.BooleanOptionalAction, default=None)
    f.add_argument("--history-object-turns", dest="history_object_turns", type=_history_turns, help="x >= 0 or 'all'")
    f.add_argument("--max-tokens", dest="max_tokens", type=int)

    m = common.add_argument_group("model and training")
    for name, typ in {**_MODEL_FLAGS, **_TRAIN_FLAGS}.items():
        m.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)

    parser = argparse.ArgumentParser(prog="sitdial", description="Situated dialogue coreference and clarification toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    sub.add_parser("ingest", parents=[common], help="convert SIMMC release files to the canonical corpus format")
    sub.add_parser("stats", parents=[common], help="corpus statistics, disambiguation bias and RoI audit")
    b = sub.add_parser("baseline", parents=[common], help="run a heuristic baseline")
    b.add_argument("--kind", help="random_below_K | previous_objects | all_previous_objects | random_disambiguation | majority_disambiguation")
    b.add_argument("--seeds", type=int, help="number of seeds for random baselines (default 10)")
    sub.add_parser("train", parents=[common], help="train a model and evaluate it")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", help="path written by train")
    a = sub.add_parser("ablate", parents=[common], help="ablation suite")
    a.add_argument("--rows", help="comma-separated subset of: " + ", ".join(ABLATIONS))
    s = sub.add_parser("suite", parents=[common], help="experiment suite")
    s.add_argument("--rows", help="comma-separated subset of: " + ", ".join(EXPERIMENTS))
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        resolved = resolve(args)
        out = Path(args.out or Path("runs") / args.command)
        write_snapshot(resolved, out)
        if args.command in ("ablate", "suite"):
            rows = None
            if getattr(args, "rows", None) is not None:
                rows = [r for r in args.rows.split(",") if r]
            return _suite(resolved, out, rows, ablation=args.command == "ablate")
        if args.command == "eval":
            return cmd_eval(resolved, out, args.checkpoint)
        handler = {
            "gen": cmd_gen, "ingest": cmd_ingest, "stats": cmd_stats,
            "baseline": cmd_baseline, "train": cmd_train,
        }[args.command]
        return handler(resolved, out)
    except (SitDialError, OSError, yaml.YAMLError) as exc:
        print(f"sitdial {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
