"""Ablation and experiment suites: one trained or heuristic system per row.

Rows run in order with a shared seed. A row that raises is recorded as failed
and the suite moves on; callers decide what a failure means for them.
"""
from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import Corpus
from .featurize import ALL, FeaturizerConfig
from .heuristics import BaselineKind, run_baseline
from .metrics import EvalReport, format_markdown, report_from_counts
from .neural import ModelConfig, TrainConfig, evaluate, train
from .neural.checkpoint import save_checkpoint, write_log

log = logging.getLogger(__name__)

RANDOM_BASELINE_SEEDS = 10


@dataclass(frozen=True)
class RunSpec:
    """Everything a trained row needs besides the corpus."""

    featurizer: FeaturizerConfig = FeaturizerConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval_split: str = "devtest"

    def with_overrides(self, featurizer: Optional[dict] = None, model: Optional[dict] = None) -> "RunSpec":
        return RunSpec(
            self.featurizer.with_(**(featurizer or {})),
            self.model.with_(**(model or {})),
            self.train,
            self.eval_split,
        )

    def to_dict(self) -> dict:
        return {
            "featurizer": self.featurizer.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval_split": self.eval_split,
        }


@dataclass(frozen=True)
class Variant:
    name: str
    featurizer: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    baseline: Optional[str] = None


# Ablation rows; keys double as CLI row names.
ABLATIONS: dict[str, Variant] = {
    v.name: v
    for v in (
        Variant("full"),
        Variant("no_roi", {"use_roi": False}),
        Variant("no_bbox", {"use_bbox": False}),
        Variant("no_position_counts", {"use_position_counts": False}),
        Variant("language_only", model={"relational_layers": 0, "cross_layers": 0}),
        Variant("no_user_utterance", {"use_user_utterance": False}),
        Variant("no_prev_system_turn", {"use_prev_system_turn": False}),
        Variant("no_prev_objects", {"history_object_turns": 0}),
        Variant("no_descriptions", {"use_descriptions": False}),
        Variant("no_colours", {"use_colours": False}),
        Variant("no_types", {"use_types": False}),
        Variant("no_ids_in_descriptions", {"use_ids_in_descriptions": False}),
        Variant("oracle_descriptions", {"oracle_descriptions": True}),
    )
}

_GLOBAL = {"use_global_tokens": True, "use_ids_in_descriptions": False}

EXPERIMENTS: dict[str, Variant] = {
    v.name: v
    for v in (
        Variant("full"),
        Variant("all_previous_objects", {"history_object_turns": ALL}),
        Variant("no_duplicated_objects", {"dedup_descriptions": True}),
        Variant("baseline_random_below_141", baseline="random_below_141"),
        Variant("baseline_random_below_5", baseline="random_below_5"),
        Variant("baseline_previous_objects", baseline="previous_objects"),
        Variant("baseline_all_previous_objects", baseline="all_previous_objects"),
        Variant("global_tokens", dict(_GLOBAL)),
        Variant("global_tokens_all_previous_objects", {**_GLOBAL, "history_object_turns": ALL}),
        Variant("global_tokens_no_descriptions", {**_GLOBAL, "use_descriptions": False}),
        Variant("global_tokens_no_roi", {**_GLOBAL, "use_roi": False}),
        Variant("global_tokens_oracle_descriptions", {**_GLOBAL, "oracle_descriptions": True}),
    )
}


@dataclass
class RowResult:
    name: str
    ok: bool
    report: Optional[EvalReport] = None
    config: dict = field(default_factory=dict)
    error: Optional[str] = None
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "ok": self.ok,
            "report": self.report.to_dict() if self.report else None,
            "config": self.config,
            "error": self.error,
            "seconds": self.seconds,
            "extra": self.extra,
        }


@dataclass
class SuiteResult:
    title: str
    rows: list[RowResult]

    @property
    def failed(self) -> list[str]:
        return [r.name for r in self.rows if not r.ok]

    def row(self, name: str) -> RowResult:
        return next(r for r in self.rows if r.name == name)

    def markdown(self) -> str:
        ok = [r for r in self.rows if r.ok]
        ref = next((r.report.f1 for r in ok if r.name == "full"), None)
        body = format_markdown([(r.name, r.report) for r in ok], reference=ref)
        lines = [f"## {self.title}", "", body.rstrip("\n")]
        for r in self.rows:
            if not r.ok:
                lines.append(f"| {r.name} | failed | | |" + (" |" if ref is not None else ""))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"title": self.title, "rows": [r.to_dict() for r in self.rows], "failed": self.failed}


def _mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    """Average of per-seed metrics; counts are summed."""
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    out = report_from_counts(tp, fp, fn, sum(r.n for r in reports))
    for name in ("precision", "recall", "f1", "pr_mean"):
        setattr(out, name, float(np.mean([getattr(r, name) for r in reports])))
    return out


def run_variant(corpus: Corpus, base: RunSpec, variant: Variant, out_dir: Optional[Path] = None) -> RowResult:
    """Train-and-evaluate (or run the heuristic for) one row; never raises."""
    t0 = time.perf_counter()
    config: dict = {"variant": variant.name}
    try:
        if variant.baseline:
            kind = BaselineKind.parse(variant.baseline)
            part = corpus.split(base.eval_split)
            seeds = (
                [base.train.seed + s for s in range(RANDOM_BASELINE_SEEDS)]
                if kind.name == "random_below_k"
                else [base.train.seed]
            )
            config.update({"baseline": kind.label, "seeds": seeds, "eval_split": base.eval_split})
            report = _mean_report([run_baseline(kind, part, s) for s in seeds])
            result = RowResult(variant.name, True, report, config)
        else:
            spec = base.with_overrides(variant.featurizer, variant.model)
            config.update(spec.to_dict())
            trained = train(corpus, spec.featurizer, spec.model, spec.train)
            config["model"] = trained.model_config.to_dict()
            config["threshold"] = trained.threshold
            report, _ = evaluate(trained, corpus, spec.eval_split)
            result = RowResult(variant.name, True, report, config, extra={"log": trained.log})
            if spec.featurizer.use_global_tokens:
                result.extra["n_global_tokens"] = len(trained.global_tokens.prefabs)
            if out_dir is not None:
                row_dir = out_dir / variant.name
                row_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(trained, row_dir / "model.ckpt")
                write_log(trained.log, row_dir / "train_log.jsonl")
    except Exception as exc:  # a failing row is reported, the suite carries on
        log.error("row %s failed: %s", variant.name, exc)
        result = RowResult(variant.name, False, None, config, error="".join(traceback.format_exception_only(type(exc), exc)).strip())
    result.seconds = round(time.perf_counter() - t0, 3)
    if out_dir is not None:
        row_dir = out_dir / variant.name
        row_dir.mkdir(parents=True, exist_ok=True)
        (row_dir / "config.resolved.json").write_text(json.dumps(result.config, indent=2, sort_keys=True))
        (row_dir / "report.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True, default=str))
    return result


def _run_suite(title, table, corpus, base, names, out_dir, progress: Optional[Callable] = None) -> SuiteResult:
    names = list(table) if names is None else list(names)
    unknown = [n for n in names if n not in table]
    rows = []
    for name in names:
        if name in unknown:
            rows.append(RowResult(name, False, error=f"unknown row {name!r}"))
            continue
        row = run_variant(corpus, base, table[name], out_dir)
        rows.append(row)
        if progress:
            progress(row)
    suite = SuiteResult(title, rows)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "suite.json").write_text(json.dumps(suite.to_dict(), indent=2, sort_keys=True, default=str))
        (out_dir / "suite.md").write_text(suite.markdown())
    return suite


def run_ablation_suite(
    corpus: Corpus,
    base: RunSpec,
    names: Optional[Sequence[str]] = None,
    out_dir: Optional[Path] = None,
    progress: Optional[Callable] = None,
) -> SuiteResult:
    """The full model plus the requested ablations (all of them when ``names`` is None).

    The full model is always included so every row has a Δ reference.
    """
    if names is not None:
        names = ["full"] + [n for n in names if n != "full"]
    return _run_suite("Ablations", ABLATIONS, corpus, base, names, out_dir, progress)


def run_experiment_suite(
    corpus: Corpus,
    base: RunSpec,
    names: Optional[Sequence[str]] = None,
    out_dir: Optional[Path] = None,
    progress: Optional[Callable] = None,
) -> SuiteResult:
    return _run_suite("Experiments", EXPERIMENTS, corpus, base, names, out_dir, progress)
