"""Object F1 for coreference, accuracy for disambiguation, and turn slices."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .corpus import Corpus
from .errors import EmptyInput, LengthMismatch

TurnKey = tuple[str, int]

SLICE_NAMES = ("all_labeled_turns", "disamb_true_turns", "disamb_false_turns", "post_clarification_turns")


@dataclass
class EvalReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n: int = 0
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    pr_mean: Optional[float] = None
    accuracy: Optional[float] = None
    slices: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("n", "tp", "fp", "fn", "precision", "recall", "f1", "pr_mean", "accuracy")}
        out["slices"] = {name: rep.to_dict() for name, rep in self.slices.items()}
        return out


def multiset_counts(pred: Iterable[int], gold: Iterable[int]) -> tuple[int, int, int]:
    p, g = Counter(pred), Counter(gold)
    tp = sum((p & g).values())
    return tp, sum(p.values()) - tp, sum(g.values()) - tp


def _ratio(num: int, den: int) -> float:
    # 0/0 is scored as perfect: nothing was predicted (or required) and nothing was missed
    return num / den if den else 1.0


def report_from_counts(tp: int, fp: int, fn: int, n: int) -> EvalReport:
    if n == 0:
        return EvalReport(n=0)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return EvalReport(tp, fp, fn, n, precision, recall, f1, (precision + recall) / 2)


def object_f1(predictions: Sequence[Iterable[int]], golds: Sequence[Iterable[int]]) -> EvalReport:
    """Micro-averaged multiset F1 over aligned per-turn predictions and golds.

    A ``None`` prediction counts as empty. ``pr_mean`` carries the arithmetic
    mean of precision and recall alongside the harmonic ``f1``.
    """
    if len(predictions) != len(golds):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(golds)} gold turns")
    tp = fp = fn = 0
    for pred, gold in zip(predictions, golds):
        a, b, c = multiset_counts(pred or (), gold)
        tp += a
        fp += b
        fn += c
    return report_from_counts(tp, fp, fn, len(golds))


def accuracy(predictions: Sequence[bool], golds: Sequence[bool]) -> float:
    if len(predictions) != len(golds):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(golds)} labels")
    if not golds:
        raise EmptyInput("accuracy of an empty label set")
    return sum(bool(p) == bool(g) for p, g in zip(predictions, golds)) / len(golds)


def evaluated_turn_keys(corpus: Corpus, include_excluded: bool = False) -> list[TurnKey]:
    keys = []
    for d, t in corpus.iter_turns():
        if t.targets is None or (t.excluded and not include_excluded):
            continue
        keys.append((d.dialogue_id, t.index))
    return keys


def slice_membership(corpus: Corpus) -> dict[str, list[TurnKey]]:
    """Turn keys per slice. Only turns carrying targets are listed.

    Labelled turns are included even when excluded from the headline
    evaluation; post-clarification turns are those right after a true label.
    """
    out = {name: [] for name in SLICE_NAMES}
    for d in corpus.dialogues:
        for t in d.turns:
            if t.targets is None:
                continue
            key = (d.dialogue_id, t.index)
            if t.disambiguate is not None:
                out["all_labeled_turns"].append(key)
                out["disamb_true_turns" if t.disambiguate else "disamb_false_turns"].append(key)
            if t.index > 0 and d.turns[t.index - 1].disambiguate is True:
                out["post_clarification_turns"].append(key)
    return out


def _gold_lookup(corpus: Corpus) -> dict[TurnKey, tuple[int, ...]]:
    return {(d.dialogue_id, t.index): t.targets for d, t in corpus.iter_turns() if t.targets is not None}


def evaluate_coref(predictions: Mapping[TurnKey, Iterable[int]], corpus: Corpus, with_slices: bool = True) -> EvalReport:
    """Headline object F1 over evaluated turns plus the labelled-turn slices."""
    gold = _gold_lookup(corpus)
    keys = evaluated_turn_keys(corpus)
    report = object_f1([predictions.get(k, ()) for k in keys], [gold[k] for k in keys])
    if with_slices:
        report.slices = slice_eval(predictions, corpus)
    return report


def slice_eval(predictions: Mapping[TurnKey, Iterable[int]], corpus: Corpus) -> dict[str, EvalReport]:
    gold = _gold_lookup(corpus)
    return {
        name: object_f1([predictions.get(k, ()) for k in keys], [gold[k] for k in keys])
        for name, keys in slice_membership(corpus).items()
    }


def format_markdown(rows: Sequence[tuple[str, EvalReport]], metric: str = "f1", reference: Optional[float] = None) -> str:
    """Table with one row per system; values in percent, Δ against ``reference`` when given."""
    header = "| System | Object F1 | Precision | Recall |" + (" Δ |" if reference is not None else "")
    sep = "|---|---|---|---|" + ("---|" if reference is not None else "")
    lines = [header, sep]

    def pct(v):
        return "n/a" if v is None else f"{100 * v:.2f}"

    for name, rep in rows:
        line = f"| {name} | {pct(getattr(rep, metric))} | {pct(rep.precision)} | {pct(rep.recall)} |"
        if reference is not None:
            val = getattr(rep, metric)
            line += " n/a |" if val is None else f" {100 * (val - reference):+.2f} |"
        lines.append(line)
    return "\n".join(lines) + "\n"
