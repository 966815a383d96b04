"""Non-neural baselines for both tasks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .corpus import Corpus, Dialogue, Turn
from .errors import ConfigError
from .metrics import EvalReport, accuracy, evaluate_coref, evaluated_turn_keys

COREF_KINDS = ("random_below_k", "previous_objects", "all_previous_objects")
DISAMB_KINDS = ("random_disambiguation", "majority_disambiguation")


@dataclass(frozen=True)
class BaselineKind:
    name: str
    k: Optional[int] = None

    def __post_init__(self):
        if self.name not in COREF_KINDS + DISAMB_KINDS:
            raise ConfigError(f"unknown baseline {self.name!r}")
        if self.name == "random_below_k" and (self.k is None or self.k < 1):
            raise ConfigError("random_below_k needs k >= 1")

    @property
    def task(self) -> str:
        return "coref" if self.name in COREF_KINDS else "disamb"

    @property
    def label(self) -> str:
        return f"random_below_{self.k}" if self.name == "random_below_k" else self.name

    @classmethod
    def parse(cls, text: str) -> "BaselineKind":
        """Accepts ``previous_objects``, ``random_below_k:141`` or ``random_below_141``."""
        if text.startswith("random_below_"):
            tail = text[len("random_below_"):].lstrip("k:")
            try:
                return cls("random_below_k", int(tail))
            except ValueError:
                raise ConfigError(f"cannot parse k from {text!r}") from None
        return cls(text)


def predict_coref(baseline: BaselineKind, turn: Turn, dialogue: Dialogue, rng: Optional[np.random.Generator] = None) -> list[int]:
    if baseline.name == "random_below_k":
        if rng is None:
            raise ConfigError("random baselines need an rng")
        # one id per turn, not restricted to the scene
        return [int(rng.integers(baseline.k))]
    if baseline.name == "previous_objects":
        if turn.index == 0:
            return []
        return list(dict.fromkeys(dialogue.turns[turn.index - 1].system_mentioned))
    if baseline.name == "all_previous_objects":
        seen: dict[int, None] = {}
        for prev in dialogue.turns[: turn.index]:
            seen.update(dict.fromkeys(prev.system_mentioned))
        return list(seen)
    raise ConfigError(f"{baseline.name} is not a coreference baseline")


def predict_disambiguation(baseline: BaselineKind, rng: Optional[np.random.Generator] = None) -> bool:
    if baseline.name == "random_disambiguation":
        if rng is None:
            raise ConfigError("random baselines need an rng")
        return bool(rng.random() < 0.5)
    if baseline.name == "majority_disambiguation":
        return False
    raise ConfigError(f"{baseline.name} is not a disambiguation baseline")


def run_coref_baseline(baseline: BaselineKind, corpus: Corpus, seed: int = 0) -> EvalReport:
    rng = np.random.default_rng(seed)
    wanted = set(evaluated_turn_keys(corpus, include_excluded=True))
    preds = {}
    for d, t in corpus.iter_turns():
        key = (d.dialogue_id, t.index)
        if key in wanted:
            preds[key] = predict_coref(baseline, t, d, rng)
    return evaluate_coref(preds, corpus)


def run_disamb_baseline(baseline: BaselineKind, corpus: Corpus, seed: int = 0) -> EvalReport:
    rng = np.random.default_rng(seed)
    golds = [t.disambiguate for _, t in corpus.iter_turns() if t.disambiguate is not None]
    preds = [predict_disambiguation(baseline, rng) for _ in golds]
    return EvalReport(n=len(golds), accuracy=accuracy(preds, golds))


def run_baseline(baseline: BaselineKind, corpus: Corpus, seed: int = 0) -> EvalReport:
    if baseline.task == "coref":
        return run_coref_baseline(baseline, corpus, seed)
    return run_disamb_baseline(baseline, corpus, seed)


def mean_over_seeds(baseline: BaselineKind, corpus: Corpus, seeds, metric: str) -> tuple[float, float]:
    values = np.array([getattr(run_baseline(baseline, corpus, s), metric) for s in seeds], dtype=np.float64)
    return float(values.mean()), float(values.std(ddof=1)) if len(values) > 1 else 0.0
