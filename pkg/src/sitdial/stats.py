"""Linguistic-bias analysis and RoI representation audits."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import Corpus
from .errors import ConstantInput, LengthMismatch, NoLabeledTurns, NoPairs, TooFewSamples
from .featurize import simplify_colour, tokenize

TAGS = ("preposition", "adjective", "wh_word", "other")
ADJECTIVE_SUFFIXES = ("ful", "ous", "ive", "able", "ible", "ish", "less", "est")
BETACF_TOL = 1e-12
BETACF_MAX_ITER = 10_000


@dataclass(frozen=True)
class Lexicon:
    prepositions: frozenset
    adjectives: frozenset
    wh_words: frozenset
    adjective_suffixes: tuple = ADJECTIVE_SUFFIXES

    def tag(self, token: str) -> str:
        if token in self.wh_words:
            return "wh_word"
        if token in self.prepositions:
            return "preposition"
        if token in self.adjectives:
            return "adjective"
        # suffix heuristic only for longer alphabetic words, so "less" or "best" alone stay untouched
        if token.isalpha() and len(token) > 5 and token.endswith(self.adjective_suffixes):
            return "adjective"
        return "other"


def _read_words(name: str) -> frozenset:
    text = resources.files("sitdial.data.lexicon").joinpath(name).read_text(encoding="utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip() and not w.startswith("#"))


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    return Lexicon(
        prepositions=_read_words("prepositions.txt"),
        adjectives=_read_words("adjectives.txt"),
        wh_words=_read_words("wh_words.txt"),
    )


@dataclass(frozen=True)
class PosProfile:
    preposition: int
    adjective: int
    wh_word: int
    other: int
    token_count: int


def pos_profile(utterance: str, lexicon: Optional[Lexicon] = None) -> PosProfile:
    lex = lexicon or default_lexicon()
    counts = dict.fromkeys(TAGS, 0)
    tokens = tokenize(utterance)
    for tok in tokens:
        counts[lex.tag(tok)] += 1
    return PosProfile(token_count=len(tokens), **counts)


# ---------------------------------------------------------------------------
# Pearson correlation with a t-test p-value


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETACF_TOL:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_tailed_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with df degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_value: float
    n: int


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise LengthMismatch(f"pearson needs equal-length vectors, got {xa.shape} and {ya.shape}")
    n = xa.size
    if n < 3:
        raise TooFewSamples(f"pearson needs n >= 3, got {n}")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ConstantInput("correlation undefined for a constant vector")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return CorrelationResult(r, 0.0, n)
    t = r * math.sqrt(df / (1.0 - r * r))
    return CorrelationResult(r, t_two_tailed_p(t, df), n)


# ---------------------------------------------------------------------------
# disambiguation bias


@dataclass
class BiasReport:
    n: int
    n_true: int
    n_false: int
    prepositions_vs_no_disamb: CorrelationResult
    adjectives_vs_no_disamb: CorrelationResult
    wh_vs_disamb: CorrelationResult
    length_true_mean: float
    length_true_sd: float
    length_false_mean: float
    length_false_sd: float
    tag_means: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def labeled_utterances(corpus: Corpus) -> list[tuple[str, bool]]:
    return [(t.user, bool(t.disambiguate)) for _, t in corpus.iter_turns() if t.disambiguate is not None]


def _mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def analyze_disambiguation_bias(corpus: Corpus, lexicon: Optional[Lexicon] = None) -> BiasReport:
    """Correlate per-utterance tag counts with the disambiguation label.

    Prepositions and adjectives are correlated with the *no disambiguation*
    indicator, wh-words with the *disambiguation* indicator. Lengths are
    token counts under the package tokenizer.
    """
    rows = labeled_utterances(corpus)
    if not rows:
        raise NoLabeledTurns("corpus carries no disambiguation labels")
    profiles = [pos_profile(u, lexicon) for u, _ in rows]
    label = np.array([lab for _, lab in rows], dtype=np.float64)
    preps = [p.preposition for p in profiles]
    adjs = [p.adjective for p in profiles]
    whs = [p.wh_word for p in profiles]
    lengths = np.array([p.token_count for p in profiles], dtype=np.float64)
    lt_mean, lt_sd = _mean_sd(lengths[label == 1])
    lf_mean, lf_sd = _mean_sd(lengths[label == 0])
    tag_means = {
        name: {
            "true": float(np.mean(np.asarray(vals)[label == 1])) if (label == 1).any() else float("nan"),
            "false": float(np.mean(np.asarray(vals)[label == 0])) if (label == 0).any() else float("nan"),
        }
        for name, vals in (("preposition", preps), ("adjective", adjs), ("wh_word", whs))
    }
    return BiasReport(
        n=len(rows),
        n_true=int(label.sum()),
        n_false=int((1 - label).sum()),
        prepositions_vs_no_disamb=pearson(preps, 1 - label),
        adjectives_vs_no_disamb=pearson(adjs, 1 - label),
        wh_vs_disamb=pearson(whs, label),
        length_true_mean=lt_mean,
        length_true_sd=lt_sd,
        length_false_mean=lf_mean,
        length_false_sd=lf_sd,
        tag_means=tag_means,
    )


def shuffle_labels(corpus: Corpus, seed: int) -> Corpus:
    """Copy of ``corpus`` with disambiguation labels permuted across labelled turns."""
    from dataclasses import replace

    rng = np.random.default_rng(seed)
    labels = [t.disambiguate for _, t in corpus.iter_turns() if t.disambiguate is not None]
    perm = iter([labels[i] for i in rng.permutation(len(labels))])
    dialogues = []
    for d in corpus.dialogues:
        turns = tuple(replace(t, disambiguate=next(perm)) if t.disambiguate is not None else t for t in d.turns)
        dialogues.append(replace(d, turns=turns))
    return Corpus(corpus.scenes, tuple(dialogues))


# ---------------------------------------------------------------------------
# RoI audit


@dataclass(frozen=True)
class RoiAudit:
    mean: float
    sd: float
    n_pairs: int
    n_groups: int


def description_key(obj, predicted: bool = False) -> tuple[str, str]:
    if predicted and obj.pred_colour is not None and obj.pred_type is not None:
        return simplify_colour(obj.pred_colour), obj.pred_type
    return simplify_colour(obj.colour), obj.type


def _group_vectors(corpus: Corpus, predicted: bool) -> dict:
    groups: dict = {}
    for sid in sorted(corpus.scenes):
        for obj in corpus.scenes[sid].objects:
            if obj.roi:
                groups.setdefault(description_key(obj, predicted), []).append(obj.roi)
    return groups


def roi_similarity_audit(corpus: Corpus, predicted: bool = False) -> RoiAudit:
    """Cosine similarity over every unordered pair of objects sharing a description.

    Descriptions are (simplified colour, type); gold classes by default.
    Pairs are pooled over the whole corpus and the mean/SD are exact
    (population SD over pairs).
    """
    groups = _group_vectors(corpus, predicted)
    total = 0
    s1 = s2 = 0.0
    n_groups = 0
    for key in sorted(groups):
        vecs = np.asarray(groups[key], dtype=np.float64)
        if len(vecs) < 2:
            continue
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        unit = vecs / np.where(norms > 0, norms, 1.0)
        gram = unit @ unit.T
        iu = np.triu_indices(len(vecs), k=1)
        cos = gram[iu]
        total += cos.size
        s1 += float(cos.sum())
        s2 += float(cos @ cos)
        n_groups += 1
    if total == 0:
        raise NoPairs("no two objects share a description")
    mean = s1 / total
    var = max(s2 / total - mean * mean, 0.0)
    return RoiAudit(mean, math.sqrt(var), total, n_groups)


def roi_pair_cosines(corpus: Corpus, predicted: bool = False) -> Iterable[float]:
    """Every same-description cosine (small corpora only; used as a brute-force check)."""
    groups = _group_vectors(corpus, predicted)
    for key in sorted(groups):
        vecs = groups[key]
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                a = np.asarray(vecs[i]); b = np.asarray(vecs[j])
                yield float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
