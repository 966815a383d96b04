import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cosine_pairs_bruteforce, pearson_p_from_r, pearson_scipy
from sitdial.corpus import Corpus, Dialogue, Scene, Turn
from sitdial.errors import ConstantInput, LengthMismatch, NoLabeledTurns, NoPairs, TooFewSamples
from sitdial.stats import (
    analyze_disambiguation_bias,
    betainc_regularized,
    pearson,
    pos_profile,
    roi_pair_cosines,
    roi_similarity_audit,
    shuffle_labels,
    t_two_tailed_p,
)
from conftest import obj

# Frozen from scipy.stats.t (two-tailed) before the incomplete-beta code existed.
P_R05_N100 = 1.1804920270376276e-07


def test_prepositions_counted():
    assert pos_profile("in the top shelf").preposition == 1


def test_colour_phrase_has_two_adjectives():
    assert pos_profile("light blue jacket").adjective >= 2


def test_empty_profile():
    p = pos_profile("")
    assert (p.preposition, p.adjective, p.wh_word, p.other, p.token_count) == (0, 0, 0, 0, 0)


def test_wh_words_and_totals():
    p = pos_profile("What's the price of that red dress?")
    assert p.wh_word == 1 and p.preposition == 1 and p.adjective == 1
    assert p.preposition + p.adjective + p.wh_word + p.other == p.token_count


def test_perfect_correlations():
    assert pearson([1, 2, 3], [2, 4, 6]).r == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]).r == pytest.approx(-1.0)


def test_p_value_for_r_half_n_hundred():
    n = 100
    assert pearson_p_from_r(0.5, n) == pytest.approx(P_R05_N100, rel=1e-12)
    t = 0.5 * math.sqrt((n - 2) / 0.75)
    assert t_two_tailed_p(t, n - 2) == pytest.approx(P_R05_N100, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.05, 40), st.floats(0.05, 40))
def test_incomplete_beta_matches_scipy(x, a, b):
    from scipy.special import betainc

    assert betainc_regularized(a, b, x) == pytest.approx(float(betainc(a, b, x)), rel=1e-9, abs=1e-13)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=40), st.integers(0, 2**31))
def test_pearson_matches_scipy(x, seed):
    y = np.random.default_rng(seed).normal(size=len(x)) + np.asarray(x) * 0.1
    if np.ptp(x) < 1e-6:
        return
    ours = pearson(x, y)
    r, p = pearson_scipy(x, y)
    assert ours.r == pytest.approx(r, abs=1e-9)
    assert ours.p_value == pytest.approx(p, rel=1e-6, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_symmetric_and_affine_invariant(seed, a, b, c, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=30)
    y = x + rng.normal(size=30)
    base = pearson(x, y)
    assert pearson(y, x).r == pytest.approx(base.r, abs=1e-12)
    moved = pearson(a * x + b, c * y + d)
    assert moved.r == pytest.approx(base.r, abs=1e-9)
    assert moved.p_value == pytest.approx(base.p_value, rel=1e-6)


def test_p_value_monotone_in_r():
    n = 50
    rs = np.linspace(0.0, 0.95, 40)
    ps = [t_two_tailed_p(r * math.sqrt((n - 2) / (1 - r * r)), n - 2) for r in rs]
    assert all(a > b for a, b in zip(ps, ps[1:]))
    assert ps[0] == pytest.approx(1.0)


def test_pearson_errors():
    with pytest.raises(TooFewSamples):
        pearson([1, 2], [1, 2])
    with pytest.raises(ConstantInput):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(LengthMismatch):
        pearson([1, 2, 3], [1, 2])


def test_bias_signs_on_synthetic(default_synthetic):
    rep = analyze_disambiguation_bias(default_synthetic)
    assert rep.prepositions_vs_no_disamb.r > 0
    assert rep.adjectives_vs_no_disamb.r > 0
    assert rep.wh_vs_disamb.r > 0
    assert rep.length_true_mean < rep.length_false_mean


def test_shuffled_labels_destroy_correlation():
    from sitdial.synth import CorpusSpec, generate

    corpus = generate(CorpusSpec(n_dialogues=2000, seed=3))
    rep = analyze_disambiguation_bias(shuffle_labels(corpus, seed=1))
    for res in (rep.prepositions_vs_no_disamb, rep.adjectives_vs_no_disamb, rep.wh_vs_disamb):
        assert abs(res.r) < 0.05 and res.p_value > 0.01


def test_no_labels_raises(tiny_corpus):
    from dataclasses import replace

    d = tiny_corpus.dialogues[0]
    c = Corpus(tiny_corpus.scenes, (replace(d, turns=tuple(replace(t, disambiguate=None) for t in d.turns)),))
    with pytest.raises(NoLabeledTurns):
        analyze_disambiguation_bias(c)


def _roi_corpus(vectors):
    scene = Scene("s", tuple(obj(i, "red", "dress hanging", roi=tuple(v)) for i, v in enumerate(vectors)))
    return Corpus({"s": scene}, (Dialogue("d", "s", (Turn(0, "hi"),)),))


def test_identical_roi_vectors():
    a = roi_similarity_audit(_roi_corpus([(1.0, 2.0), (1.0, 2.0), (1.0, 2.0)]))
    assert a.mean == pytest.approx(1.0) and a.sd == pytest.approx(0.0, abs=1e-7) and a.n_pairs == 3


def test_orthogonal_roi_pair():
    assert roi_similarity_audit(_roi_corpus([(1.0, 0.0), (0.0, 3.0)])).mean == pytest.approx(0.0)


def test_no_pairs_raises():
    with pytest.raises(NoPairs):
        roi_similarity_audit(_roi_corpus([(1.0, 0.0)]))


def test_audit_equals_bruteforce(small_synthetic):
    audit = roi_similarity_audit(small_synthetic)
    groups = {}
    for s in small_synthetic.scenes.values():
        for o in s.objects:
            groups.setdefault((o.colour, o.type), []).append(o.roi)
    cos = [c for vecs in groups.values() for c in cosine_pairs_bruteforce(vecs)]
    assert audit.n_pairs == len(cos)
    assert audit.mean == pytest.approx(np.mean(cos), abs=1e-12)
    assert audit.sd == pytest.approx(np.std(cos), abs=1e-9)
    assert sorted(roi_pair_cosines(small_synthetic)) == pytest.approx(sorted(cos))
