import numpy as np
import pytest

from sitdial.corpus import Corpus, Dialogue, Scene, Turn
from sitdial.errors import ConfigError
from sitdial.heuristics import (
    BaselineKind,
    mean_over_seeds,
    predict_coref,
    predict_disambiguation,
    run_baseline,
)
from sitdial.metrics import object_f1
from conftest import obj

PREV = BaselineKind("previous_objects")
ALL_PREV = BaselineKind("all_previous_objects")


def test_parse_forms():
    assert BaselineKind.parse("random_below_141") == BaselineKind("random_below_k", 141)
    assert BaselineKind.parse("random_below_k:5").k == 5
    assert BaselineKind.parse("previous_objects").task == "coref"
    assert BaselineKind.parse("majority_disambiguation").task == "disamb"
    with pytest.raises(ConfigError):
        BaselineKind.parse("random_below_k:0")
    with pytest.raises(ConfigError):
        BaselineKind("psychic")


def test_previous_objects_worked_example():
    turns = (Turn(0, "hi", "this one and that one", (60, 56)), Turn(1, "that blouse", "", (), False, (56,)))
    d = Dialogue("d", "s", turns)
    pred = predict_coref(PREV, turns[1], d)
    assert pred == [60, 56]
    rep = object_f1([pred], [turns[1].targets])
    assert rep.precision == 0.5 and rep.recall == 1.0
    assert predict_coref(PREV, turns[0], d) == []


def test_all_previous_deduplicates(tiny_corpus):
    d = tiny_corpus.dialogues[0]
    assert predict_coref(ALL_PREV, d.turns[3], d) == [60, 56]


def test_random_below_k_emits_one_id():
    rng = np.random.default_rng(0)
    t = Turn(0, "x")
    d = Dialogue("d", "s", (t,))
    draws = [predict_coref(BaselineKind("random_below_k", 5), t, d, rng) for _ in range(500)]
    assert all(len(p) == 1 and 0 <= p[0] < 5 for p in draws)
    assert {p[0] for p in draws} == set(range(5))
    with pytest.raises(ConfigError):
        predict_coref(BaselineKind("random_below_k", 5), t, d, None)


def test_oracle_corpus_gives_perfect_previous_objects():
    scene = Scene("s", tuple(obj(i) for i in range(6)))
    turns = [Turn(0, "hello", "look at this", (2,), None, ())]
    for t in range(1, 6):
        turns.append(Turn(t, "that one", "and this", (t % 6,), False, (turns[-1].system_mentioned[0],)))
    c = Corpus({"s": scene}, (Dialogue("d", "s", tuple(turns)),))
    rep = run_baseline(PREV, c)
    # turn 0 has no targets and no prediction, every later turn is exact
    assert rep.f1 == 1.0


def test_previous_objects_deterministic_and_in_scene(small_synthetic):
    a = run_baseline(PREV, small_synthetic, 0)
    b = run_baseline(PREV, small_synthetic, 99)
    assert a == b
    for d, t in small_synthetic.iter_turns():
        assert set(predict_coref(PREV, t, d)) <= small_synthetic.scene_for(d, t.index).ids


def test_random_f1_decreases_with_k(default_synthetic):
    dev = default_synthetic.split("devtest")
    seeds = range(10)
    f5, _ = mean_over_seeds(BaselineKind("random_below_k", 5), dev, seeds, "f1")
    f20, _ = mean_over_seeds(BaselineKind("random_below_k", 20), dev, seeds, "f1")
    f141, _ = mean_over_seeds(BaselineKind("random_below_k", 141), dev, seeds, "f1")
    assert f5 > f20 > f141


def test_disambiguation_baselines():
    assert predict_disambiguation(BaselineKind("majority_disambiguation")) is False
    turns = tuple(Turn(i, "x", disambiguate=True) for i in range(4))
    c = Corpus({"s": Scene("s", (obj(0),))}, (Dialogue("d", "s", turns),))
    assert run_baseline(BaselineKind("majority_disambiguation"), c).accuracy == 0.0
    mixed = tuple(Turn(i, "x", disambiguate=i < 494) for i in range(1000))
    c2 = Corpus({"s": Scene("s", (obj(0),))}, (Dialogue("d", "s", mixed),))
    assert run_baseline(BaselineKind("majority_disambiguation"), c2).accuracy == pytest.approx(0.506)
    mean, _ = mean_over_seeds(BaselineKind("random_disambiguation"), c2, range(10), "accuracy")
    assert abs(mean - 0.5) < 0.015
