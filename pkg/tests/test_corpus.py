import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sitdial.corpus import (
    Corpus,
    Dialogue,
    Scene,
    Turn,
    corpus_stats,
    from_canonical,
    load_corpus,
    save_corpus,
    to_canonical,
)
from sitdial.errors import DanglingObjectId, EmptyCorpus, MalformedRecord, MissingScene
from conftest import obj


def test_scene_invariants():
    with pytest.raises(ValueError):
        Scene("s", ())
    with pytest.raises(ValueError):
        Scene("s", (obj(1), obj(1)))
    with pytest.raises(ValueError):
        Scene("s", tuple(obj(i) for i in range(142)))
    with pytest.raises(ValueError):
        obj(0, bbox=(0, 0, 0, 5))


def test_ids_need_not_be_contiguous():
    s = Scene("s", (obj(60), obj(56), obj(3)))
    assert s.ids == {3, 56, 60}


def test_turn_indexes_must_run_from_zero():
    with pytest.raises(ValueError):
        Dialogue("d", "s", (Turn(1, "hi"),))


def test_missing_scene_and_dangling_id():
    s = Scene("s", (obj(0),))
    with pytest.raises(MissingScene):
        Corpus({}, (Dialogue("d", "s", (Turn(0, "hi"),)),))
    with pytest.raises(DanglingObjectId):
        Corpus({"s": s}, (Dialogue("d", "s", (Turn(0, "hi", targets=(5,)),)),))


def test_duplicate_targets_preserved(tiny_corpus):
    doc = to_canonical(tiny_corpus)
    again = from_canonical(json.loads(json.dumps(doc)))
    assert again.dialogues[0].turns[3].targets == (3, 7, 7)


def test_round_trip_through_files(tmp_path, small_synthetic):
    save_corpus(small_synthetic, tmp_path)
    back = load_corpus(tmp_path)
    by_id = {d.dialogue_id: d for d in back.dialogues}
    for d in small_synthetic.dialogues:
        assert by_id[d.dialogue_id] == d
    for sid, s in small_synthetic.scenes.items():
        assert back.scenes[sid] == s


def test_canonical_json_is_stable(small_synthetic):
    a = json.dumps(to_canonical(small_synthetic), sort_keys=False)
    b = json.dumps(to_canonical(from_canonical(to_canonical(small_synthetic))), sort_keys=False)
    assert a == b


def test_malformed_document(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(MalformedRecord) as exc:
        load_corpus(p)
    assert "bad.json" in str(exc.value)
    with pytest.raises(MalformedRecord):
        from_canonical({"format": "other"})


def test_stats_single_turn_without_history():
    s = Scene("s", (obj(0),))
    c = Corpus({"s": s}, (Dialogue("d", "s", (Turn(0, "that one", targets=(0,)),)),))
    rep = corpus_stats(c)
    assert rep.target_in_history_rate == 0.0
    assert rep.target_frac_below_5 == 1.0


def test_stats_empty_corpus():
    with pytest.raises(EmptyCorpus):
        corpus_stats(Corpus({}, ()))


def test_stats_on_constructed_corpus(tiny_corpus):
    rep = corpus_stats(tiny_corpus)
    # evaluated turns: 0 (empty), 2 ([56]) and 3 ([3, 7, 7]); turn 1 is excluded
    assert rep.n_targets == 4
    assert rep.target_frac_below_10 == pytest.approx(3 / 4)
    assert rep.target_frac_below_5 == pytest.approx(1 / 4)
    # turns with targets: 2 (56 mentioned before) and 3 (3, 7 never mentioned before)
    assert rep.target_in_history_rate == pytest.approx(1 / 2)
    assert rep.disamb_true_rate == 0.5
    assert rep.scene_size_max == 4


def _bruteforce_stats(corpus):
    targets, hist = [], []
    for d in corpus.dialogues:
        for t in d.turns:
            if t.targets is None or t.excluded:
                continue
            targets += list(t.targets)
            if t.targets:
                before = [i for u in d.turns[: t.index] for i in u.system_mentioned]
                hist.append(any(i in before for i in t.targets))
    sizes = [len(corpus.scenes[s].objects) for s in {d.scene_id for d in corpus.dialogues}]
    labels = [t.disambiguate for _, t in corpus.iter_turns() if t.disambiguate is not None]
    return {
        "below10": np.mean([i < 10 for i in targets]),
        "below5": np.mean([i < 5 for i in targets]),
        "hist": np.mean(hist),
        "size_mean": np.mean(sizes),
        "size_sd": np.std(sizes, ddof=1),
        "true": np.mean(labels),
    }


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 1000))
def test_stats_equal_bruteforce_on_synthetic(seed):
    from sitdial.synth import CorpusSpec, generate

    c = generate(CorpusSpec(n_dialogues=40, seed=seed))
    rep = corpus_stats(c)
    ref = _bruteforce_stats(c)
    assert rep.target_frac_below_10 == pytest.approx(ref["below10"])
    assert rep.target_frac_below_5 == pytest.approx(ref["below5"])
    assert rep.target_in_history_rate == pytest.approx(ref["hist"])
    assert rep.scene_size_mean == pytest.approx(ref["size_mean"])
    assert rep.scene_size_sd == pytest.approx(ref["size_sd"])
    assert rep.disamb_true_rate == pytest.approx(ref["true"])
