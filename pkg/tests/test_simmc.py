import json

import pytest

from sitdial.corpus import corpus_stats
from sitdial.errors import DanglingObjectId, MalformedRecord, MissingScene
from sitdial.simmc import get_path, ingest_directory, ingest_simmc, normalise_type


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def _release(tmp_path, targets=(3,), label=None, scene_name="cloth_store_1", extra_turn=None):
    turns = [
        {
            "transcript": "How much is that jacket?",
            "system_transcript": "Which one?",
            "transcript_annotated": {"act_attributes": {"objects": list(targets)}, "disambiguation_label": label},
            "system_transcript_annotated": {"act_attributes": {"objects": [0, 3]}},
        }
    ]
    if extra_turn:
        turns.append(extra_turn)
    dials = _write(
        tmp_path / "simmc2_dials_dstc10_devtest.json",
        {"dialogue_data": [{"dialogue_idx": 7, "domain": "fashion", "scene_ids": {"0": scene_name}, "dialogue": turns}]},
    )
    scene = _write(
        tmp_path / "cloth_store_1_scene.json",
        {
            "scenes": [
                {
                    "objects": [
                        {"index": 0, "prefab_path": "Jacket_A", "bbox": [10, 20, 200, 100]},
                        {"index": 3, "prefab_path": "Jacket_B", "bbox": [500, 20, 210, 110]},
                    ]
                }
            ]
        },
    )
    meta = _write(
        tmp_path / "fashion_prefab_metadata_all.json",
        {
            "Jacket_A": {"color": "light blue", "assetType": "jacket_hanging"},
            "Jacket_B": {"color": "dark grey, white", "assetType": "jacket_hanging"},
        },
    )
    return dials, scene, meta


def test_direct_mapping(tmp_path):
    dials, scene, meta = _release(tmp_path)
    corpus, report = ingest_simmc([dials], [scene], [meta])
    d = corpus.dialogues[0]
    assert d.split == "devtest" and d.dialogue_id == "7"
    t = d.turns[0]
    assert t.targets == (3,)
    assert t.system_mentioned == (0, 3)
    obj = corpus.scenes["cloth_store_1"].get(3)
    assert obj.type == "jacket hanging"
    # bbox stored in the release as x, y, h, w
    assert obj.bbox == (500.0, 20.0, 110.0, 210.0)
    assert report.n_scenes == 1


def test_colour_kept_verbatim(tmp_path):
    corpus, _ = ingest_simmc(*[[p] for p in _release(tmp_path)])
    assert corpus.scenes["cloth_store_1"].get(0).colour == "light blue"


def test_repeated_targets_kept(tmp_path):
    corpus, _ = ingest_simmc(*[[p] for p in _release(tmp_path, targets=(3, 3))])
    assert corpus.dialogues[0].turns[0].targets == (3, 3)


def test_true_label_turn_is_excluded_but_keeps_targets(tmp_path):
    corpus, _ = ingest_simmc(*[[p] for p in _release(tmp_path, label=1)])
    t = corpus.dialogues[0].turns[0]
    assert t.disambiguate is True and t.excluded and t.targets == (3,)
    assert corpus_stats(corpus).n_history_turns == 0


def test_missing_scene(tmp_path):
    dials, scene, meta = _release(tmp_path, scene_name="nowhere")
    with pytest.raises(MissingScene):
        ingest_simmc([dials], [scene], [meta])


def test_dangling_ids_reported_or_raised(tmp_path):
    files = [[p] for p in _release(tmp_path, targets=(3, 99))]
    corpus, report = ingest_simmc(*files)
    assert corpus.dialogues[0].turns[0].targets == (3,)
    assert len(report.dangling) == 1 and "99" in report.dangling[0]
    with pytest.raises(DanglingObjectId):
        ingest_simmc(*files, strict=True)


def test_malformed_file_has_locator(tmp_path):
    dials, scene, meta = _release(tmp_path)
    dials.write_text(json.dumps({"dialogue_data": [{"dialogue_idx": 1}]}))
    with pytest.raises(MalformedRecord) as exc:
        ingest_simmc([dials], [scene], [meta])
    assert "dialogue_data[0]" in str(exc.value)


def test_directory_discovery(tmp_path):
    _release(tmp_path)
    corpus, _ = ingest_directory(tmp_path)
    assert len(corpus.dialogues) == 1


def test_helpers():
    assert get_path({"a": [{"b": 3}]}, "a.0.b") == 3
    assert get_path({}, "x.y", None) is None
    assert normalise_type("blouse_hanging") == "blouse hanging"
    assert normalise_type("CoffeeTable") == "coffee table"
