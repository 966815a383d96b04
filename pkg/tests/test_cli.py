import json

import pytest
import yaml

from sitdial.cli import build_parser, main, resolve
from sitdial.corpus import Corpus, Dialogue, Scene, Turn, save_corpus
from sitdial.experiments import ABLATIONS, RunSpec, run_ablation_suite, run_experiment_suite
from sitdial.featurize import FeaturizerConfig, dedup_by_description
from sitdial.neural import ModelConfig, TrainConfig
from sitdial.neural.checkpoint import load_checkpoint
from conftest import obj

TINY = ["--n-dialogues", "24", "--d-model", "8", "--n-heads", "2", "--language-layers", "1",
        "--relational-layers", "1", "--cross-layers", "1", "--epochs", "1", "--max-tokens", "40"]

TINY_SPEC = RunSpec(
    FeaturizerConfig(max_tokens=40),
    ModelConfig(d_model=8, n_heads=2, language_layers=1, relational_layers=1, cross_layers=1, max_tokens=40),
    TrainConfig(epochs=1, max_train_candidates=3),
)


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"featurizer": {"use_roi": False, "use_bbox": False}, "train": {"epochs": 3}, "seed": 4}))
    args = build_parser().parse_args(["train", "--config", str(cfg), "--use-roi", "--epochs", "2"])
    r = resolve(args)
    assert r["featurizer"]["use_roi"] is True and r["featurizer"]["use_bbox"] is False
    assert r["train"]["epochs"] == 2 and r["seed"] == 4 and r["model"]["seed"] == 4


def test_unknown_config_section_fails(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("wibble: {}\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "unknown sections" in capsys.readouterr().err


def test_gen_and_stats(tmp_path):
    assert main(["gen", "--n-dialogues", "12", "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "config.resolved.yaml").exists()
    assert list((tmp_path / "g" / "corpus").glob("*.json"))
    assert main(["stats", "--data", f"json:{tmp_path / 'g' / 'corpus'}", "--split", "train", "--out", str(tmp_path / "s")]) == 0
    stats = json.loads((tmp_path / "s" / "stats.json").read_text())
    assert "corpus" in stats and "roi_audit" in stats


def test_baseline_command(tmp_path):
    assert main(["baseline", "--kind", "previous_objects", "--n-dialogues", "20", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["baseline"] == "previous_objects" and len(rep["seeds"]) == 1
    assert main(["baseline", "--n-dialogues", "20", "--out", str(tmp_path / "x")]) == 1


def test_train_rerun_from_snapshot_is_identical(tmp_path):
    assert main(["train", *TINY, "--out", str(tmp_path / "a")]) == 0
    snap = tmp_path / "a" / "config.resolved.yaml"
    assert main(["train", "--config", str(snap), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert (tmp_path / "a" / "report.json").read_text() == (tmp_path / "b" / "report.json").read_text()
    assert main(["eval", *TINY, "--checkpoint", str(tmp_path / "a" / "model.ckpt"), "--out", str(tmp_path / "e")]) == 0


def test_empty_ablation_set_gives_full_row(small_synthetic):
    suite = run_ablation_suite(small_synthetic, TINY_SPEC, [])
    assert [r.name for r in suite.rows] == ["full"]
    assert "+0.00" in suite.markdown()


def test_language_only_row_config(small_synthetic, tmp_path):
    suite = run_ablation_suite(small_synthetic, TINY_SPEC, ["language_only"], out_dir=tmp_path)
    cfg = json.loads((tmp_path / "language_only" / "config.resolved.json").read_text())
    assert cfg["model"]["relational_layers"] == 0 and cfg["model"]["cross_layers"] == 0
    assert "vis.roi.W" not in load_checkpoint(tmp_path / "language_only" / "model.ckpt").params
    assert not suite.failed


def test_ablation_rows_cover_all_switches():
    assert len(ABLATIONS) == 13
    for v in ABLATIONS.values():
        FeaturizerConfig().with_(**v.featurizer)


def test_failed_row_sets_exit_status(tmp_path):
    code = main(["ablate", *TINY, "--rows", "not_a_row", "--out", str(tmp_path)])
    assert code == 1
    suite = json.loads((tmp_path / "suite.json").read_text())
    assert suite["failed"] == ["not_a_row"]


def test_experiment_suite_heuristic_and_global_rows(small_synthetic):
    suite = run_experiment_suite(small_synthetic, TINY_SPEC, ["baseline_random_below_5", "baseline_previous_objects", "global_tokens"])
    assert not suite.failed
    assert len(suite.row("baseline_random_below_5").config["seeds"]) == 10
    n_prefabs = len({o.prefab for s in small_synthetic.scenes.values() for o in s.objects})
    assert suite.row("global_tokens").extra["n_global_tokens"] == n_prefabs


def test_dedup_row_filters_duplicates():
    scene = Scene("s", (obj(1, "blue", "jacket hanging"), obj(2, "blue", "jacket hanging"), obj(3, "red", "shoes")))
    assert dedup_by_description(scene, FeaturizerConfig()) == [0, 2]
