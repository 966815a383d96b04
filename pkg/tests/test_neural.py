import math

import numpy as np
import pytest

from gradcheck import SMALL, coref_check, disamb_check, toy_batch, toy_flat
from oracles import bce_ref, micro_f1_bruteforce, gelu_ref, layernorm_ref
from sitdial.errors import AllMasked, EmptyValidation, MissingCLS, ShapeMismatch
from sitdial.featurize import EncodedExample, FeaturizerConfig
from sitdial.neural import (
    THRESHOLD_GRID,
    ModelConfig,
    TrainConfig,
    classify_disambiguation,
    coref_loss,
    encode,
    evaluate,
    fuse_visual,
    init_params,
    predict,
    score_candidates,
    train,
)
from sitdial.neural import layers as Lr
from sitdial.neural.checkpoint import load_checkpoint, read_log, save_checkpoint, write_log
from sitdial.neural.model import check_params, collate, coref_forward
from sitdial.neural.train import select_threshold_from_probs


# --- gradients -----------------------------------------------------------------


def test_gradients_full_model():
    errs = coref_check()
    assert set(errs) == set(init_params(SMALL))
    assert max(errs.values()) < 1e-4, max(errs.items(), key=lambda kv: kv[1])


def test_gradients_language_only():
    errs = coref_check(SMALL.with_(relational_layers=0, cross_layers=0))
    assert "head.fc.W" in errs and "vis.roi.W" not in errs
    assert max(errs.values()) < 1e-4


def test_gradients_disambiguation_head():
    errs = disamb_check()
    assert max(errs.values()) < 1e-4


# --- building blocks ----------------------------------------------------------


def test_layernorm_and_gelu_match_references():
    x = np.random.default_rng(0).standard_normal((3, 7)) * 4
    y, _ = Lr.layernorm_fwd(x, np.ones(7), np.zeros(7), 1e-5)
    np.testing.assert_allclose(y, layernorm_ref(x), atol=1e-12)
    np.testing.assert_allclose(Lr.gelu_fwd(x)[0], gelu_ref(x), atol=1e-12)


def test_masked_keys_get_zero_weight():
    p = init_params(SMALL)
    x = np.random.default_rng(0).standard_normal((1, 4, 8))
    mask = np.array([[1.0, 1.0, 0.0, 0.0]])
    _, cache = Lr.mha_fwd(p, "lang.0.self.attn", x, x, mask, 2)
    w = cache[7]
    assert (w[..., 2:] == 0).all()
    np.testing.assert_allclose(w.sum(-1), 1.0)


def test_fuse_visual_deterministic_and_shaped():
    cfg = SMALL
    p = init_params(cfg)
    roi = np.arange(6.0)
    a = fuse_visual([0.1, 0.2, 0.3, 0.4], roi, 2, p, cfg)
    b = fuse_visual([0.1, 0.2, 0.3, 0.4], roi, 2, p, cfg)
    assert a.shape == (8,) and (a == b).all()
    with pytest.raises(ShapeMismatch):
        fuse_visual([0.1, 0.2, 0.3, 0.4], np.zeros(5), 2, p, cfg)


def test_roi_projection_is_scale_invariant_after_norm():
    p = init_params(SMALL)
    roi = np.random.default_rng(1).standard_normal((5, 6))
    f1, _ = Lr.ln(p, "vis.roi_ln", Lr.lin(p, "vis.roi", roi)[0], 1e-12)
    f2, _ = Lr.ln(p, "vis.roi_ln", Lr.lin(p, "vis.roi", 7.5 * roi)[0], 1e-12)
    np.testing.assert_allclose(f1, f2, atol=1e-9)


# --- encoder invariants -------------------------------------------------------


def _example(n=3, L=5, seed=0, cfg=SMALL):
    r = np.random.default_rng(seed)
    toks = [np.concatenate([[1], r.integers(2, cfg.vocab_size, L - 1)]) for _ in range(n)]
    return EncodedExample(
        dialogue_id="d", turn_index=0, object_ids=list(range(10, 10 + n)), texts=[""] * n,
        token_ids=toks, segment_ids=[np.array([0] * (L - 2) + [1, 1]) for _ in range(n)],
        bbox=r.random((n, 4)), roi=r.standard_normal((n, cfg.roi_dim)), pos_ids=r.integers(1, 4, n),
        labels=(r.random(n) < 0.5).astype(float), mask=np.ones(n), gold=(),
    )


@pytest.fixture
def perturbed():
    p = init_params(SMALL)
    r = np.random.default_rng(5)
    return {k: v + 0.3 * r.standard_normal(v.shape) for k, v in p.items()}


@pytest.mark.parametrize("cfg", [SMALL, SMALL.with_(relational_layers=0, cross_layers=0)])
def test_padding_invariance(cfg, perturbed):
    params = {k: v for k, v in perturbed.items() if k in init_params(cfg)}
    params.update({k: v for k, v in init_params(cfg).items() if k not in params})
    ex = _example()
    plain, _ = coref_forward(params, cfg, collate([ex], cfg))
    padded, _ = coref_forward(params, cfg, collate([ex], cfg, pad_candidates=6, pad_tokens=8))
    np.testing.assert_allclose(padded[0, :3], plain[0], atol=1e-12)
    assert (padded[0, 3:] == 0).all()


def test_batch_mates_do_not_interact(perturbed):
    a, b = _example(seed=1), _example(n=5, L=4, seed=2)
    alone, _ = coref_forward(perturbed, SMALL, collate([a], SMALL))
    both, _ = coref_forward(perturbed, SMALL, collate([a, b], SMALL))
    np.testing.assert_allclose(both[0, :3], alone[0], atol=1e-12)


def test_candidate_permutation_equivariance(perturbed):
    ex = _example(n=4)
    perm = [2, 0, 3, 1]
    moved = EncodedExample(
        dialogue_id="d", turn_index=0, object_ids=[ex.object_ids[i] for i in perm], texts=[""] * 4,
        token_ids=[ex.token_ids[i] for i in perm], segment_ids=[ex.segment_ids[i] for i in perm],
        bbox=ex.bbox[perm], roi=ex.roi[perm], pos_ids=ex.pos_ids[perm], labels=ex.labels[perm], mask=ex.mask[perm],
    )
    p1, _ = coref_forward(perturbed, SMALL, collate([ex], SMALL))
    p2, _ = coref_forward(perturbed, SMALL, collate([moved], SMALL))
    np.testing.assert_allclose(p2[0], p1[0][perm], atol=1e-12)


def test_encode_and_score_agree_with_batched_path(perturbed):
    ex = _example()
    hl, hv, batch = encode(ex, perturbed, SMALL)
    prob = score_candidates(hl, hv, perturbed, SMALL, batch.tmask[0], batch.cmask[0])
    ref, _ = coref_forward(perturbed, SMALL, batch)
    np.testing.assert_allclose(prob, ref[0], atol=1e-12)


def test_zero_features_give_sigmoid_of_bias():
    p = init_params(SMALL)
    p["head.out.b"] = np.array([0.7])
    hl = np.zeros((3, 5, 8))
    hv = np.zeros((3, 8))
    prob = score_candidates(hl, hv, p, SMALL, np.ones((3, 5)), np.array([1.0, 1.0, 0.0]))
    np.testing.assert_allclose(prob[:2], 1 / (1 + math.exp(-0.7)))
    assert prob[2] == 0.0


def test_check_params_rejects_wrong_shapes():
    p = init_params(SMALL)
    p["head.out.W"] = np.zeros((3, 1))
    with pytest.raises(ShapeMismatch):
        check_params(p, SMALL)


# --- loss and decisions -------------------------------------------------------


def test_loss_examples():
    y = np.array([1.0, 0.0, 1.0])
    m = np.ones(3)
    assert coref_loss(y, y, m) <= 1e-6
    assert coref_loss(np.full(3, 0.5), y, m) == pytest.approx(math.log(2))
    p = np.array([0.3, 0.8, 0.6])
    assert coref_loss(p, y, m) == pytest.approx(bce_ref(p, y, m))
    m2 = np.array([1.0, 0.0, 1.0])
    assert coref_loss(p, y, m2) == coref_loss(np.array([0.3, 0.01, 0.6]), y, m2)
    with pytest.raises(AllMasked):
        coref_loss(p, y, np.zeros(3))


def test_predict_examples():
    assert predict(np.array([0.9, 0.2]), [60, 56], 0.35) == [60]
    assert predict(np.array([0.1, 0.2]), [60, 56], 0.35) == []
    probs = np.random.default_rng(0).random(30)
    sizes = [len(predict(probs, list(range(30)), t)) for t in THRESHOLD_GRID]
    assert sizes == sorted(sizes, reverse=True)


def _scored(probs, labels):
    ids = list(range(len(probs)))
    gold = tuple(i for i, y in zip(ids, labels) if y)
    ex = EncodedExample("d", 0, ids, [], [], [], np.zeros((len(ids), 4)), np.zeros((len(ids), 1)),
                        np.zeros(len(ids), int), np.array(labels, float), np.ones(len(ids)), gold)
    return ex, np.array(probs, float)


def test_threshold_on_separable_probabilities():
    ex, p = _scored([0.9, 0.1, 0.1, 0.9], [1, 0, 0, 1])
    # strict ">" already separates at 0.10, the smallest grid value that does
    assert select_threshold_from_probs([ex], [p]) == 0.1
    ex, p = _scored([0.9, 0.12, 0.12, 0.9], [1, 0, 0, 1])
    assert select_threshold_from_probs([ex], [p]) == 0.15


@pytest.mark.parametrize("labels", [[1, 1, 0], [1, 0, 0], [0, 0, 0]])
def test_threshold_on_identical_probabilities(labels):
    ex, p = _scored([0.5, 0.5, 0.5], labels)
    tau = select_threshold_from_probs([ex], [p])
    # brute force over the grid with the independent counter; first best wins
    scores = [micro_f1_bruteforce([predict(p, ex.object_ids, t)], [ex.gold])[3] for t in THRESHOLD_GRID]
    assert tau == THRESHOLD_GRID[scores.index(max(scores))]
    # under F1 a single positive already makes "predict everything" win
    assert (tau < 0.5) == any(labels)


def test_threshold_needs_validation_turns():
    with pytest.raises(EmptyValidation):
        select_threshold_from_probs([], [])


def test_disambiguation_head_zero_weights():
    cfg = SMALL.with_(task="disamb")
    p = init_params(cfg)
    p["dhead.out.W"][:] = 0.0
    assert classify_disambiguation(p, cfg, [1, 5, 6, 7], cls_id=1) == 0.5
    with pytest.raises(MissingCLS):
        classify_disambiguation(p, cfg, [5, 6], cls_id=1)


# --- training -----------------------------------------------------------------

FAST_MODEL = ModelConfig(d_model=16, n_heads=2, language_layers=1, relational_layers=1, cross_layers=1, max_tokens=48, dropout=0.1)
FAST_FEAT = FeaturizerConfig(max_tokens=48)


def test_training_is_deterministic(small_synthetic):
    tcfg = TrainConfig(epochs=1, max_train_candidates=4, validate_each_epoch=False)
    a = train(small_synthetic, FAST_FEAT, FAST_MODEL, tcfg)
    b = train(small_synthetic, FAST_FEAT, FAST_MODEL, tcfg)
    assert all((a.params[k] == b.params[k]).all() for k in a.params)
    assert a.threshold == b.threshold


def test_stop_at_score_ends_training_early(small_synthetic):
    tcfg = TrainConfig(epochs=5, max_train_candidates=4, stop_at_score=0.0)
    r = train(small_synthetic, FAST_FEAT, FAST_MODEL, tcfg)
    assert len(r.log) == 1


def test_loss_decreases_over_first_epochs(default_synthetic):
    tcfg = TrainConfig(epochs=3, learning_rate=3e-3, max_train_candidates=7, precision="float32", validate_each_epoch=False, select_threshold=False)
    r = train(default_synthetic, FAST_FEAT, FAST_MODEL.with_(dropout=0.0), tcfg)
    losses = [e["loss"] for e in r.log]
    assert losses[0] > losses[1] > losses[2]


def test_disambiguation_training_runs(small_synthetic):
    r = train(small_synthetic, FAST_FEAT, FAST_MODEL.with_(task="disamb"), TrainConfig(epochs=1))
    rep, preds = evaluate(r, small_synthetic, "devtest")
    assert 0.0 <= rep.accuracy <= 1.0 and len(preds) == rep.n
    assert "val_accuracy" in r.log[0]


def test_checkpoint_round_trip(tmp_path, small_synthetic):
    r = train(small_synthetic, FAST_FEAT, FAST_MODEL, TrainConfig(epochs=1, max_train_candidates=3))
    path = save_checkpoint(r, tmp_path / "model.ckpt")
    back = load_checkpoint(path)
    assert back.threshold == r.threshold and back.model_config == r.model_config
    assert back.featurizer_config == r.featurizer_config and back.vocab.tokens == r.vocab.tokens
    assert all((back.params[k] == r.params[k]).all() for k in r.params)
    rep1, _ = evaluate(r, small_synthetic)
    rep2, _ = evaluate(back, small_synthetic)
    assert rep1 == rep2
    write_log(r.log, tmp_path / "log.jsonl")
    assert read_log(tmp_path / "log.jsonl") == r.log
    (tmp_path / "bad.ckpt").write_bytes(b"nonsense")
    with pytest.raises(ShapeMismatch):
        load_checkpoint(tmp_path / "bad.ckpt")
