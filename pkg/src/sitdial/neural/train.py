"""Training, inference and threshold selection for both tasks."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence, Union

import numpy as np

from ..corpus import TRAIN_OBJECT_CAP, Corpus
from ..errors import ConfigError, DivergenceDetected, EmptyValidation
from ..featurize import (
    ALL,
    CLS,
    EncodedExample,
    FeaturizerConfig,
    GlobalTokens,
    Vocabulary,
    assemble_sequence,
    build_vocabulary,
    flatten_dialogue,
    truncate_flat,
)
from ..metrics import EvalReport, accuracy, evaluate_coref, object_f1
from .model import (
    ModelConfig,
    coref_forward,
    coref_loss_and_grads,
    collate,
    collate_flat,
    disamb_forward,
    disamb_loss_and_grads,
    init_params,
)

log = logging.getLogger(__name__)

THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_object_cap: int = TRAIN_OBJECT_CAP
    disamb_history_turns: Union[int, str] = 2
    select_threshold: bool = True
    # Keep every positive plus at most this many sampled negatives per training
    # turn (None = all candidates). A speed knob for desk-scale runs.
    max_train_candidates: Optional[int] = None
    validate_each_epoch: bool = True
    # stop once the validation score reaches this value (None = run every epoch)
    stop_at_score: Optional[float] = None
    # arithmetic used while training; parameters are always returned as float64
    precision: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision must be 'float64' or 'float32'")
        if self.max_train_candidates is not None and self.max_train_candidates < 1:
            raise ConfigError("max_train_candidates must be >= 1 or None")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train options: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


class Adam:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            params[k] -= c.learning_rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)


class SGD:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg

    def step(self, params: dict, grads: dict) -> None:
        for k in sorted(params):
            params[k] -= self.cfg.learning_rate * grads[k]


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class Featurized:
    vocab: Vocabulary
    global_tokens: Optional[GlobalTokens]
    roi_dim: int


def prepare_features(corpus: Corpus, fcfg: FeaturizerConfig, train_split: str = "train") -> Featurized:
    """Vocabulary from the training split; global tokens over every scene so ids are stable across splits."""
    gt = GlobalTokens.from_corpus(corpus) if fcfg.use_global_tokens else None
    train = corpus.split(train_split)
    vocab = build_vocabulary(train if train.dialogues else corpus, gt)
    roi_dim = max((len(o.roi) for s in corpus.scenes.values() for o in s.objects), default=0)
    return Featurized(vocab, gt, max(roi_dim, 1))


def coref_examples(corpus: Corpus, fcfg: FeaturizerConfig, feats: Featurized, training: bool, cap: int = TRAIN_OBJECT_CAP) -> list[EncodedExample]:
    """One example per turn carrying targets; training drops scenes above ``cap`` objects."""
    out = []
    for d in corpus.dialogues:
        for t in d.turns:
            if t.targets is None:
                continue
            if training and len(corpus.scene_for(d, t.index).objects) > cap:
                continue
            out.append(assemble_sequence(d, t.index, corpus, fcfg, feats.vocab, feats.global_tokens))
    return out


def disamb_examples(corpus: Corpus, feats: Featurized, history: Union[int, str], max_tokens: int):
    seqs, labels, keys = [], [], []
    for d in corpus.dialogues:
        for t in d.turns:
            if t.disambiguate is None:
                continue
            toks = truncate_flat(flatten_dialogue(d, t.index, history), max_tokens)
            seqs.append(feats.vocab.encode_tokens(toks))
            labels.append(float(t.disambiguate))
            keys.append((d.dialogue_id, t.index))
    return seqs, np.array(labels), keys


def subsample_candidates(ex: EncodedExample, k: int, rng: np.random.Generator) -> EncodedExample:
    """Positives plus up to ``k`` random negatives, in original candidate order."""
    pos = np.flatnonzero(ex.labels > 0)
    neg = np.flatnonzero(ex.labels <= 0)
    if len(neg) <= k:
        return ex
    keep = np.sort(np.concatenate([pos, rng.choice(neg, size=k, replace=False)]))
    return EncodedExample(
        dialogue_id=ex.dialogue_id,
        turn_index=ex.turn_index,
        object_ids=[ex.object_ids[i] for i in keep],
        texts=[ex.texts[i] for i in keep],
        token_ids=[ex.token_ids[i] for i in keep],
        segment_ids=[ex.segment_ids[i] for i in keep],
        bbox=ex.bbox[keep],
        roi=ex.roi[keep],
        pos_ids=ex.pos_ids[keep],
        labels=ex.labels[keep],
        mask=ex.mask[keep],
        gold=ex.gold,
        meta=dict(ex.meta),
    )


def _batches(order: Sequence[int], sizes: Sequence[int], batch_size: int, rng: Optional[np.random.Generator]):
    """Group indices into batches of similar size; order of batches shuffled when rng is given."""
    order = list(order)
    chunk = batch_size * 16
    out = []
    for start in range(0, len(order), chunk):
        part = sorted(order[start : start + chunk], key=lambda i: sizes[i])
        out += [part[k : k + batch_size] for k in range(0, len(part), batch_size)]
    if rng is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


# ---------------------------------------------------------------------------
# inference


def coref_probabilities(params, mcfg: ModelConfig, examples: Sequence[EncodedExample], batch_size: int = 8) -> list[np.ndarray]:
    sizes = [ex.n_candidates * max(len(t) for t in ex.token_ids) if ex.n_candidates else 0 for ex in examples]
    out: list[Optional[np.ndarray]] = [None] * len(examples)
    for idx in _batches(range(len(examples)), sizes, batch_size, None):
        batch = collate([examples[i] for i in idx], mcfg)
        prob, _ = coref_forward(params, mcfg, batch)
        for row, i in enumerate(idx):
            out[i] = prob[row, : examples[i].n_candidates]
    return out


def predict(probs: np.ndarray, object_ids: Sequence[int], tau: float) -> list[int]:
    """Objects whose probability exceeds ``tau``; may be empty, never repeats an id."""
    if not 0.0 < tau < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    return [object_ids[k] for k, p in enumerate(probs) if p > tau]


def predictions_at(examples, probs, tau) -> dict:
    return {(ex.dialogue_id, ex.turn_index): predict(p, ex.object_ids, tau) for ex, p in zip(examples, probs)}


def select_threshold_from_probs(examples, probs, grid=THRESHOLD_GRID) -> float:
    """Grid value with the best object F1 over evaluated turns; ties go to the smaller value."""
    scored = [(ex, p) for ex, p in zip(examples, probs) if ex.gold is not None and not ex.meta.get("excluded", False)]
    if not scored:
        raise EmptyValidation("no validation turns to select a threshold on")
    golds = [ex.gold for ex, _ in scored]
    best_tau, best_f1 = None, -1.0
    for tau in grid:
        f1 = object_f1([predict(p, ex.object_ids, tau) for ex, p in scored], golds).f1
        if f1 > best_f1:
            best_tau, best_f1 = tau, f1
    return best_tau


def disamb_probabilities(params, mcfg: ModelConfig, seqs, cls_id: int, batch_size: int = 16) -> np.ndarray:
    out = np.zeros(len(seqs))
    sizes = [len(s) for s in seqs]
    for idx in _batches(range(len(seqs)), sizes, batch_size, None):
        tokens, mask = collate_flat([seqs[i] for i in idx], cls_id, mcfg.max_tokens)
        prob, _ = disamb_forward(params, mcfg, tokens, mask)
        out[idx] = prob
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    task: str
    params: dict
    model_config: ModelConfig
    featurizer_config: FeaturizerConfig
    train_config: TrainConfig
    vocab: Vocabulary
    global_tokens: Optional[GlobalTokens]
    threshold: float
    log: list = field(default_factory=list)

    @property
    def features(self) -> Featurized:
        return Featurized(self.vocab, self.global_tokens, self.model_config.roi_dim)


def _mark_excluded(examples, corpus: Corpus):
    excluded = {(d.dialogue_id, t.index) for d, t in corpus.iter_turns() if t.excluded}
    for ex in examples:
        ex.meta["excluded"] = (ex.dialogue_id, ex.turn_index) in excluded
    return examples


def train(
    corpus: Corpus,
    fcfg: FeaturizerConfig,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    train_split: str = "train",
    val_split: str = "dev",
) -> TrainResult:
    """Deterministic training for ``mcfg.task``; logs loss and validation score per epoch."""
    feats = prepare_features(corpus, fcfg, train_split)
    mcfg = mcfg.with_(vocab_size=len(feats.vocab), roi_dim=feats.roi_dim)
    train_c = corpus.split(train_split)
    val_c = corpus.split(val_split) if val_split else Corpus(corpus.scenes, ())
    if mcfg.task == "coref":
        return _train_coref(train_c, val_c, fcfg, mcfg, tcfg, feats)
    return _train_disamb(train_c, val_c, fcfg, mcfg, tcfg, feats)


def _cast_batch(batch, dtype):
    for name in ("tmask", "bbox", "roi", "cmask", "labels"):
        setattr(batch, name, getattr(batch, name).astype(dtype))
    return batch


def _working_params(mcfg, tcfg):
    params = init_params(mcfg)
    return {k: v.astype(tcfg.precision) for k, v in params.items()}


def _final_params(params):
    return {k: v.astype(np.float64) for k, v in params.items()}


def _optimizer(params, tcfg):
    return Adam(params, tcfg) if tcfg.optimizer == "adam" else SGD(params, tcfg)


def _check_finite(loss, epoch, step):
    if not math.isfinite(loss):
        raise DivergenceDetected(f"loss became {loss} at epoch {epoch}, step {step}")


def _reached(score, tcfg) -> bool:
    return tcfg.stop_at_score is not None and score is not None and score >= tcfg.stop_at_score


def _train_coref(train_c, val_c, fcfg, mcfg, tcfg, feats) -> TrainResult:
    train_ex = coref_examples(train_c, fcfg, feats, training=True, cap=tcfg.train_object_cap)
    if not train_ex:
        raise ConfigError("no training turns after filtering")
    val_ex = _mark_excluded(coref_examples(val_c, fcfg, feats, training=False), val_c)
    params = _working_params(mcfg, tcfg)
    opt = _optimizer(params, tcfg)
    dropout_rng = np.random.default_rng([tcfg.seed, 0xD0])
    sizes = [ex.n_candidates * max(len(t) for t in ex.token_ids) for ex in train_ex]
    if tcfg.max_train_candidates is not None:
        sizes = [min(ex.n_candidates, tcfg.max_train_candidates + 1) * max(len(t) for t in ex.token_ids) for ex in train_ex]
    history = []
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([tcfg.seed, epoch])
        sub_rng = np.random.default_rng([tcfg.seed, epoch, 0x5B])
        total = weight = 0.0
        for step, idx in enumerate(_batches(rng.permutation(len(train_ex)), sizes, tcfg.batch_size, rng)):
            chosen = [train_ex[i] for i in idx]
            if tcfg.max_train_candidates is not None:
                chosen = [subsample_candidates(ex, tcfg.max_train_candidates, sub_rng) for ex in chosen]
            batch = _cast_batch(collate(chosen, mcfg), tcfg.precision)
            loss, _, grads = coref_loss_and_grads(params, mcfg, batch, dropout_rng, training=True)
            _check_finite(loss, epoch, step)
            opt.step(params, grads)
            n = batch.cmask.sum()
            total += loss * n
            weight += n
        entry = {"epoch": epoch + 1, "loss": total / weight, "seconds": round(time.perf_counter() - t0, 3)}
        if val_ex and (tcfg.validate_each_epoch or epoch == tcfg.epochs - 1):
            probs = coref_probabilities(_final_params(params), mcfg, val_ex)
            report = evaluate_coref(predictions_at(val_ex, probs, mcfg.threshold), val_c, with_slices=False)
            entry["val_f1"] = report.f1
        history.append(entry)
        log.info("epoch %d loss %.5f val_f1 %s", epoch + 1, entry["loss"], entry.get("val_f1"))
        if _reached(entry.get("val_f1"), tcfg):
            break
    params = _final_params(params)
    tau = mcfg.threshold
    if tcfg.select_threshold and val_ex:
        tau = select_threshold_from_probs(val_ex, coref_probabilities(params, mcfg, val_ex))
    return TrainResult("coref", params, mcfg, fcfg, tcfg, feats.vocab, feats.global_tokens, tau, history)


def _train_disamb(train_c, val_c, fcfg, mcfg, tcfg, feats) -> TrainResult:
    cls_id = feats.vocab.id(CLS)
    seqs, labels, _ = disamb_examples(train_c, feats, tcfg.disamb_history_turns, mcfg.max_tokens)
    if not seqs:
        raise ConfigError("no labelled training turns")
    vseqs, vlabels, _ = disamb_examples(val_c, feats, tcfg.disamb_history_turns, mcfg.max_tokens)
    params = _working_params(mcfg, tcfg)
    opt = _optimizer(params, tcfg)
    dropout_rng = np.random.default_rng([tcfg.seed, 0xD0])
    sizes = [len(s) for s in seqs]
    history = []
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([tcfg.seed, epoch])
        total = 0.0
        for step, idx in enumerate(_batches(rng.permutation(len(seqs)), sizes, tcfg.batch_size, rng)):
            tokens, mask = collate_flat([seqs[i] for i in idx], cls_id, mcfg.max_tokens)
            mask = mask.astype(tcfg.precision)
            loss, _, grads = disamb_loss_and_grads(params, mcfg, tokens, mask, labels[idx].astype(tcfg.precision), dropout_rng, training=True)
            _check_finite(loss, epoch, step)
            opt.step(params, grads)
            total += loss * len(idx)
        entry = {"epoch": epoch + 1, "loss": total / len(seqs), "seconds": round(time.perf_counter() - t0, 3)}
        if vseqs and (tcfg.validate_each_epoch or epoch == tcfg.epochs - 1):
            vp = disamb_probabilities(_final_params(params), mcfg, vseqs, cls_id)
            entry["val_accuracy"] = accuracy(list(vp > 0.5), list(vlabels > 0.5))
        history.append(entry)
        log.info("epoch %d loss %.5f val_acc %s", epoch + 1, entry["loss"], entry.get("val_accuracy"))
        if _reached(entry.get("val_accuracy"), tcfg):
            break
    return TrainResult("disamb", _final_params(params), mcfg, fcfg, tcfg, feats.vocab, feats.global_tokens, 0.5, history)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(result: TrainResult, corpus: Corpus, split: Optional[str] = "devtest", tau: Optional[float] = None) -> tuple[EvalReport, dict]:
    """Score a trained model on ``split`` (whole corpus when None); returns the report and raw predictions."""
    part = corpus.split(split) if split else corpus
    if result.task == "coref":
        examples = coref_examples(part, result.featurizer_config, result.features, training=False)
        probs = coref_probabilities(result.params, result.model_config, examples)
        preds = predictions_at(examples, probs, result.threshold if tau is None else tau)
        return evaluate_coref(preds, part), preds
    cls_id = result.vocab.id(CLS)
    seqs, labels, keys = disamb_examples(part, result.features, result.train_config.disamb_history_turns, result.model_config.max_tokens)
    if not seqs:
        raise EmptyValidation(f"no labelled turns in split {split!r}")
    probs = disamb_probabilities(result.params, result.model_config, seqs, cls_id)
    preds = {k: bool(p > 0.5) for k, p in zip(keys, probs)}
    return EvalReport(n=len(seqs), accuracy=accuracy(list(probs > 0.5), list(labels > 0.5))), preds


def classify_disambiguation(params, mcfg: ModelConfig, token_ids: Sequence[int], cls_id: int) -> float:
    tokens, mask = collate_flat([token_ids], cls_id, mcfg.max_tokens)
    return float(disamb_forward(params, mcfg, tokens, mask)[0][0])
