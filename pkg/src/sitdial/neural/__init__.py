"""Numpy dual-stream encoder, training loop and checkpoints.

The per-item helpers below mirror the batched internals for callers that
work with one turn or one object at a time.
"""
from __future__ import annotations

import numpy as np

from ..featurize import EncodedExample
from .model import (
    CorefBatch,
    ModelConfig,
    _Rng,
    coref_forward,
    coref_loss,
    collate,
    encode_fwd,
    fuse_visual_fwd,
    head_fwd,
    init_params,
)
from .train import (
    THRESHOLD_GRID,
    TrainConfig,
    TrainResult,
    classify_disambiguation,
    evaluate,
    predict,
    select_threshold_from_probs,
    train,
)

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "TrainResult",
    "THRESHOLD_GRID",
    "init_params",
    "fuse_visual",
    "encode",
    "score_candidates",
    "coref_loss",
    "predict",
    "select_threshold",
    "classify_disambiguation",
    "train",
    "evaluate",
]


def fuse_visual(bbox, roi, pos_id, params, cfg: ModelConfig, rng=None, training=False) -> np.ndarray:
    """Fused visual vector for one object."""
    v, _ = fuse_visual_fwd(
        params, cfg, np.asarray(bbox, dtype=np.float64)[None, None], np.asarray(roi, dtype=np.float64)[None, None],
        np.array([[pos_id]]), _Rng(cfg, rng, training),
    )
    return v[0, 0]


def encode(example: EncodedExample, params, cfg: ModelConfig):
    """(h^l per candidate (N, L, D), h^v per candidate (N, D) or None) in eval mode."""
    batch = collate([example], cfg)
    hl, hv, _ = encode_fwd(params, cfg, batch, _Rng(cfg, None, False))
    n = example.n_candidates
    return hl[0, :n], (hv[0, :n] if hv is not None else None), batch


def score_candidates(hl, hv, params, cfg: ModelConfig, token_mask, candidate_mask) -> np.ndarray:
    """Probabilities from encoder outputs; accepts (N, L, D) / (N, D) or batched arrays."""
    batched = np.ndim(hl) == 4
    if not batched:
        hl = hl[None]
        hv = hv[None] if hv is not None else None
        token_mask = np.asarray(token_mask)[None]
        candidate_mask = np.asarray(candidate_mask)[None]
    prob, _ = head_fwd(params, cfg, hl, hv, token_mask, candidate_mask)
    return prob if batched else prob[0]


def select_threshold(result: TrainResult, validation, split: str = "dev") -> float:
    """Best grid threshold on the validation split of ``validation``."""
    from .train import _mark_excluded, coref_examples, coref_probabilities

    part = validation.split(split) if split else validation
    examples = _mark_excluded(coref_examples(part, result.featurizer_config, result.features, training=False), part)
    probs = coref_probabilities(result.params, result.model_config, examples)
    return select_threshold_from_probs(examples, probs)
