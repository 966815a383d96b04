"""Central-difference gradient checking shared by the neural and acceptance tests."""
from __future__ import annotations

import numpy as np

from sitdial.neural.model import CorefBatch, ModelConfig, coref_loss_and_grads, disamb_loss_and_grads, init_params

SMALL = ModelConfig(
    vocab_size=20, d_model=8, n_heads=2, language_layers=1, relational_layers=1, cross_layers=1,
    max_tokens=8, max_positional_id=5, roi_dim=6, dropout=0.0,
)


def toy_batch(cfg: ModelConfig, B=2, N=3, L=5, seed=0) -> CorefBatch:
    r = np.random.default_rng(seed)
    tmask = np.ones((B, N, L))
    tmask[0, 1, 3:] = 0
    tmask[1, 2, :] = 0
    cmask = np.ones((B, N))
    cmask[1, 2] = 0
    tokens = r.integers(1, cfg.vocab_size, (B, N, L)) * tmask.astype(int)
    return CorefBatch(
        tokens, r.integers(0, 2, (B, N, L)), tmask, r.random((B, N, 4)),
        r.standard_normal((B, N, cfg.roi_dim)), r.integers(1, 4, (B, N)), cmask,
        (r.random((B, N)) < 0.4) * cmask,
    )


def toy_flat(cfg: ModelConfig, seed=3):
    r = np.random.default_rng(seed)
    tokens = r.integers(1, cfg.vocab_size, (3, 6))
    tokens[:, 0] = 1
    mask = np.ones((3, 6))
    mask[1, 4:] = 0
    return tokens, mask, np.array([1.0, 0.0, 1.0])


def worst_relative_errors(cfg: ModelConfig, loss_fn, per_tensor=6, seed=1, h=1e-5, floor=1e-6) -> dict[str, float]:
    """Largest relative error per parameter tensor over random and nonzero-gradient entries.

    Parameters are perturbed away from initialisation so no gradient is
    trivially zero by symmetry.
    """
    params = init_params(cfg)
    r = np.random.default_rng(seed)
    for k in params:
        params[k] = params[k] + 0.3 * r.standard_normal(params[k].shape)
    _, _, grads = loss_fn(params)
    out = {}
    for name in sorted(params):
        a = params[name]
        idx = [tuple(int(r.integers(0, s)) for s in a.shape) for _ in range(per_tensor)]
        nz = np.argwhere(np.abs(grads[name]) > 1e-8)
        if len(nz):
            idx += [tuple(int(v) for v in nz[i]) for i in r.integers(0, len(nz), per_tensor)]
        worst = 0.0
        for ix in idx:
            old = a[ix]
            a[ix] = old + h
            up = loss_fn(params)[0]
            a[ix] = old - h
            down = loss_fn(params)[0]
            a[ix] = old
            num = (up - down) / (2 * h)
            an = grads[name][ix]
            worst = max(worst, abs(num - an) / max(abs(num) + abs(an), floor))
        out[name] = worst
    return out


def coref_check(cfg: ModelConfig = SMALL) -> dict[str, float]:
    batch = toy_batch(cfg)
    return worst_relative_errors(cfg, lambda p: coref_loss_and_grads(p, cfg, batch))


def disamb_check(cfg: ModelConfig = SMALL.with_(task="disamb")) -> dict[str, float]:
    tokens, mask, labels = toy_flat(cfg)
    return worst_relative_errors(cfg, lambda p: disamb_loss_and_grads(p, cfg, tokens, mask, labels))
