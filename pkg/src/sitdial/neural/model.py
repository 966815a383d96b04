"""Dual-stream encoder for candidate scoring and a [CLS] classifier for
clarification detection, with hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from ..errors import AllMasked, ConfigError, MissingCLS, ShapeMismatch
from ..featurize import EncodedExample
from . import layers as Lr

BCE_EPS = 1e-7
POOLINGS = ("mean", "first")
TASKS = ("coref", "disamb")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_heads: int = 4
    language_layers: int = 5
    relational_layers: int = 3
    cross_layers: int = 3
    ffn_mult: int = 4
    dropout: float = 0.1
    max_tokens: int = 128
    max_candidates: int = 160
    max_positional_id: int = 160
    roi_dim: int = 64
    threshold: float = 0.35
    ln_eps: float = 1e-5
    pooling: str = "mean"
    task: str = "coref"
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if min(self.language_layers, self.relational_layers, self.cross_layers) < 0:
            raise ConfigError("layer counts must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def language_only(self) -> bool:
        return self.relational_layers == 0 and self.cross_layers == 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model options: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng, shape, sd=0.02):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * sd


def _shapes(cfg: ModelConfig) -> dict[str, tuple]:
    D, F = cfg.d_model, cfg.roi_dim
    H = cfg.ffn_mult * D
    shapes: dict[str, tuple] = {}

    def linear(name, i, o):
        shapes[name + ".W"] = (i, o)
        shapes[name + ".b"] = (o,)

    def norm(name):
        shapes[name + ".g"] = (D,)
        shapes[name + ".b"] = (D,)

    def attn_block(name):
        for part in "qkvo":
            linear(f"{name}.attn.{part}", D, D)
        norm(name + ".ln")

    def ffn_block(name):
        linear(name + ".fc1", D, H)
        linear(name + ".fc2", H, D)
        norm(name + ".ln")

    shapes["emb.tok"] = (cfg.vocab_size, D)
    shapes["emb.seg"] = (2, D)
    shapes["emb.pos"] = (cfg.max_tokens, D)
    norm("emb.ln")
    for i in range(cfg.language_layers):
        attn_block(f"lang.{i}.self")
        ffn_block(f"lang.{i}.ffn")
    if cfg.task == "disamb":
        linear("dhead.out", D, 1)
        return shapes
    if not cfg.language_only:
        linear("vis.bbox", 4, D)
        norm("vis.bbox_ln")
        linear("vis.roi", F, D)
        norm("vis.roi_ln")
        shapes["vis.posemb"] = (cfg.max_positional_id + 1, D)
        linear("vis.e", D, D)
        norm("vis.ln")
        for i in range(cfg.relational_layers):
            attn_block(f"rel.{i}.self")
            ffn_block(f"rel.{i}.ffn")
        for i in range(cfg.cross_layers):
            for block in ("l2v", "v2l", "lself", "vself"):
                attn_block(f"cross.{i}.{block}")
            ffn_block(f"cross.{i}.lffn")
            ffn_block(f"cross.{i}.vffn")
    else:
        linear("head.fc", D, D)
    norm("head.ln")
    linear("head.out", D, 1)
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Truncated-normal (SD 0.02) weights and tables, zero biases, unit norm gains."""
    rng = np.random.default_rng([cfg.seed, 0xA11])
    params = {}
    for name, shape in _shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = _trunc_normal(rng, shape)
    return params


def check_params(params: dict, cfg: ModelConfig) -> None:
    expected = _shapes(cfg)
    if set(expected) != set(params):
        raise ShapeMismatch(f"parameter names differ: missing {sorted(set(expected) - set(params))[:5]}, extra {sorted(set(params) - set(expected))[:5]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")


# ---------------------------------------------------------------------------
# batching


@dataclass
class CorefBatch:
    tokens: np.ndarray     # (B, N, L) int
    segments: np.ndarray   # (B, N, L) int
    tmask: np.ndarray      # (B, N, L) float
    bbox: np.ndarray       # (B, N, 4)
    roi: np.ndarray        # (B, N, F)
    pos: np.ndarray        # (B, N) int
    cmask: np.ndarray      # (B, N) float
    labels: np.ndarray     # (B, N)

    @property
    def shape(self):
        return self.tokens.shape


def collate(examples: Sequence[EncodedExample], cfg: ModelConfig, pad_candidates: int = 0, pad_tokens: int = 0) -> CorefBatch:
    """Pad a list of examples to a common candidate count and sequence length."""
    B = len(examples)
    N = max([ex.n_candidates for ex in examples] + [pad_candidates, 1])
    L = max([len(t) for ex in examples for t in ex.token_ids] + [pad_tokens, 1])
    if L > cfg.max_tokens:
        raise ShapeMismatch(f"sequence length {L} exceeds max_tokens {cfg.max_tokens}")
    tokens = np.zeros((B, N, L), dtype=np.int64)
    segments = np.zeros((B, N, L), dtype=np.int64)
    tmask = np.zeros((B, N, L))
    bbox = np.zeros((B, N, 4))
    roi = np.zeros((B, N, cfg.roi_dim))
    pos = np.zeros((B, N), dtype=np.int64)
    cmask = np.zeros((B, N))
    labels = np.zeros((B, N))
    for b, ex in enumerate(examples):
        n = ex.n_candidates
        for k in range(n):
            ids = ex.token_ids[k]
            tokens[b, k, : len(ids)] = ids
            segments[b, k, : len(ids)] = ex.segment_ids[k]
            tmask[b, k, : len(ids)] = 1.0
        if n:
            bbox[b, :n] = ex.bbox
            width = min(ex.roi.shape[1], cfg.roi_dim)
            roi[b, :n, :width] = ex.roi[:, :width]
            pos[b, :n] = np.minimum(ex.pos_ids, cfg.max_positional_id)
            cmask[b, :n] = ex.mask
            labels[b, :n] = ex.labels * ex.mask
    return CorefBatch(tokens, segments, tmask, bbox, roi, pos, cmask, labels)


def collate_flat(sequences: Sequence[Sequence[int]], cls_id: int, max_tokens: int):
    """Pad flattened dialogue token ids; every sequence must open with [CLS]."""
    for s in sequences:
        if len(s) == 0 or s[0] != cls_id:
            raise MissingCLS("flattened sequence must start with [CLS]")
    L = max(len(s) for s in sequences)
    if L > max_tokens:
        raise ShapeMismatch(f"sequence length {L} exceeds max_tokens {max_tokens}")
    tokens = np.zeros((len(sequences), L), dtype=np.int64)
    mask = np.zeros((len(sequences), L))
    for i, s in enumerate(sequences):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return tokens, mask


# ---------------------------------------------------------------------------
# forward / backward


class _Rng:
    """Dropout randomness; ``None`` generator means no dropout."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator], training: bool):
        self.training = training and rng is not None and cfg.dropout > 0
        self.rate = cfg.dropout if self.training else 0.0
        self.rng = rng


def embed_fwd(params, cfg, tokens, segments, rr: _Rng):
    L = tokens.shape[-1]
    if L > cfg.max_tokens:
        raise ShapeMismatch(f"sequence length {L} exceeds max_tokens {cfg.max_tokens}")
    x = params["emb.tok"][tokens] + params["emb.seg"][segments] + params["emb.pos"][:L]
    y, cl = Lr.ln(params, "emb.ln", x, cfg.ln_eps)
    y, cd = Lr.dropout_fwd(y, rr.rate, rr.rng, rr.training)
    return y, (tokens, segments, cl, cd)


def embed_bwd(dy, cache, params, grads):
    tokens, segments, cl, cd = cache
    D = dy.shape[-1]
    L = tokens.shape[-1]
    dx = Lr.layernorm_bwd(Lr.dropout_bwd(dy, cd), cl, grads, "emb.ln")
    g_tok = np.zeros_like(params["emb.tok"])
    np.add.at(g_tok, tokens.reshape(-1), dx.reshape(-1, D))
    g_seg = np.zeros_like(params["emb.seg"])
    np.add.at(g_seg, segments.reshape(-1), dx.reshape(-1, D))
    g_pos = np.zeros_like(params["emb.pos"])
    g_pos[:L] = dx.reshape(-1, L, D).sum(axis=0)
    Lr._acc(grads, "emb.tok", g_tok)
    Lr._acc(grads, "emb.seg", g_seg)
    Lr._acc(grads, "emb.pos", g_pos)


def fuse_visual_fwd(params, cfg, bbox, roi, pos, rr: _Rng):
    """v = Dropout(LN(LN(W_p bbox + b_p) + LN(W_f roi + b_f) + (W_e PosEmb[pos] + b_e)))."""
    if bbox.shape[-1] != 4 or roi.shape[-1] != cfg.roi_dim:
        raise ShapeMismatch(f"bbox/roi widths {bbox.shape[-1]}/{roi.shape[-1]} do not match 4/{cfg.roi_dim}")
    eps = cfg.ln_eps
    p_lin, c_p = Lr.lin(params, "vis.bbox", bbox)
    p, c_pln = Lr.ln(params, "vis.bbox_ln", p_lin, eps)
    f_lin, c_f = Lr.lin(params, "vis.roi", roi)
    f, c_fln = Lr.ln(params, "vis.roi_ln", f_lin, eps)
    e_in = params["vis.posemb"][pos]
    e, c_e = Lr.lin(params, "vis.e", e_in)
    v, c_v = Lr.ln(params, "vis.ln", p + f + e, eps)
    v, c_d = Lr.dropout_fwd(v, rr.rate, rr.rng, rr.training)
    return v, (c_p, c_pln, c_f, c_fln, pos, c_e, c_v, c_d)


def fuse_visual_bwd(dv, cache, params, grads):
    c_p, c_pln, c_f, c_fln, pos, c_e, c_v, c_d = cache
    ds = Lr.layernorm_bwd(Lr.dropout_bwd(dv, c_d), c_v, grads, "vis.ln")
    de_in = Lr.linear_bwd(ds, c_e, params["vis.e.W"], grads, "vis.e")
    g_pe = np.zeros_like(params["vis.posemb"])
    np.add.at(g_pe, pos.reshape(-1), de_in.reshape(-1, de_in.shape[-1]))
    Lr._acc(grads, "vis.posemb", g_pe)
    Lr.linear_bwd(Lr.layernorm_bwd(ds, c_fln, grads, "vis.roi_ln"), c_f, params["vis.roi.W"], grads, "vis.roi")
    Lr.linear_bwd(Lr.layernorm_bwd(ds, c_pln, grads, "vis.bbox_ln"), c_p, params["vis.bbox.W"], grads, "vis.bbox")


def encode_fwd(params, cfg: ModelConfig, batch: CorefBatch, rr: _Rng):
    """Returns (h_lang (B,N,L,D), h_vis (B,N,D) or None, cache)."""
    B, N, L = batch.tokens.shape
    D = cfg.d_model
    H = cfg.n_heads
    eps, rate, rng, tr = cfg.ln_eps, rr.rate, rr.rng, rr.training
    tm = batch.tmask.reshape(B * N, L)
    x, c_emb = embed_fwd(params, cfg, batch.tokens, batch.segments, rr)
    x = x.reshape(B * N, L, D)
    c_lang = []
    for i in range(cfg.language_layers):
        x, c = Lr.self_layer_fwd(params, f"lang.{i}", x, tm, H, eps, rate, rng, tr)
        c_lang.append(c)
    if cfg.language_only:
        return x.reshape(B, N, L, D), None, (c_emb, c_lang, None, [], [])

    v, c_vis = fuse_visual_fwd(params, cfg, batch.bbox, batch.roi, batch.pos, rr)
    c_rel = []
    for i in range(cfg.relational_layers):
        v, c = Lr.self_layer_fwd(params, f"rel.{i}", v, batch.cmask, H, eps, rate, rng, tr)
        c_rel.append(c)

    c_cross = []
    for i in range(cfg.cross_layers):
        p = f"cross.{i}"
        # language tokens of every candidate attend to all visual candidates of the turn
        l1, c_l2v = Lr.attn_block_fwd(params, p + ".l2v", x.reshape(B, N * L, D), v, batch.cmask, H, eps, rate, rng, tr)
        # each visual candidate attends to the tokens of its own sequence
        v1, c_v2l = Lr.attn_block_fwd(params, p + ".v2l", v.reshape(B * N, 1, D), x, tm, H, eps, rate, rng, tr)
        l2, c_ls = Lr.attn_block_fwd(params, p + ".lself", l1.reshape(B * N, L, D), l1.reshape(B * N, L, D), tm, H, eps, rate, rng, tr)
        v2, c_vs = Lr.attn_block_fwd(params, p + ".vself", v1.reshape(B, N, D), v1.reshape(B, N, D), batch.cmask, H, eps, rate, rng, tr)
        x, c_lf = Lr.ffn_block_fwd(params, p + ".lffn", l2, eps, rate, rng, tr)
        v, c_vf = Lr.ffn_block_fwd(params, p + ".vffn", v2, eps, rate, rng, tr)
        c_cross.append((c_l2v, c_v2l, c_ls, c_vs, c_lf, c_vf))
    return x.reshape(B, N, L, D), v, (c_emb, c_lang, c_vis, c_rel, c_cross)


def encode_bwd(dhl, dhv, cache, params, cfg: ModelConfig, grads, shape):
    B, N, L = shape
    D = cfg.d_model
    c_emb, c_lang, c_vis, c_rel, c_cross = cache
    dx = dhl.reshape(B * N, L, D)
    if not cfg.language_only:
        dv = dhv
        for i in reversed(range(cfg.cross_layers)):
            p = f"cross.{i}"
            c_l2v, c_v2l, c_ls, c_vs, c_lf, c_vf = c_cross[i]
            dl2 = Lr.ffn_block_bwd(dx, c_lf, params, grads, p + ".lffn")
            dv2 = Lr.ffn_block_bwd(dv, c_vf, params, grads, p + ".vffn")
            dq, dkv = Lr.attn_block_bwd(dl2, c_ls, params, grads, p + ".lself")
            dl1 = dq + dkv
            dq, dkv = Lr.attn_block_bwd(dv2, c_vs, params, grads, p + ".vself")
            dv1 = dq + dkv
            dv_q, dx_kv = Lr.attn_block_bwd(dv1.reshape(B * N, 1, D), c_v2l, params, grads, p + ".v2l")
            dx_q, dv_kv = Lr.attn_block_bwd(dl1.reshape(B, N * L, D), c_l2v, params, grads, p + ".l2v")
            dx = dx_q.reshape(B * N, L, D) + dx_kv
            dv = dv_q.reshape(B, N, D) + dv_kv
        for i in reversed(range(cfg.relational_layers)):
            dv = Lr.self_layer_bwd(dv, c_rel[i], params, grads, f"rel.{i}")
        fuse_visual_bwd(dv, c_vis, params, grads)
    for i in reversed(range(cfg.language_layers)):
        dx = Lr.self_layer_bwd(dx, c_lang[i], params, grads, f"lang.{i}")
    embed_bwd(dx.reshape(B, N, L, D), c_emb, params, grads)


def pool_fwd(hl, tmask, pooling):
    if pooling == "first":
        return hl[:, :, 0, :], None
    w = tmask / np.maximum(tmask.sum(axis=-1, keepdims=True), 1.0)
    return np.einsum("bnl,bnld->bnd", w, hl), w


def pool_bwd(dp, cache, shape, pooling):
    if pooling == "first":
        out = np.zeros(shape)
        out[:, :, 0, :] = dp
        return out
    return cache[..., None] * dp[:, :, None, :]


def head_fwd(params, cfg, hl, hv, tmask, cmask):
    """prob_n = Sigmoid(W . LN(GeLU(X_n)) + b), X_n = pool(h^l_n) * h^v_n; masked slots -> 0."""
    pooled, c_pool = pool_fwd(hl, tmask, cfg.pooling)
    if cfg.language_only:
        X, c_fc = Lr.lin(params, "head.fc", pooled)
    else:
        X, c_fc = pooled * hv, None
    g, c_g = Lr.gelu_fwd(X)
    n, c_n = Lr.ln(params, "head.ln", g, cfg.ln_eps)
    z, c_o = Lr.lin(params, "head.out", n)
    z = z[..., 0]
    prob = Lr.sigmoid(z) * cmask
    return prob, (pooled, c_pool, hv, c_fc, c_g, c_n, c_o, z)


def head_bwd(dz, cache, params, cfg, grads, hl_shape):
    pooled, c_pool, hv, c_fc, c_g, c_n, c_o, z = cache
    dn = Lr.linear_bwd(dz[..., None], c_o, params["head.out.W"], grads, "head.out")
    dg = Lr.layernorm_bwd(dn, c_n, grads, "head.ln")
    dX = Lr.gelu_bwd(dg, c_g)
    if cfg.language_only:
        dpooled = Lr.linear_bwd(dX, c_fc, params["head.fc.W"], grads, "head.fc")
        dhv = None
    else:
        dpooled = dX * hv
        dhv = dX * pooled
    return pool_bwd(dpooled, c_pool, hl_shape, cfg.pooling), dhv


def coref_loss(probs, labels, mask) -> float:
    """Mean BCE over unmasked candidates with probabilities clamped to [eps, 1 - eps]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise AllMasked("every candidate is masked")
    p = np.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    per = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float((per * mask).sum() / count)


def _bce_dz(probs, labels, mask):
    """d(mean BCE)/d(logit), respecting the clamp."""
    count = mask.sum()
    inside = (probs > BCE_EPS) & (probs < 1.0 - BCE_EPS)
    p = np.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    dp = -(labels / p - (1.0 - labels) / (1.0 - p)) * inside
    return dp * p * (1.0 - p) * mask / count


def coref_forward(params, cfg: ModelConfig, batch: CorefBatch, rng=None, training=False):
    rr = _Rng(cfg, rng, training)
    hl, hv, c_enc = encode_fwd(params, cfg, batch, rr)
    prob, c_head = head_fwd(params, cfg, hl, hv, batch.tmask, batch.cmask)
    return prob, (c_enc, c_head, hl.shape, batch.tokens.shape)


def coref_loss_and_grads(params, cfg: ModelConfig, batch: CorefBatch, rng=None, training=False):
    prob, (c_enc, c_head, hl_shape, shape) = coref_forward(params, cfg, batch, rng, training)
    loss = coref_loss(prob, batch.labels, batch.cmask)
    grads: dict = {}
    dz = _bce_dz(prob, batch.labels, batch.cmask)
    dhl, dhv = head_bwd(dz, c_head, params, cfg, grads, hl_shape)
    encode_bwd(dhl, dhv, c_enc, params, cfg, grads, shape)
    return loss, prob, _complete(grads, params)


def _complete(grads, params):
    for name, value in params.items():
        if name not in grads:
            grads[name] = np.zeros_like(value)
    return grads


# ---------------------------------------------------------------------------
# clarification classifier


def disamb_forward(params, cfg: ModelConfig, tokens, mask, rng=None, training=False):
    """Probability that the turn needs clarification, from the final [CLS] state."""
    rr = _Rng(cfg, rng, training)
    segs = np.zeros_like(tokens)
    x, c_emb = embed_fwd(params, cfg, tokens, segs, rr)
    c_lang = []
    for i in range(cfg.language_layers):
        x, c = Lr.self_layer_fwd(params, f"lang.{i}", x, mask, cfg.n_heads, cfg.ln_eps, rr.rate, rr.rng, rr.training)
        c_lang.append(c)
    cls = x[:, 0, :]
    z, c_o = Lr.lin(params, "dhead.out", cls)
    return Lr.sigmoid(z[:, 0]), (c_emb, c_lang, c_o, x.shape)


def disamb_loss_and_grads(params, cfg: ModelConfig, tokens, mask, labels, rng=None, training=False):
    prob, (c_emb, c_lang, c_o, shape) = disamb_forward(params, cfg, tokens, mask, rng, training)
    ones = np.ones_like(prob)
    loss = coref_loss(prob, labels, ones)
    grads: dict = {}
    dz = _bce_dz(prob, np.asarray(labels, dtype=np.float64), ones)
    dcls = Lr.linear_bwd(dz[:, None], c_o, params["dhead.out.W"], grads, "dhead.out")
    dx = np.zeros(shape)
    dx[:, 0, :] = dcls
    for i in reversed(range(cfg.language_layers)):
        dx = Lr.self_layer_bwd(dx, c_lang[i], params, grads, f"lang.{i}")
    embed_bwd(dx, c_emb, params, grads)
    return loss, prob, _complete(grads, params)
