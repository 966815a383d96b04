"""Differentiable building blocks: each ``*_fwd`` returns (output, cache) and
the matching ``*_bwd`` maps an upstream gradient to input and parameter
gradients. Everything is float64 numpy."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

MASK_VALUE = -1e9
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _acc(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


# ---------------------------------------------------------------------------
# elementwise


def gelu_fwd(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, (x, cdf)


def gelu_bwd(dy, cache):
    x, cdf = cache
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dropout_fwd(x, rate, rng, training):
    if not training or rate <= 0.0:
        return x, None
    keep = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)
    return x * keep, keep


def dropout_bwd(dy, cache):
    return dy if cache is None else dy * cache


# ---------------------------------------------------------------------------
# affine and normalisation


def linear_fwd(x, W, b):
    return x @ W + b, x


def linear_bwd(dy, cache, W, grads, prefix):
    x = cache
    _acc(grads, prefix + ".W", x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1]))
    _acc(grads, prefix + ".b", dy.reshape(-1, dy.shape[-1]).sum(axis=0))
    return dy @ W.T


def layernorm_fwd(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_bwd(dy, cache, grads, prefix):
    xhat, inv, g = cache
    d = dy.shape[-1]
    _acc(grads, prefix + ".g", (dy * xhat).reshape(-1, d).sum(axis=0))
    _acc(grads, prefix + ".b", dy.reshape(-1, d).sum(axis=0))
    dxhat = dy * g
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def ln(params, prefix, x, eps):
    return layernorm_fwd(x, params[prefix + ".g"], params[prefix + ".b"], eps)


def lin(params, prefix, x):
    return linear_fwd(x, params[prefix + ".W"], params[prefix + ".b"])


# ---------------------------------------------------------------------------
# attention


def mha_fwd(params, prefix, q_in, kv_in, key_mask, n_heads):
    """Multi-head attention.

    q_in: (G, Lq, D); kv_in: (G, Lk, D); key_mask: (G, Lk) with 1 = attend.
    Masked keys get an additive -1e9 so their weight underflows to exactly 0.
    """
    G, Lq, D = q_in.shape
    Lk = kv_in.shape[1]
    dh = D // n_heads
    q, cq = lin(params, prefix + ".q", q_in)
    k, ck = lin(params, prefix + ".k", kv_in)
    v, cv = lin(params, prefix + ".v", kv_in)
    qh = q.reshape(G, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(G, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(G, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / math.sqrt(dh)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores = scores + ((1.0 - key_mask) * MASK_VALUE)[:, None, None, :]
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    ctx = (w @ vh).transpose(0, 2, 1, 3).reshape(G, Lq, D)
    out, co = lin(params, prefix + ".o", ctx)
    return out, (cq, ck, cv, co, qh, kh, vh, w, scale, n_heads)


def mha_bwd(dout, cache, params, grads, prefix):
    cq, ck, cv, co, qh, kh, vh, w, scale, n_heads = cache
    G, H, Lq, dh = qh.shape
    Lk = kh.shape[2]
    D = H * dh
    dctx = linear_bwd(dout, co, params[prefix + ".o.W"], grads, prefix + ".o")
    dctx_h = dctx.reshape(G, Lq, H, dh).transpose(0, 2, 1, 3)
    dw = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = w.transpose(0, 1, 3, 2) @ dctx_h
    dscores = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dq = dqh.transpose(0, 2, 1, 3).reshape(G, Lq, D)
    dk = dkh.transpose(0, 2, 1, 3).reshape(G, Lk, D)
    dv = dvh.transpose(0, 2, 1, 3).reshape(G, Lk, D)
    dq_in = linear_bwd(dq, cq, params[prefix + ".q.W"], grads, prefix + ".q")
    dkv_in = linear_bwd(dk, ck, params[prefix + ".k.W"], grads, prefix + ".k")
    dkv_in = dkv_in + linear_bwd(dv, cv, params[prefix + ".v.W"], grads, prefix + ".v")
    return dq_in, dkv_in


# ---------------------------------------------------------------------------
# composite sub-layers (post-LN residual blocks)


def attn_block_fwd(params, prefix, q_in, kv_in, key_mask, n_heads, eps, rate, rng, training):
    """LN(q_in + Dropout(MHA(q_in, kv_in)))."""
    a, ca = mha_fwd(params, prefix + ".attn", q_in, kv_in, key_mask, n_heads)
    a, cd = dropout_fwd(a, rate, rng, training)
    y, cl = ln(params, prefix + ".ln", q_in + a, eps)
    return y, (ca, cd, cl)


def attn_block_bwd(dy, cache, params, grads, prefix):
    ca, cd, cl = cache
    dres = layernorm_bwd(dy, cl, grads, prefix + ".ln")
    da = dropout_bwd(dres, cd)
    dq_in, dkv_in = mha_bwd(da, ca, params, grads, prefix + ".attn")
    return dres + dq_in, dkv_in


def ffn_block_fwd(params, prefix, x, eps, rate, rng, training):
    """LN(x + Dropout(W2 GeLU(W1 x)))."""
    h, c1 = lin(params, prefix + ".fc1", x)
    g, cg = gelu_fwd(h)
    o, c2 = lin(params, prefix + ".fc2", g)
    o, cd = dropout_fwd(o, rate, rng, training)
    y, cl = ln(params, prefix + ".ln", x + o, eps)
    return y, (c1, cg, c2, cd, cl)


def ffn_block_bwd(dy, cache, params, grads, prefix):
    c1, cg, c2, cd, cl = cache
    dres = layernorm_bwd(dy, cl, grads, prefix + ".ln")
    do = dropout_bwd(dres, cd)
    dg = linear_bwd(do, c2, params[prefix + ".fc2.W"], grads, prefix + ".fc2")
    dh = gelu_bwd(dg, cg)
    dx = linear_bwd(dh, c1, params[prefix + ".fc1.W"], grads, prefix + ".fc1")
    return dres + dx


def self_layer_fwd(params, prefix, x, mask, n_heads, eps, rate, rng, training):
    """Transformer encoder layer: self-attention block then feed-forward block."""
    h, ca = attn_block_fwd(params, prefix + ".self", x, x, mask, n_heads, eps, rate, rng, training)
    y, cf = ffn_block_fwd(params, prefix + ".ffn", h, eps, rate, rng, training)
    return y, (ca, cf)


def self_layer_bwd(dy, cache, params, grads, prefix):
    ca, cf = cache
    dh = ffn_block_bwd(dy, cf, params, grads, prefix + ".ffn")
    dq, dkv = attn_block_bwd(dh, ca, params, grads, prefix + ".self")
    return dq + dkv
