"""Small differentiable building blocks shared by the trainable modules."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T


def init_weight(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape).astype(np.float32)


def init_linear(params, rng, prefix, n_in, n_out, std=0.02):
    params[prefix + "/w"] = init_weight(rng, (n_in, n_out), std)
    params[prefix + "/b"] = np.zeros(n_out, dtype=np.float32)


def linear(x, p, prefix):
    return T.add_bias(T.matmul(x, p[prefix + "/w"]), p[prefix + "/b"])


def init_attention(params, rng, prefix, d, dh):
    for name in ("wq", "wk", "wv"):
        init_linear(params, rng, f"{prefix}/{name}", d, dh)
    init_linear(params, rng, f"{prefix}/wo", dh, d)


def attention(q_in, kv_in, p, prefix, dh):
    """Single-head scaled dot-product attention.

    ``q_in`` is ``(nq, d)``, ``kv_in`` is ``(nk, d)``; returns ``(nq, d)``.
    """
    q = linear(q_in, p, f"{prefix}/wq")
    k = linear(kv_in, p, f"{prefix}/wk")
    v = linear(kv_in, p, f"{prefix}/wv")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=1)
    return linear(T.matmul(weights, v), p, f"{prefix}/wo")


def init_layernorm(params, prefix, d):
    params[prefix + "/g"] = np.ones(d, dtype=np.float32)
    params[prefix + "/b"] = np.zeros(d, dtype=np.float32)


def layernorm(x, p, prefix):
    return T.layernorm(x, p[prefix + "/g"], p[prefix + "/b"])


def init_transformer_block(params, rng, prefix, d, mlp_ratio=2):
    init_layernorm(params, prefix + "/ln1", d)
    init_attention(params, rng, prefix + "/attn", d, d)
    init_layernorm(params, prefix + "/ln2", d)
    init_linear(params, rng, prefix + "/mlp1", d, mlp_ratio * d)
    init_linear(params, rng, prefix + "/mlp2", mlp_ratio * d, d)


def transformer_block(x, p, prefix, d):
    h = layernorm(x, p, prefix + "/ln1")
    x = T.add(x, attention(h, h, p, prefix + "/attn", d))
    h = T.gelu(linear(layernorm(x, p, prefix + "/ln2"), p, prefix + "/mlp1"))
    return T.add(x, linear(h, p, prefix + "/mlp2"))


def tokens_to_map(tokens, grid):
    """Differentiable ``(h*w, d) -> (d, h, w)`` reshape."""
    h, w = grid
    return T.reshape(T.transpose(tokens), (tokens.shape[1], h, w))


def map_to_tokens(fmap):
    """Differentiable ``(d, h, w) -> (h*w, d)`` reshape."""
    d, h, w = fmap.shape
    return T.transpose(T.reshape(fmap, (d, h * w)))
