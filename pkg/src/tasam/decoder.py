"""Trainable mask decoder: fused tokens + prompts -> dense class logits.

Prompt conditioning is twofold. Each prompt modulates its vertical strip
of the token grid feature-wise — an additive shift plus a multiplicative
scale (the j-th of k prompts owns the j-th strip, matching how prompts
are pooled), so spatially resolved prompt content and its interactions
with local appearance reach the right tokens directly; the prompt
vectors are also
appended to the token sequence and take part in two transformer blocks,
but only the token outputs are projected to class logits; the prompt
outputs are discarded, mirroring sparse-prompt conditioning. Logits
live on the token grid and are bilinearly upsampled to the requested
output resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError
from .layers import (
    init_layernorm,
    init_linear,
    init_transformer_block,
    layernorm,
    linear,
    tokens_to_map,
    transformer_block,
)

PREFIX = "decoder/"

DEPTH = 2


@dataclass
class SegmentationMap:
    """Dense per-pixel class scores: ``logits`` is a (C, H, W) Tensor."""

    logits: T.Tensor

    @property
    def labels(self):
        return np.argmax(self.logits.numpy(), axis=0).astype(np.uint8)

    @property
    def num_classes(self):
        return self.logits.shape[0]


def init_decoder_params(rng, d, num_classes):
    params = {}
    for i in range(DEPTH):
        init_transformer_block(params, rng, PREFIX + f"block{i}", d, mlp_ratio=2)
    init_layernorm(params, PREFIX + "ln_f", d)
    init_linear(params, rng, PREFIX + "head", d, num_classes)
    return params


def _strip_broadcast(grid, k):
    """Constant (h*w, k) matrix assigning each token its strip's prompt."""
    hp, wp = grid
    bounds = np.linspace(0, wp, k + 1).astype(int)
    col_slot = np.clip(np.searchsorted(bounds[1:], np.arange(wp), side="right"),
                       0, k - 1)
    sel = np.zeros((hp * wp, k), dtype=np.float32)
    sel[np.arange(hp * wp), np.tile(col_slot, hp)] = 1.0
    return sel


def decode(f_ms, prompt_set, params, out_size):
    """Decode fused tokens conditioned on prompts into (C, H, W) logits."""
    d = f_ms.d
    if prompt_set is not None and prompt_set.shape[0] > 0:
        if prompt_set.shape[1] != d:
            raise DimensionError(
                f"prompt width {prompt_set.shape[1]} does not match token width {d}"
            )
        sel = T.Tensor(_strip_broadcast(f_ms.grid, prompt_set.shape[0]))
        cond = T.matmul(sel, prompt_set)
        # feature-wise shift AND scale: the multiplicative term exposes
        # token-prompt products directly, so interactions between local
        # appearance and prompt content are linearly decodable
        toks = T.add(T.add(f_ms.tokens, cond), T.mul(f_ms.tokens, cond))
        seq = T.concat([toks, prompt_set], axis=0)
    else:
        seq = f_ms.tokens
    n_tokens = f_ms.tokens.shape[0]
    for i in range(DEPTH):
        seq = transformer_block(seq, params, PREFIX + f"block{i}", d)
    seq = layernorm(seq, params, PREFIX + "ln_f")
    tokens = T.narrow(seq, 0, n_tokens, axis=0)
    logits_tok = linear(tokens, params, PREFIX + "head")
    grid_logits = tokens_to_map(logits_tok, f_ms.grid)
    logits = T.bilinear_resize(grid_logits, out_size)
    return SegmentationMap(logits=logits)


def segmentation_loss(seg_map, labels):
    """Mean per-pixel cross-entropy of a SegmentationMap against class ids."""
    labels = np.asarray(labels)
    c, h, w = seg_map.logits.shape
    if labels.shape != (h, w):
        raise DataError(
            f"labels shape {labels.shape} does not match logits spatial ({h},{w})"
        )
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(
            f"label ids must lie in [0, {c}), got [{labels.min()}, {labels.max()}]"
        )
    flat = T.transpose(T.reshape(seg_map.logits, (c, h * w)))
    return T.cross_entropy(flat, labels.reshape(-1).astype(np.int64))
