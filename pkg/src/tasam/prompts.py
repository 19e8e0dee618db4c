"""Temporal prompt generation and the baseline prompt strategies.

The temporal path runs one self-attention layer over the concatenated
token sequence of all historical frames and averages the result back
onto a single grid. Prompt synthesis then mean-pools that grid over k
vertical strips and maps each strip summary through a shared two-layer
MLP plus a learned per-slot embedding, so a larger k yields spatially
finer-grained prompts instead of k copies of a global average. The
alternative strategies (learned / point / box) exist for the ablation
rows and the prompt-strategy comparison; they bypass the temporal stack
entirely.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import FeatureGrid
from .errors import ConfigError, DimensionError
from .layers import attention, init_attention, init_linear, init_weight, linear

PREFIX = "tp_prompt/"

STRATEGIES = ("temporal", "learned", "point", "box")

ATTN_DH = 32


def init_prompt_params(rng, d, k):
    params = {}
    init_attention(params, rng, PREFIX + "attn", d, ATTN_DH)
    init_linear(params, rng, PREFIX + "mlp1", d, 2 * d)
    init_linear(params, rng, PREFIX + "mlp2", 2 * d, d)
    params[PREFIX + "slot"] = init_weight(rng, (k, d))
    return params


def init_learned_prompts(rng, d, k):
    return {PREFIX + "learned": init_weight(rng, (k, d))}


def temporal_encode(frames, params):
    """Aggregate T frame FeatureGrids into one grid.

    Self-attention runs over the full T*n token sequence; the outputs are
    then averaged across the T frame groups, which makes the result
    invariant to frame order whenever the frames are identical.
    """
    if not frames:
        raise ConfigError("temporal_encode requires at least one frame")
    grid = frames[0].grid
    d = frames[0].d
    for f in frames[1:]:
        if f.grid != grid or f.d != d:
            raise DimensionError(
                f"temporal stack is inconsistent: {f.grid}x{f.d} vs {grid}x{d}"
            )
    n = grid[0] * grid[1]
    x = T.concat([f.tokens for f in frames], axis=0)
    y = T.add(x, attention(x, x, params, PREFIX + "attn", ATTN_DH))
    stacked = T.reshape(y, (len(frames), n, d))
    return FeatureGrid(tokens=T.mean(stacked, axis=0), grid=grid)


def _strip_pool(grid_feats, k):
    """Mean-pool a FeatureGrid over k vertical strips -> (k, d) Tensor."""
    hp, wp = grid_feats.grid
    d = grid_feats.d
    bounds = np.linspace(0, wp, k + 1).astype(int)
    tok_map = T.reshape(T.transpose(grid_feats.tokens), (d, hp, wp))
    rows = []
    for i in range(k):
        lo, hi = int(bounds[i]), max(int(bounds[i + 1]), int(bounds[i]) + 1)
        hi = min(hi, wp)
        strip = T.narrow(tok_map, lo, hi, axis=2)
        pooled = T.mean(T.reshape(strip, (d, hp * (hi - lo))), axis=1)
        rows.append(T.reshape(pooled, (1, d)))
    return T.concat(rows, axis=0) if k > 1 else rows[0]


def synthesize_prompts(f_temp, k, params):
    """Strip-pool a FeatureGrid and map each summary to a prompt vector."""
    if k < 1:
        raise ConfigError(f"prompt count must be >= 1, got {k}")
    if params[PREFIX + "slot"].shape[0] != k:
        raise ConfigError(
            f"prompt head was built for a different k "
            f"({params[PREFIX + 'slot'].shape[0]} slots, need {k})"
        )
    strips = _strip_pool(f_temp, k)
    hidden = T.gelu(linear(strips, params, PREFIX + "mlp1"))
    return T.add(linear(hidden, params, PREFIX + "mlp2"), params[PREFIX + "slot"])


def learned_prompts(params):
    return params[PREFIX + "learned"]


def point_prompt_coords(k, height, width, seed):
    """Deterministic pixel coordinates for the manual-point baseline."""
    rng = np.random.default_rng([seed, 9173])
    ys = rng.integers(0, height, size=k)
    xs = rng.integers(0, width, size=k)
    return list(zip(ys.tolist(), xs.tolist()))


def point_prompts(native, coords, patch_size):
    """Prompts sampled from the tokens under k pixel coordinates."""
    _, wp = native.grid
    rows = []
    for y, x in coords:
        idx = (y // patch_size) * wp + (x // patch_size)
        rows.append(T.narrow(native.tokens, idx, idx + 1, axis=0))
    return T.concat(rows, axis=0)


def box_prompts(native, k, patch_size, height, width):
    """Prompts mean-pooled from k vertical strip boxes tiling the image."""
    return _strip_pool(native, k)
