"""Terrain-aware adapter: CNN elevation encoder plus gated feature mixing.

The elevation map is encoded into the same token grid as the image
features by a strided conv stack (GELU between layers, so the whole
module is smooth), then the two are blended per token and per channel
through a learned sigmoid gate, so every output value stays inside the
elementwise envelope of its two inputs.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .encoder import FeatureGrid
from .errors import ConfigError, DimensionError
from .layers import init_weight, map_to_tokens

PREFIX = "ta_adapter/"


def dem_conv_channels(patch_size, d):
    """Channel ramp of the elevation CNN: one stride-2 layer per factor
    of two in the patch size, then a stride-1 projection to width d."""
    n_down = int(math.log2(patch_size))
    return [4 * 2**i for i in range(n_down)] + [d]


def init_adapter_params(rng, patch_size, d):
    chans = dem_conv_channels(patch_size, d)
    params = {}
    c_in = 1
    for i, c_out in enumerate(chans):
        params[PREFIX + f"dem{i}/w"] = init_weight(
            rng, (c_out, c_in, 3, 3), std=1.0 / math.sqrt(9 * c_in)
        )
        params[PREFIX + f"dem{i}/b"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    params[PREFIX + "gate/w"] = init_weight(rng, (2 * d, d))
    params[PREFIX + "gate/b"] = np.zeros(d, dtype=np.float32)
    return params


def normalize_dem(dem):
    """Per-sample zero-mean unit-variance normalization of a (1,H,W) map."""
    dem = np.asarray(dem, dtype=np.float32)
    mu = dem.mean()
    sd = dem.std()
    return (dem - mu) / (sd if sd > 1e-12 else 1.0)


def encode_dem(dem, params, patch_size, expected_grid=None):
    """Encode a normalized ``(1, H, W)`` elevation map into a FeatureGrid.

    The stride-2 stack downsamples by exactly ``patch_size`` so the grid
    matches the paired image encoding.
    """
    if isinstance(dem, np.ndarray):
        dem = T.Tensor(dem)
    if dem.shape[0] != 1 or len(dem.shape) != 3:
        raise DimensionError(f"encode_dem expects (1,H,W), got {dem.shape}")
    n_layers = len(dem_conv_channels(patch_size, 1))
    x = dem
    for i in range(n_layers):
        last = i == n_layers - 1
        stride = 1 if last else 2
        x = T.conv2d(
            x, params[PREFIX + f"dem{i}/w"], params[PREFIX + f"dem{i}/b"],
            stride=stride, padding=1,
        )
        if not last:
            x = T.gelu(x)
    _, h, w = x.shape
    if expected_grid is not None and (h, w) != tuple(expected_grid):
        raise ConfigError(
            f"elevation encoder produced grid ({h},{w}), expected {tuple(expected_grid)}; "
            "conv stride/padding does not match the patch size"
        )
    return FeatureGrid(tokens=map_to_tokens(x), grid=(h, w))


def gated_fuse(f_e, f_i, params):
    """Convex per-token, per-channel mix of elevation and image features.

    gate = sigmoid(W [f_e || f_i] + b); output = gate*f_e + (1-gate)*f_i,
    computed as f_i + gate*(f_e - f_i).
    """
    if f_e.grid != f_i.grid or f_e.d != f_i.d:
        raise DimensionError(
            f"gated_fuse: grids/widths disagree, {f_e.grid}x{f_e.d} vs {f_i.grid}x{f_i.d}"
        )
    cat = T.concat([f_e.tokens, f_i.tokens], axis=1)
    gate = T.sigmoid(T.add_bias(T.matmul(cat, params[PREFIX + "gate/w"]), params[PREFIX + "gate/b"]))
    fused = T.add(f_i.tokens, T.mul(gate, T.sub(f_e.tokens, f_i.tokens)))
    return FeatureGrid(tokens=fused, grid=f_i.grid)


def gate_values(f_e, f_i, params):
    """Forward-only gate activations (n_tokens, d), for visualization."""
    cat = np.concatenate([f_e.tokens.numpy(), f_i.tokens.numpy()], axis=1)
    z = cat @ params[PREFIX + "gate/w"].numpy() + params[PREFIX + "gate/b"].numpy()
    return 1.0 / (1.0 + np.exp(-z))
