"""Multi-scale encoding and cross-attention fusion of token grids.

The image (and its elevation map) is resized to every configured factor,
encoded by the frozen backbone, terrain-fused per scale, and the
resulting grids are combined on the native grid: the native-scale tokens
query the concatenation of all grids' tokens by cross-attention
(non-native grids bilinearly resampled onto the native grid first), and
each non-native grid additionally contributes through a per-scale
lateral projection, so detail reaches every native position directly
instead of competing for softmax mass. Finer grids enter their lateral
as a space-to-depth concatenation of the co-located fine tokens rather
than their average, because averaging is exactly what destroys
sub-patch contrasts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import FeatureGrid, _bilinear_np, encode
from .errors import ConfigError, ContractError
from .layers import attention, init_attention, init_weight, map_to_tokens, tokens_to_map

PREFIX = "ms_fusion/"

ATTN_DH = 32


@dataclass(frozen=True)
class ScaleSet:
    factors: tuple = (0.5, 1.0, 2.0)
    native_index: int = field(init=False, default=-1)

    def __post_init__(self):
        natives = [i for i, f in enumerate(self.factors) if f == 1.0]
        if len(natives) != 1:
            raise ConfigError(
                f"scale set {self.factors} must contain exactly one native factor 1.0"
            )
        object.__setattr__(self, "native_index", natives[0])

    def scaled_size(self, h, w, patch_size):
        sizes = []
        for f in self.factors:
            sh, sw = round(h * f), round(w * f)
            if sh % patch_size or sw % patch_size or sh < patch_size or sw < patch_size:
                raise ConfigError(
                    f"scale factor {f} maps ({h},{w}) to ({sh},{sw}), "
                    f"which is not divisible by patch size {patch_size}"
                )
            sizes.append((sh, sw))
        return sizes


def _fine_ratio(factor):
    """Integer grid ratio for finer-than-native factors, else None."""
    if factor > 1.0 and abs(factor - round(factor)) < 1e-9:
        return int(round(factor))
    return None


def init_fusion_params(rng, d, factors=(0.5, 1.0, 2.0)):
    params = {}
    init_attention(params, rng, PREFIX + "attn", d, ATTN_DH)
    for i, f in enumerate(factors):
        if f == 1.0:
            # the native grid is already the residual stream
            continue
        # finer grids keep their r*r co-located tokens distinct
        # (space-to-depth) instead of averaging them away
        r = _fine_ratio(f)
        n_in = d * r * r if r else d
        params[PREFIX + f"lateral{i}/w"] = init_weight(rng, (n_in, d), std=0.02)
    return params


def _subgrid_select(native_grid, r, offset_y, offset_x):
    """Constant (nH*nW, rH*rW) matrix picking one sub-offset per cell."""
    nh, nw = native_grid
    sel = np.zeros((nh * nw, nh * r * nw * r), dtype=np.float32)
    rows = np.arange(nh * nw)
    y, x = rows // nw, rows % nw
    cols = (y * r + offset_y) * (nw * r) + (x * r + offset_x)
    sel[rows, cols] = 1.0
    return sel


def multi_scale_encode(image, dem_norm, scales, enc_params, enc_cfg,
                       adapter_params=None, cached_tokens=None):
    """One terrain-fused FeatureGrid per scale factor.

    ``dem_norm`` is the already-normalized (1,H,W) elevation map, resized
    alongside the image. When ``adapter_params`` is None the grids are the
    plain image encodings (terrain ablation). ``cached_tokens`` optionally
    supplies precomputed frozen-encoder token arrays, one per factor.
    """
    from .adapter import encode_dem, gated_fuse

    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[1], img.shape[2]
    sizes = scales.scaled_size(h, w, enc_cfg.patch_size)
    grids = []
    for i, (sh, sw) in enumerate(sizes):
        if cached_tokens is not None:
            f_img = FeatureGrid(
                tokens=T.Tensor(cached_tokens[i]),
                grid=(sh // enc_cfg.patch_size, sw // enc_cfg.patch_size),
            )
        else:
            scaled = img if (sh, sw) == (h, w) else _bilinear_np(img, (sh, sw))
            f_img = encode(scaled, enc_params, enc_cfg)
        if adapter_params is None:
            grids.append(f_img)
            continue
        dem_s = dem_norm if (sh, sw) == (h, w) else _bilinear_np(
            np.asarray(dem_norm, dtype=np.float32), (sh, sw)
        )
        f_dem = encode_dem(dem_s, adapter_params, enc_cfg.patch_size,
                           expected_grid=f_img.grid)
        grids.append(gated_fuse(f_dem, f_img, adapter_params))
    return grids


def cross_scale_fuse(grids, scales, params):
    """Fuse per-scale grids onto the native grid via cross-attention."""
    if not grids:
        raise ContractError("cross_scale_fuse needs at least one grid")
    if scales.native_index >= len(grids):
        raise ContractError(
            f"native grid index {scales.native_index} missing from {len(grids)} grids"
        )
    native = grids[scales.native_index]
    aligned = []
    for i, g in enumerate(grids):
        if g.grid == native.grid:
            aligned.append(g.tokens)
        else:
            fmap = tokens_to_map(g.tokens, g.grid)
            aligned.append(map_to_tokens(T.bilinear_resize(fmap, native.grid)))
    kv = T.concat(aligned, axis=0) if len(aligned) > 1 else aligned[0]
    fused = T.add(native.tokens, attention(native.tokens, kv, params, PREFIX + "attn", ATTN_DH))
    for i, g in enumerate(grids):
        if i == scales.native_index:
            continue
        r = _fine_ratio(scales.factors[i])
        if r:
            # space-to-depth: concatenate the r*r co-located fine tokens
            # per native cell so sub-patch contrasts survive the lateral
            subs = [
                T.matmul(T.Tensor(_subgrid_select(native.grid, r, a, b)), g.tokens)
                for a in range(r) for b in range(r)
            ]
            lat_in = T.concat(subs, axis=1)
        else:
            lat_in = aligned[i]
        fused = T.add(fused, T.matmul(lat_in, params[PREFIX + f"lateral{i}/w"]))
    return FeatureGrid(tokens=fused, grid=native.grid)
