"""Frozen patch-transformer image encoder (mock foundation backbone).

The encoder is initialized from a seed, flagged frozen, and never
trained; every run re-derives the same weights from the same seed, which
is what makes bit-exact freeze verification possible. Internally it runs
in plain numpy (no tape): downstream gradients never flow into it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, _resize_axis_weights

FROZEN_PREFIX = "frozen/"


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    depth: int = 12
    d: int = 64
    heads: int = 4
    mlp_ratio: int = 8
    pos_grid: int = 32  # base grid for learned positional embeddings
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(
                f"channel width {self.d} is not divisible by {self.heads} heads"
            )
        if self.patch_size < 1 or (self.patch_size & (self.patch_size - 1)) != 0:
            raise ConfigError(f"patch_size must be a power of two, got {self.patch_size}")


@dataclass
class FeatureGrid:
    """Encoder output: ``tokens`` is ``(h*w, d)``, ``grid`` is ``(h, w)``."""

    tokens: Tensor
    grid: tuple

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.shape[0] != h * w:
            raise ConfigError(
                f"token count {self.tokens.shape[0]} does not match grid {self.grid}"
            )

    @property
    def d(self):
        return self.tokens.shape[1]


def init_encoder_params(cfg):
    """Seeded frozen weights, as a name->float32 array dict."""
    rng = np.random.default_rng(cfg.seed)
    d, p = cfg.d, cfg.patch_size

    def w(*shape, std=0.02):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    params = {
        "frozen/patch_embed/w": w(3, d, std=0.4),
        "frozen/patch_embed/b": np.zeros(d, dtype=np.float32),
        "frozen/pos_embed": w(cfg.pos_grid * cfg.pos_grid, d, std=0.02),
    }
    for i in range(cfg.depth):
        pre = f"frozen/block{i}/"
        params[pre + "ln1/g"] = np.ones(d, dtype=np.float32)
        params[pre + "ln1/b"] = np.zeros(d, dtype=np.float32)
        for proj in ("wq", "wk", "wv", "wo"):
            params[pre + f"attn/{proj}"] = w(d, d)
            params[pre + f"attn/{proj}_b"] = np.zeros(d, dtype=np.float32)
        params[pre + "ln2/g"] = np.ones(d, dtype=np.float32)
        params[pre + "ln2/b"] = np.zeros(d, dtype=np.float32)
        params[pre + "mlp/w1"] = w(d, cfg.mlp_ratio * d)
        params[pre + "mlp/b1"] = np.zeros(cfg.mlp_ratio * d, dtype=np.float32)
        params[pre + "mlp/w2"] = w(cfg.mlp_ratio * d, d)
        params[pre + "mlp/b2"] = np.zeros(d, dtype=np.float32)
    params["frozen/ln_f/g"] = np.ones(d, dtype=np.float32)
    params["frozen/ln_f/b"] = np.zeros(d, dtype=np.float32)
    return params


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    return (xc / np.sqrt(var + eps)) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _mha(x, p, pre, heads):
    n, d = x.shape
    dh = d // heads
    q = (x @ p[pre + "attn/wq"] + p[pre + "attn/wq_b"]).reshape(n, heads, dh)
    k = (x @ p[pre + "attn/wk"] + p[pre + "attn/wk_b"]).reshape(n, heads, dh)
    v = (x @ p[pre + "attn/wv"] + p[pre + "attn/wv_b"]).reshape(n, heads, dh)
    scores = np.einsum("nhd,mhd->hnm", q, k) / np.sqrt(dh).astype(np.float32)
    scores -= scores.max(axis=2, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=2, keepdims=True)
    out = np.einsum("hnm,mhd->nhd", att, v).reshape(n, d)
    return out @ p[pre + "attn/wo"] + p[pre + "attn/wo_b"]


def _bilinear_np(x, size):
    """Numpy-only align-corners=false bilinear resize of a (c,H,W) map."""
    c, h, w = x.shape
    h2, w2 = size
    if (h2, w2) == (h, w):
        return x.copy()
    ri0, ri1, rf = _resize_axis_weights(h, h2, x.dtype)
    ci0, ci1, cf = _resize_axis_weights(w, w2, x.dtype)
    rf = rf[:, None]
    cf = cf[None, :]
    top = x[:, ri0[:, None], ci0[None, :]] * (1 - cf) + x[:, ri0[:, None], ci1[None, :]] * cf
    bot = x[:, ri1[:, None], ci0[None, :]] * (1 - cf) + x[:, ri1[:, None], ci1[None, :]] * cf
    return (top * (1 - rf) + bot * rf).astype(x.dtype)


def positional_embedding(params, cfg, grid):
    """Positional table resampled from the base grid to ``grid``."""
    h, w = grid
    base = params["frozen/pos_embed"]
    if (h, w) == (cfg.pos_grid, cfg.pos_grid):
        return base
    maps = base.reshape(cfg.pos_grid, cfg.pos_grid, cfg.d).transpose(2, 0, 1)
    return _bilinear_np(maps, (h, w)).transpose(1, 2, 0).reshape(h * w, cfg.d)


def encode(image, params, cfg):
    """Encode a ``(3, H, W)`` image into a token FeatureGrid.

    H and W must be divisible by the patch size; the grid is
    ``(H/patch, W/patch)``. The output is a constant with respect to
    training (no tape recording).
    """
    img = image.numpy() if isinstance(image, Tensor) else np.asarray(image)
    img = img.astype(np.float32, copy=False)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ConfigError(f"encode expects a (3,H,W) image, got {img.shape}")
    _, h, w = img.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(
            f"image extents ({h},{w}) are not divisible by patch size {p}"
        )
    hp, wp = h // p, w // p
    # anti-aliased patch embedding: each patch enters as its mean color,
    # so detail finer than the patch is only visible to scaled branches
    patches = (
        img.reshape(3, hp, p, wp, p)
        .mean(axis=(2, 4))
        .transpose(1, 2, 0)
        .reshape(hp * wp, 3)
    )
    x = patches @ params["frozen/patch_embed/w"] + params["frozen/patch_embed/b"]
    x = x + positional_embedding(params, cfg, (hp, wp))
    for i in range(cfg.depth):
        pre = f"frozen/block{i}/"
        x = x + _mha(_ln(x, params[pre + "ln1/g"], params[pre + "ln1/b"]), params, pre, cfg.heads)
        hidden = _gelu(_ln(x, params[pre + "ln2/g"], params[pre + "ln2/b"]) @ params[pre + "mlp/w1"] + params[pre + "mlp/b1"])
        x = x + hidden @ params[pre + "mlp/w2"] + params[pre + "mlp/b2"]
    x = _ln(x, params["frozen/ln_f/g"], params["frozen/ln_f/b"])
    return FeatureGrid(tokens=Tensor(x), grid=(hp, wp))


def frozen_entries(params):
    return {k: v for k, v in params.items() if k.startswith(FROZEN_PREFIX)}


def freeze_check(params, cfg):
    """True iff every frozen entry is bit-identical to its seeded init."""
    ref = init_encoder_params(cfg)
    current = frozen_entries(
        {k: (v.numpy() if isinstance(v, Tensor) else v) for k, v in params.items()}
    )
    if set(current) != set(ref):
        return False
    return all(
        current[k].shape == ref[k].shape
        and current[k].tobytes() == ref[k].tobytes()
        for k in ref
    )
