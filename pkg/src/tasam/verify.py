"""Verification suite: gradient checks, gate-bound checks, freeze checks.

These routines back both the ``verify``/``gradcheck`` CLI commands and
the test suite, so pass/fail semantics live in one place.
"""

from __future__ import annotations

import numpy as np

from . import adapter, decoder, fusion, prompts, tensor as T
from .data import GenConfig, generate_sample
from .decoder import segmentation_loss
from .encoder import FeatureGrid
from .fusion import ScaleSet
from .gradcheck import gradcheck
from .model import ModelConfig, ModelState, build_model, forward, precompute_features
from .tensor import Tensor

D_SMALL = 64


def _sq_sum(x):
    return T.sum_(T.mul(x, x))


def _const_grid(rng, n, d, grid):
    return FeatureGrid(tokens=Tensor(rng.normal(0, 0.5, (n, d)).astype(np.float32)),
                       grid=grid)


def adapter_gradcheck(seed=0, **kw):
    rng = np.random.default_rng([seed, 11])
    params = {k: Tensor(v, requires_grad=True)
              for k, v in adapter.init_adapter_params(rng, 8, D_SMALL).items()}
    dem = adapter.normalize_dem(rng.normal(0, 1, (1, 16, 16)).astype(np.float32))
    f_i = _const_grid(rng, 4, D_SMALL, (2, 2))

    def build_loss(p):
        f_e = adapter.encode_dem(dem, p, 8, expected_grid=(2, 2))
        return _sq_sum(adapter.gated_fuse(f_e, f_i, p).tokens)

    return gradcheck(build_loss, params, **kw)


def prompt_gradcheck(seed=0, k=2, **kw):
    rng = np.random.default_rng([seed, 12])
    params = {k2: Tensor(v, requires_grad=True)
              for k2, v in prompts.init_prompt_params(rng, D_SMALL, k).items()}
    frames = [_const_grid(rng, 4, D_SMALL, (2, 2)) for _ in range(2)]

    def build_loss(p):
        f_temp = prompts.temporal_encode(frames, p)
        return _sq_sum(prompts.synthesize_prompts(f_temp, k, p))

    return gradcheck(build_loss, params, **kw)


def fusion_gradcheck(seed=0, **kw):
    rng = np.random.default_rng([seed, 13])
    params = {k: Tensor(v, requires_grad=True)
              for k, v in fusion.init_fusion_params(rng, D_SMALL).items()}
    scales = ScaleSet((0.5, 1.0, 2.0))
    grids = [
        _const_grid(rng, 1, D_SMALL, (1, 1)),
        _const_grid(rng, 4, D_SMALL, (2, 2)),
        _const_grid(rng, 16, D_SMALL, (4, 4)),
    ]

    def build_loss(p):
        return _sq_sum(fusion.cross_scale_fuse(grids, scales, p).tokens)

    return gradcheck(build_loss, params, **kw)


def decoder_gradcheck(seed=0, num_classes=4, **kw):
    # the layernorm directions carry near-zero gradients, so the check is
    # round-off limited: a larger step keeps the quotient well conditioned
    kw.setdefault("h", 1e-3)
    rng = np.random.default_rng([seed, 14])
    params = {k: Tensor(v, requires_grad=True)
              for k, v in decoder.init_decoder_params(rng, D_SMALL, num_classes).items()}
    f_ms = _const_grid(rng, 4, D_SMALL, (2, 2))
    prompt_set = Tensor(rng.normal(0, 0.5, (2, D_SMALL)).astype(np.float32))
    labels = rng.integers(0, num_classes, (16, 16)).astype(np.uint8)

    def build_loss(p):
        seg = decoder.decode(f_ms, prompt_set, p, (16, 16))
        return segmentation_loss(seg, labels)

    return gradcheck(build_loss, params, **kw)


MODULE_GRADCHECKS = {
    "ta_adapter": adapter_gradcheck,
    "tp_prompt": prompt_gradcheck,
    "ms_fusion": fusion_gradcheck,
    "decoder": decoder_gradcheck,
}


def end_to_end_gradcheck(seed=0, h=1e-3, tol=1e-2, max_coords=4):
    """Gradient check of the whole trainable path on a 32x32 sample."""
    sample = generate_sample(GenConfig(height=32, width=32, frames=2, seed=seed), 0)
    cfg = ModelConfig(temporal_window=2, seed=seed)
    state = build_model(cfg)
    feats = precompute_features(state, sample)
    trainable = state.trainable()
    frozen = {k: v for k, v in state.params.items() if k not in trainable}

    def build_loss(p):
        shadow = ModelState(config=cfg, params={**frozen, **p})
        seg = forward(shadow, sample, feats)
        return segmentation_loss(seg, sample.labels)

    return gradcheck(build_loss, trainable, h=h, tol=tol,
                     max_coords=max_coords, seed=seed)


def gate_bound_check(n=1000, seed=0, d=16):
    """Elementwise convex-bound and boundary behaviour of the gated fuse.

    Returns (max_bound_violation, err_gate_zero, err_gate_one): the first
    over n random (params, f_e, f_i) draws, the last two with the gate
    driven to its 0/1 saturation via the bias.
    """
    rng = np.random.default_rng([seed, 15])
    max_violation = 0.0
    for _ in range(n):
        params = {k: Tensor(v) for k, v in
                  adapter.init_adapter_params(rng, 2, d).items()}
        fe = rng.normal(0, 2.0, (3, d)).astype(np.float32)
        fi = rng.normal(0, 2.0, (3, d)).astype(np.float32)
        f_e = FeatureGrid(tokens=Tensor(fe), grid=(1, 3))
        f_i = FeatureGrid(tokens=Tensor(fi), grid=(1, 3))
        out = adapter.gated_fuse(f_e, f_i, params).tokens.numpy()
        lo = np.minimum(fe, fi)
        hi = np.maximum(fe, fi)
        max_violation = max(
            max_violation,
            float(np.max(lo - out, initial=0.0)),
            float(np.max(out - hi, initial=0.0)),
        )

    params = {k: Tensor(v) for k, v in adapter.init_adapter_params(rng, 2, d).items()}
    params[adapter.PREFIX + "gate/w"] = Tensor(np.zeros((2 * d, d), dtype=np.float32))
    fe = rng.normal(0, 2.0, (3, d)).astype(np.float32)
    fi = rng.normal(0, 2.0, (3, d)).astype(np.float32)
    f_e = FeatureGrid(tokens=Tensor(fe), grid=(1, 3))
    f_i = FeatureGrid(tokens=Tensor(fi), grid=(1, 3))
    params[adapter.PREFIX + "gate/b"] = Tensor(np.full(d, -40.0, dtype=np.float32))
    err0 = float(np.abs(adapter.gated_fuse(f_e, f_i, params).tokens.numpy() - fi).max())
    params[adapter.PREFIX + "gate/b"] = Tensor(np.full(d, 40.0, dtype=np.float32))
    err1 = float(np.abs(adapter.gated_fuse(f_e, f_i, params).tokens.numpy() - fe).max())
    return max_violation, err0, err1
