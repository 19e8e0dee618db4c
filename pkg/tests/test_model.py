"""Model assembly: config plumbing, parameter groups, forward pass."""

import numpy as np
import pytest

from tasam.data import GenConfig, generate_sample
from tasam.errors import ConfigError
from tasam.model import (
    ModelConfig,
    build_model,
    forward,
    precompute_features,
    state_from_arrays,
)

SMALL = dict(patch_size=8, depth=2, d=16, heads=4, mlp_ratio=2, pos_grid=8,
             k=2, temporal_window=2, scales=(1.0, 2.0), seed=0)

SAMPLE = generate_sample(GenConfig(height=32, width=32, frames=2, seed=9), 0)


def small_cfg(**over):
    return ModelConfig(**{**SMALL, **over})


def test_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(prompt_strategy="nope")
    with pytest.raises(ConfigError):
        small_cfg(k=0)
    with pytest.raises(ConfigError):
        small_cfg(scales=(0.5, 2.0))


def test_temporal_removal_falls_back_to_learned_prompts():
    cfg = small_cfg(use_temporal=False)
    assert cfg.effective_prompt_strategy == "learned"
    assert small_cfg().effective_prompt_strategy == "temporal"


def test_config_dict_roundtrip():
    cfg = small_cfg(use_terrain=False, k=3)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_build_model_marks_only_frozen_as_non_trainable():
    state = build_model(small_cfg())
    for name, p in state.params.items():
        assert p.requires_grad == (not name.startswith("frozen/"))
    assert set(state.trainable()) == {
        k for k in state.params if not k.startswith("frozen/")
    }


def test_ablated_variants_drop_their_parameter_group():
    full = set(build_model(small_cfg()).params)
    wo_t = set(build_model(small_cfg(use_terrain=False)).params)
    wo_p = set(build_model(small_cfg(use_temporal=False)).params)
    wo_m = set(build_model(small_cfg(use_multiscale=False)).params)
    assert {k for k in full - wo_t} == {k for k in full if k.startswith("ta_adapter/")}
    assert all(k.startswith(("tp_prompt/",)) for k in full - wo_p)
    assert {k for k in full - wo_m} == {k for k in full if k.startswith("ms_fusion/")}


def test_variants_share_the_weights_of_kept_modules():
    # parameter draws happen in a fixed order, so removing one module
    # leaves every other module's initialization bit-identical
    full = build_model(small_cfg())
    wo_t = build_model(small_cfg(use_terrain=False))
    for name, p in wo_t.params.items():
        assert p.numpy().tobytes() == full.params[name].numpy().tobytes()


def test_state_from_arrays_roundtrip():
    state = build_model(small_cfg())
    arrays = state.arrays()
    again = state_from_arrays(small_cfg(), arrays)
    for name in arrays:
        assert again.params[name].numpy().tobytes() == arrays[name].tobytes()


def test_state_from_arrays_rejects_mismatches():
    state = build_model(small_cfg())
    arrays = state.arrays()
    missing = dict(arrays)
    missing.pop("decoder/head/w")
    with pytest.raises(ConfigError, match="missing"):
        state_from_arrays(small_cfg(), missing)
    bad = dict(arrays)
    bad["decoder/head/w"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ConfigError, match="shape"):
        state_from_arrays(small_cfg(), bad)


def test_precompute_features_covers_scales_and_frames():
    state = build_model(small_cfg())
    feats = precompute_features(state, SAMPLE)
    assert set(feats.scale_tokens) == {1.0, 2.0}
    assert feats.native_tokens.shape == (16, 16)
    assert feats.scale_tokens[2.0].shape == (64, 16)
    assert len(feats.frame_tokens) == 2
    wide = precompute_features(state, SAMPLE, scale_factors=(0.5,),
                               temporal_window=1)
    assert set(wide.scale_tokens) == {0.5, 1.0}
    assert len(wide.frame_tokens) == 1


def test_forward_shapes_and_determinism():
    state = build_model(small_cfg())
    a = forward(state, SAMPLE).logits.numpy()
    b = forward(state, SAMPLE).logits.numpy()
    assert a.shape == (4, 32, 32)
    assert a.tobytes() == b.tobytes()


def test_forward_with_cache_matches_uncached():
    state = build_model(small_cfg())
    feats = precompute_features(state, SAMPLE)
    a = forward(state, SAMPLE).logits.numpy()
    b = forward(state, SAMPLE, feats).logits.numpy()
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("strategy", ["learned", "point", "box"])
def test_alternative_prompt_strategies_run(strategy):
    state = build_model(small_cfg(prompt_strategy=strategy))
    seg = forward(state, SAMPLE)
    assert seg.logits.shape == (4, 32, 32)


def test_forward_timings_and_collect():
    state = build_model(small_cfg())
    timings, collect = {}, {}
    forward(state, SAMPLE, timings=timings, collect=collect)
    assert {"ta_adapter", "tp_prompt", "ms_fusion", "decoder"} <= set(timings)
    assert all(v >= 0 for v in timings.values())
    assert collect["prompts"].shape == (2, 16)
    assert collect["fused_tokens"].shape == (16, 16)
    assert collect["gate"].shape == (16, 16)


def test_module_toggles_change_the_output():
    full = forward(build_model(small_cfg()), SAMPLE).logits.numpy()
    for over in (dict(use_terrain=False), dict(use_temporal=False),
                 dict(use_multiscale=False)):
        other = forward(build_model(small_cfg(**over)), SAMPLE).logits.numpy()
        assert np.abs(full - other).max() > 1e-6
