"""Full model assembly: config, parameter state, and the forward pass.

Parameter names carry their group prefix (``frozen/``, ``ta_adapter/``,
``tp_prompt/``, ``ms_fusion/``, ``decoder/``); the frozen group is
initialized from the seed and never optimized, so it can be re-derived
and compared bit-for-bit at any time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import adapter, decoder, fusion, prompts
from .encoder import EncoderConfig, FeatureGrid, _bilinear_np, encode, init_encoder_params
from .errors import ConfigError
from .fusion import ScaleSet
from .tensor import Tensor

GROUP_PREFIXES = ("frozen/", "ta_adapter/", "tp_prompt/", "ms_fusion/", "decoder/")


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    depth: int = 12
    d: int = 64
    heads: int = 4
    mlp_ratio: int = 8
    pos_grid: int = 32
    num_classes: int = 4
    k: int = 4  # prompt count
    temporal_window: int = 3  # T
    scales: tuple = (0.5, 1.0, 2.0)
    use_terrain: bool = True
    use_temporal: bool = True
    use_multiscale: bool = True
    prompt_strategy: str = "temporal"
    seed: int = 0

    def __post_init__(self):
        if self.prompt_strategy not in prompts.STRATEGIES:
            raise ConfigError(
                f"unknown prompt strategy {self.prompt_strategy!r}; "
                f"choose one of {prompts.STRATEGIES}"
            )
        if self.k < 1:
            raise ConfigError(f"prompt count must be >= 1, got {self.k}")
        if self.use_multiscale:
            ScaleSet(tuple(self.scales))  # validates the native factor

    @property
    def encoder_config(self):
        return EncoderConfig(
            patch_size=self.patch_size, depth=self.depth, d=self.d,
            heads=self.heads, mlp_ratio=self.mlp_ratio,
            pos_grid=self.pos_grid, seed=self.seed,
        )

    @property
    def effective_prompt_strategy(self):
        # removing the temporal module falls back to free learned prompts
        if not self.use_temporal and self.prompt_strategy == "temporal":
            return "learned"
        return self.prompt_strategy

    @property
    def scale_set(self):
        return ScaleSet(tuple(self.scales)) if self.use_multiscale else ScaleSet((1.0,))

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["scales"] = list(self.scales)
        return out

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "scales" in known:
            known["scales"] = tuple(known["scales"])
        return cls(**known)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict  # name -> Tensor; frozen entries have requires_grad=False
    unfrozen: bool = False  # test-only hook: train the encoder too

    def trainable(self):
        return {
            k: v
            for k, v in self.params.items()
            if v.requires_grad or (self.unfrozen and k.startswith("frozen/"))
        }

    def group(self, prefix):
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def arrays(self):
        return {k: v.numpy() for k, v in self.params.items()}

    def frozen_arrays(self):
        return {k: v.numpy() for k, v in self.params.items() if k.startswith("frozen/")}

    def unfreeze_for_test(self):
        """Negative-control hook: lets the optimizer touch frozen weights."""
        self.unfrozen = True
        for k, v in self.params.items():
            if k.startswith("frozen/"):
                v.requires_grad = True


def trainable_rng(seed):
    return np.random.default_rng([seed, 7])


def build_model(cfg):
    """Construct a ModelState with seeded frozen + trainable parameters."""
    raw = dict(init_encoder_params(cfg.encoder_config))
    rng = trainable_rng(cfg.seed)
    # draw module parameters in a fixed order so ablated variants share
    # the weights of the modules they keep
    ta = adapter.init_adapter_params(rng, cfg.patch_size, cfg.d)
    tp = prompts.init_prompt_params(rng, cfg.d, cfg.k)
    learned = prompts.init_learned_prompts(rng, cfg.d, cfg.k)
    ms = fusion.init_fusion_params(rng, cfg.d, factors=tuple(cfg.scales))
    dec = decoder.init_decoder_params(rng, cfg.d, cfg.num_classes)

    if cfg.use_terrain:
        raw.update(ta)
    strategy = cfg.effective_prompt_strategy
    if strategy == "temporal":
        raw.update(tp)
    elif strategy == "learned":
        raw.update(learned)
    if cfg.use_multiscale:
        raw.update(ms)
    raw.update(dec)

    params = {
        name: Tensor(arr, requires_grad=not name.startswith("frozen/"))
        for name, arr in raw.items()
    }
    return ModelState(config=cfg, params=params)


def state_from_arrays(cfg, arrays):
    """Rebuild a ModelState from checkpoint arrays (shape-checked)."""
    ref = build_model(cfg)
    if set(arrays) != set(ref.params):
        missing = set(ref.params) - set(arrays)
        extra = set(arrays) - set(ref.params)
        raise ConfigError(
            f"checkpoint does not match config: missing {sorted(missing)[:4]}, "
            f"unexpected {sorted(extra)[:4]}"
        )
    for name, arr in arrays.items():
        if tuple(arr.shape) != ref.params[name].shape:
            raise ConfigError(
                f"checkpoint entry {name} has shape {tuple(arr.shape)}, "
                f"expected {ref.params[name].shape}"
            )
        ref.params[name].data = np.ascontiguousarray(arr, dtype=np.float32)
    return ref


# ---------------------------------------------------------------------
# frozen-feature cache
# ---------------------------------------------------------------------

@dataclass
class SampleFeatures:
    """Frozen-encoder outputs for one sample: constants during training."""

    scale_tokens: dict  # factor -> token array
    frame_tokens: list  # token arrays, oldest first (truncated at use time)

    @property
    def native_tokens(self):
        return self.scale_tokens[1.0]


def precompute_features(state, sample, scale_factors=None, temporal_window=None):
    """Run the frozen encoder over every scale and frame of a sample.

    Training re-uses these arrays across epochs (and across ablation
    variants sharing the seed), since no gradient ever reaches the
    encoder. ``scale_factors``/``temporal_window`` may be widened beyond
    the state's own config to build a cache usable by several variants.
    """
    cfg = state.config
    enc_np = state.frozen_arrays()
    enc_cfg = cfg.encoder_config
    img = np.asarray(sample.image, dtype=np.float32)
    h, w = img.shape[1:]
    factors = tuple(scale_factors) if scale_factors is not None else cfg.scale_set.factors
    if 1.0 not in factors:
        factors = factors + (1.0,)
    scale_tokens = {}
    for factor in factors:
        sh, sw = round(h * factor), round(w * factor)
        scaled = img if (sh, sw) == (h, w) else _bilinear_np(img, (sh, sw))
        scale_tokens[factor] = encode(scaled, enc_np, enc_cfg).tokens.numpy()
    if temporal_window is None:
        temporal_window = (
            cfg.temporal_window if cfg.effective_prompt_strategy == "temporal" else 0
        )
    frame_tokens = [
        encode(frame, enc_np, enc_cfg).tokens.numpy()
        for frame in sample.frames[len(sample.frames) - temporal_window :]
    ]
    return SampleFeatures(scale_tokens=scale_tokens, frame_tokens=frame_tokens)


# ---------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------

def _grid_for(tokens, h, w, patch):
    return FeatureGrid(tokens=Tensor(tokens), grid=(h // patch, w // patch))


def forward(state, sample, features=None, timings=None, collect=None):
    """Full forward pass for one sample; returns a SegmentationMap.

    ``features`` is an optional :class:`SampleFeatures` cache; without it
    the frozen encoder runs on the fly. ``timings`` (dict) accumulates
    per-module wall seconds; ``collect`` (dict) stashes intermediate
    activations for visualization.
    """
    cfg = state.config
    if features is None:
        features = precompute_features(state, sample)
    img = np.asarray(sample.image, dtype=np.float32)
    h, w = img.shape[1:]
    scale_set = cfg.scale_set

    def tick():
        return time.perf_counter() if timings is not None else 0.0

    def tock(name, t0):
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0

    t0 = tick()
    dem_norm = adapter.normalize_dem(sample.dem) if cfg.use_terrain else None
    grids = fusion.multi_scale_encode(
        img, dem_norm, scale_set, None, cfg.encoder_config,
        adapter_params=state.params if cfg.use_terrain else None,
        cached_tokens=[features.scale_tokens[f] for f in scale_set.factors],
    )
    tock("ta_adapter", t0)

    t0 = tick()
    if cfg.use_multiscale:
        f_ms = fusion.cross_scale_fuse(grids, scale_set, state.params)
    else:
        f_ms = grids[scale_set.native_index]
    tock("ms_fusion", t0)

    t0 = tick()
    strategy = cfg.effective_prompt_strategy
    if strategy == "temporal":
        used = features.frame_tokens[len(features.frame_tokens) - cfg.temporal_window :]
        frame_grids = [_grid_for(toks, h, w, cfg.patch_size) for toks in used]
        f_temp = prompts.temporal_encode(frame_grids, state.params)
        prompt_set = prompts.synthesize_prompts(f_temp, cfg.k, state.params)
    elif strategy == "learned":
        prompt_set = prompts.learned_prompts(state.params)
    elif strategy == "point":
        native = _grid_for(features.native_tokens, h, w, cfg.patch_size)
        coords = prompts.point_prompt_coords(cfg.k, h, w, cfg.seed)
        prompt_set = prompts.point_prompts(native, coords, cfg.patch_size)
    else:  # box
        native = _grid_for(features.native_tokens, h, w, cfg.patch_size)
        prompt_set = prompts.box_prompts(native, cfg.k, cfg.patch_size, h, w)
    tock("tp_prompt", t0)

    t0 = tick()
    seg = decoder.decode(f_ms, prompt_set, state.params, (h, w))
    tock("decoder", t0)

    if collect is not None:
        collect["fused_tokens"] = f_ms.tokens.numpy()
        collect["grid"] = f_ms.grid
        collect["prompts"] = prompt_set.numpy()
        if cfg.use_terrain:
            native_img = _grid_for(features.native_tokens, h, w, cfg.patch_size)
            f_dem = adapter.encode_dem(
                adapter.normalize_dem(sample.dem), state.params, cfg.patch_size,
                expected_grid=native_img.grid,
            )
            collect["gate"] = adapter.gate_values(f_dem, native_img, state.params)
    return seg
