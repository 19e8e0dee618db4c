"""Terrain adapter: elevation CNN geometry and the convex gate."""

import numpy as np
import pytest

from tasam import adapter
from tasam.encoder import FeatureGrid
from tasam.errors import ConfigError, DimensionError
from tasam.tensor import Tensor

RNG = np.random.default_rng(11)
D = 32


def make_params(patch=8, d=D, seed=0):
    rng = np.random.default_rng(seed)
    return {k: Tensor(v, requires_grad=True)
            for k, v in adapter.init_adapter_params(rng, patch, d).items()}


def grid_of(tokens):
    n = tokens.shape[0]
    side = int(np.sqrt(n))
    return FeatureGrid(tokens=Tensor(tokens), grid=(side, side))


def test_channel_ramp_ends_at_d():
    assert adapter.dem_conv_channels(8, 64) == [4, 8, 16, 64]
    assert adapter.dem_conv_channels(4, 32) == [4, 8, 32]
    assert adapter.dem_conv_channels(2, 16) == [4, 16]


def test_dem_encoding_matches_image_grid():
    params = make_params()
    dem = RNG.normal(0, 1, (1, 32, 32)).astype(np.float32)
    fg = adapter.encode_dem(adapter.normalize_dem(dem), params, 8)
    assert fg.grid == (4, 4)
    assert fg.tokens.shape == (16, D)


def test_grid_mismatch_raises():
    params = make_params()
    dem = RNG.normal(0, 1, (1, 32, 32)).astype(np.float32)
    with pytest.raises(ConfigError, match="grid"):
        adapter.encode_dem(dem, params, 8, expected_grid=(8, 8))


def test_normalize_dem_is_scale_and_shift_invariant():
    dem = RNG.normal(0, 1, (1, 16, 16)).astype(np.float32)
    a = adapter.normalize_dem(dem)
    b = adapter.normalize_dem(dem * 370.0 + 1200.0)
    np.testing.assert_allclose(a, b, atol=1e-4)
    assert abs(a.mean()) < 1e-6
    assert abs(a.std() - 1) < 1e-5


def test_gate_output_stays_in_elementwise_envelope():
    params = make_params()
    for trial in range(50):
        fe = RNG.normal(0, 2, (16, D)).astype(np.float32)
        fi = RNG.normal(0, 2, (16, D)).astype(np.float32)
        out = adapter.gated_fuse(grid_of(fe), grid_of(fi), params).tokens.numpy()
        lo, hi = np.minimum(fe, fi), np.maximum(fe, fi)
        assert (out >= lo - 1e-6).all()
        assert (out <= hi + 1e-6).all()


def test_gate_saturation_recovers_either_input():
    params = make_params()
    fe = RNG.normal(0, 2, (16, D)).astype(np.float32)
    fi = RNG.normal(0, 2, (16, D)).astype(np.float32)
    params["ta_adapter/gate/w"] = Tensor(np.zeros((2 * D, D), dtype=np.float32))
    params["ta_adapter/gate/b"] = Tensor(np.full(D, -50.0, dtype=np.float32))
    out = adapter.gated_fuse(grid_of(fe), grid_of(fi), params).tokens.numpy()
    np.testing.assert_allclose(out, fi, atol=1e-6)
    params["ta_adapter/gate/b"] = Tensor(np.full(D, 50.0, dtype=np.float32))
    out = adapter.gated_fuse(grid_of(fe), grid_of(fi), params).tokens.numpy()
    np.testing.assert_allclose(out, fe, atol=1e-6)


def test_gated_fuse_rejects_mismatched_grids():
    params = make_params()
    fe = grid_of(RNG.normal(0, 1, (16, D)).astype(np.float32))
    fi = grid_of(RNG.normal(0, 1, (4, D)).astype(np.float32))
    with pytest.raises(DimensionError):
        adapter.gated_fuse(fe, fi, params)


def test_gate_values_match_tape_forward():
    params = make_params()
    fe = grid_of(RNG.normal(0, 1, (16, D)).astype(np.float32))
    fi = grid_of(RNG.normal(0, 1, (16, D)).astype(np.float32))
    g = adapter.gate_values(fe, fi, params)
    assert g.shape == (16, D)
    assert (g > 0).all() and (g < 1).all()
    # fused output implied by g must match the tape path
    fused = fi.tokens.numpy() + g * (fe.tokens.numpy() - fi.tokens.numpy())
    out = adapter.gated_fuse(fe, fi, params).tokens.numpy()
    np.testing.assert_allclose(out, fused, atol=1e-5)


def test_encode_dem_rejects_bad_shape():
    params = make_params()
    with pytest.raises(DimensionError):
        adapter.encode_dem(np.zeros((3, 16, 16), dtype=np.float32), params, 8)
