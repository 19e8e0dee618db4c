"""Mask decoder: prompt conditioning, logit geometry, loss oracle."""

import numpy as np
import pytest

from tasam import decoder
from tasam import tensor as T
from tasam.decoder import decode, init_decoder_params, segmentation_loss
from tasam.encoder import FeatureGrid
from tasam.errors import DataError, DimensionError
from tasam.tensor import Tensor

RNG = np.random.default_rng(41)
D = 32
C = 4


def make_params(seed=0):
    rng = np.random.default_rng(seed)
    return {k: Tensor(v, requires_grad=True)
            for k, v in init_decoder_params(rng, D, C).items()}


def tokens_grid(n_side=4):
    toks = RNG.normal(0, 1, (n_side * n_side, D)).astype(np.float32)
    return FeatureGrid(tokens=Tensor(toks), grid=(n_side, n_side))


def test_decode_shapes():
    params = make_params()
    prompts = Tensor(RNG.normal(0, 1, (3, D)).astype(np.float32))
    seg = decode(tokens_grid(), prompts, params, (32, 32))
    assert seg.logits.shape == (C, 32, 32)
    assert seg.num_classes == C
    assert seg.labels.shape == (32, 32)
    assert seg.labels.dtype == np.uint8


def test_labels_are_argmax_of_logits():
    params = make_params()
    seg = decode(tokens_grid(), None, params, (16, 16))
    np.testing.assert_array_equal(seg.labels,
                                  np.argmax(seg.logits.numpy(), axis=0))


def test_prompts_condition_the_output():
    params = make_params()
    fg = tokens_grid()
    a = decode(fg, Tensor(RNG.normal(0, 1, (2, D)).astype(np.float32)), params, (16, 16))
    b = decode(fg, Tensor(RNG.normal(0, 1, (2, D)).astype(np.float32)), params, (16, 16))
    assert np.abs(a.logits.numpy() - b.logits.numpy()).max() > 1e-5


def test_prompt_outputs_are_discarded():
    # an extra prompt changes logits only through attention, never by
    # leaking prompt rows into the token grid: logit count stays fixed
    params = make_params()
    fg = tokens_grid()
    for k in (0, 1, 5):
        prompts = Tensor(RNG.normal(0, 1, (k, D)).astype(np.float32)) if k else None
        seg = decode(fg, prompts, params, (8, 8))
        assert seg.logits.shape == (C, 8, 8)


def test_decode_rejects_prompt_width_mismatch():
    params = make_params()
    bad = Tensor(RNG.normal(0, 1, (2, D + 1)).astype(np.float32))
    with pytest.raises(DimensionError, match="prompt width"):
        decode(tokens_grid(), bad, params, (16, 16))


def test_output_matching_grid_skips_resampling():
    params = make_params()
    fg = tokens_grid(4)
    seg = decode(fg, None, params, (4, 4))
    assert seg.logits.shape == (C, 4, 4)


def test_loss_of_uniform_logits_is_log_c():
    logits = Tensor(np.zeros((C, 8, 8), dtype=np.float32))
    labels = RNG.integers(0, C, (8, 8))
    loss = segmentation_loss(decoder.SegmentationMap(logits=logits), labels)
    assert abs(loss.item() - np.log(C)) < 1e-6


def test_loss_matches_manual_cross_entropy():
    raw = RNG.normal(0, 1, (C, 4, 4)).astype(np.float32)
    labels = RNG.integers(0, C, (4, 4))
    loss = segmentation_loss(decoder.SegmentationMap(logits=Tensor(raw)), labels)
    flat = raw.reshape(C, -1).T.astype(np.float64)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    want = -logp[np.arange(16), labels.reshape(-1)].mean()
    assert abs(loss.item() - want) < 1e-5


def test_loss_rejects_bad_labels():
    seg = decoder.SegmentationMap(logits=Tensor(np.zeros((C, 4, 4), dtype=np.float32)))
    with pytest.raises(DataError, match="shape"):
        segmentation_loss(seg, np.zeros((5, 4), dtype=np.int64))
    with pytest.raises(DataError, match="label ids"):
        segmentation_loss(seg, np.full((4, 4), C, dtype=np.int64))


def test_loss_is_differentiable_end_to_end():
    params = make_params()
    fg = tokens_grid()
    labels = RNG.integers(0, C, (16, 16))
    with T.Tape() as tape:
        seg = decode(fg, None, params, (16, 16))
        loss = segmentation_loss(seg, labels)
        tape.backward(loss)
    g = params["decoder/head/w"].grad
    assert g is not None and np.abs(g).max() > 0
