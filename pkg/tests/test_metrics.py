"""Confusion-matrix metrics and the efficiency accounting."""

import numpy as np
import pytest

from tasam.errors import DataError, MetricError
from tasam.metrics import (
    ConfusionMatrix,
    all_metrics,
    count_flops,
    count_params,
    f1,
    miou,
    per_class_iou,
    precision,
    recall,
)
from tasam.model import ModelConfig, build_model

RNG = np.random.default_rng(51)


def random_cm(rng, c=4):
    cm = ConfusionMatrix(c)
    cm.counts = rng.integers(0, 200, (c, c)).astype(np.int64)
    return cm


def direct_metrics(counts):
    tp = np.diag(counts).astype(float)
    fn = counts.sum(1) - tp
    fp = counts.sum(0) - tp
    present = (tp + fn + fp) > 0

    def safe(n, d):
        return np.where(d > 0, n / np.where(d > 0, d, 1), 0.0)

    iou = safe(tp, tp + fp + fn)
    p = safe(tp, tp + fp)
    r = safe(tp, tp + fn)
    f = safe(2 * p * r, p + r)
    return (iou[present].mean(), p[present].mean(), r[present].mean(),
            f[present].mean())


def test_metrics_match_direct_formulas_on_random_matrices():
    rng = np.random.default_rng(7)
    for _ in range(100):
        cm = random_cm(rng)
        want = direct_metrics(cm.counts)
        got = (miou(cm), precision(cm), recall(cm), f1(cm))
        np.testing.assert_allclose(got, want, atol=1e-9)


def test_known_matrix_oracle():
    cm = ConfusionMatrix(2)
    cm.counts = np.array([[50, 50], [50, 50]], dtype=np.int64)
    assert abs(miou(cm) - 1 / 3) < 1e-12
    assert abs(precision(cm) - 0.5) < 1e-12
    assert abs(recall(cm) - 0.5) < 1e-12
    assert abs(f1(cm) - 0.5) < 1e-12


def test_perfect_prediction_scores_one():
    cm = ConfusionMatrix(3).accumulate([0, 1, 2, 2], [0, 1, 2, 2])
    assert miou(cm) == 1.0
    assert f1(cm) == 1.0


def test_absent_classes_are_excluded_from_the_mean():
    cm = ConfusionMatrix(4).accumulate([0, 0], [0, 0])
    iou, present = per_class_iou(cm)
    assert present.tolist() == [True, False, False, False]
    assert miou(cm) == 1.0


def test_accumulate_matches_manual_count():
    pred = RNG.integers(0, 4, 500)
    truth = RNG.integers(0, 4, 500)
    cm = ConfusionMatrix(4).accumulate(pred, truth)
    manual = np.zeros((4, 4), dtype=np.int64)
    for p, t in zip(pred, truth):
        manual[t, p] += 1
    np.testing.assert_array_equal(cm.counts, manual)


def test_accumulation_order_does_not_matter():
    pred = RNG.integers(0, 4, 400)
    truth = RNG.integers(0, 4, 400)
    a = ConfusionMatrix(4).accumulate(pred, truth)
    b = ConfusionMatrix(4)
    for lo in range(0, 400, 100):
        b.merge(ConfusionMatrix(4).accumulate(pred[lo:lo + 100], truth[lo:lo + 100]))
    np.testing.assert_array_equal(a.counts, b.counts)
    assert all_metrics(a) == all_metrics(b)


def test_empty_matrix_raises():
    with pytest.raises(MetricError):
        miou(ConfusionMatrix(4))


def test_accumulate_validates_inputs():
    cm = ConfusionMatrix(4)
    with pytest.raises(DataError, match="pixels"):
        cm.accumulate([0, 1], [0])
    with pytest.raises(DataError, match="class ids"):
        cm.accumulate([0, 4], [0, 0])


def test_param_counts_cover_every_module_group():
    state = build_model(ModelConfig(seed=0))
    rep = count_params(state)
    assert set(rep.params) == {"frozen", "ta_adapter", "tp_prompt",
                               "ms_fusion", "decoder"}
    assert rep.total_params == sum(v.numpy().size for v in state.params.values())
    assert rep.trainable_params == rep.total_params - rep.params["frozen"]


def test_trainable_fraction_stays_small():
    rep = count_params(build_model(ModelConfig(seed=0)))
    assert rep.trainable_params < 0.15 * rep.params["frozen"]


def test_flops_respect_module_toggles():
    base = count_flops(ModelConfig(seed=0))
    assert all(v > 0 for v in base.values())
    no_terrain = count_flops(ModelConfig(seed=0, use_terrain=False))
    assert no_terrain["ta_adapter"] == 0
    learned = count_flops(ModelConfig(seed=0, prompt_strategy="learned"))
    assert learned["tp_prompt"] == 0
    single = count_flops(ModelConfig(seed=0, use_multiscale=False))
    assert single["ms_fusion"] == 0
    # dropping the extra scales also removes frozen encoder passes
    assert single["frozen"] < base["frozen"]


def test_flops_grow_with_image_area():
    small = count_flops(ModelConfig(seed=0), image_size=(64, 64))
    big = count_flops(ModelConfig(seed=0), image_size=(128, 128))
    assert big["frozen"] > small["frozen"]
    assert big["decoder"] > small["decoder"]
