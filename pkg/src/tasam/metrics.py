"""Segmentation metrics and efficiency accounting.

Confusion-matrix rows are ground truth, columns are prediction.
mIoU/F1/Precision/Recall are macro-averaged over the classes present in
the union of truth and prediction; classes absent from both are excluded
from the mean. FLOPs are analytic multiply-accumulate counts times two.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adapter import dem_conv_channels
from .decoder import DEPTH as DECODER_DEPTH
from .errors import DataError, MetricError
from .prompts import ATTN_DH

MODULE_GROUPS = ("frozen", "ta_adapter", "tp_prompt", "ms_fusion", "decoder")


class ConfusionMatrix:
    def __init__(self, num_classes):
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    def accumulate(self, pred, truth):
        pred = np.asarray(pred).reshape(-1)
        truth = np.asarray(truth).reshape(-1)
        if pred.shape != truth.shape:
            raise DataError(
                f"prediction has {pred.shape[0]} pixels, truth has {truth.shape[0]}"
            )
        c = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= c or truth.min() < 0 or truth.max() >= c):
            raise DataError(f"class ids must lie in [0, {c})")
        idx = truth.astype(np.int64) * c + pred.astype(np.int64)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self

    def _per_class(self):
        if self.counts.sum() == 0:
            raise MetricError("metrics are undefined on an empty confusion matrix")
        tp = np.diag(self.counts).astype(np.float64)
        fn = self.counts.sum(axis=1) - tp
        fp = self.counts.sum(axis=0) - tp
        present = (tp + fn + fp) > 0
        return tp, fp, fn, present


def _safe_div(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def per_class_iou(cm):
    tp, fp, fn, present = cm._per_class()
    iou = _safe_div(tp, tp + fp + fn)
    return iou, present


def miou(cm):
    iou, present = per_class_iou(cm)
    return float(iou[present].mean())


def precision(cm):
    tp, fp, fn, present = cm._per_class()
    return float(_safe_div(tp, tp + fp)[present].mean())


def recall(cm):
    tp, fp, fn, present = cm._per_class()
    return float(_safe_div(tp, tp + fn)[present].mean())


def f1(cm):
    tp, fp, fn, present = cm._per_class()
    p = _safe_div(tp, tp + fp)
    r = _safe_div(tp, tp + fn)
    f = _safe_div(2 * p * r, p + r)
    return float(f[present].mean())


def all_metrics(cm):
    return {"miou": miou(cm), "f1": f1(cm), "precision": precision(cm), "recall": recall(cm)}


# ---------------------------------------------------------------------
# efficiency accounting
# ---------------------------------------------------------------------

@dataclass
class EfficiencyReport:
    params: dict = field(default_factory=dict)  # group -> count
    flops: dict = field(default_factory=dict)  # group -> flops per image
    ms_per_image: dict = field(default_factory=dict)  # group -> milliseconds

    @property
    def total_params(self):
        return sum(self.params.values())

    @property
    def trainable_params(self):
        return sum(v for k, v in self.params.items() if k != "frozen")

    @property
    def total_flops(self):
        return sum(self.flops.values())

    @property
    def total_ms(self):
        return sum(self.ms_per_image.values())


def count_params(state):
    """Exact per-group parameter counts of a constructed model."""
    report = EfficiencyReport()
    for name, tensor in state.params.items():
        group = name.split("/")[0]
        report.params[group] = report.params.get(group, 0) + tensor.numpy().size
    return report


def _attention_flops(nq, nk, d, dh):
    proj = 2 * nq * d * dh + 2 * 2 * nk * d * dh + 2 * nq * dh * d
    scores = 2 * nq * nk * dh
    mix = 2 * nq * nk * dh
    return proj + scores + mix


def _encoder_flops(n_tokens, cfg):
    d, ratio = cfg.d, cfg.mlp_ratio
    # patch-mean pooling then a 3->d linear embedding
    patch = n_tokens * 3 * cfg.patch_size**2 + 2 * n_tokens * 3 * d
    per_block = (
        4 * 2 * n_tokens * d * d  # q,k,v,o projections
        + 2 * 2 * n_tokens * n_tokens * d  # scores + value mix
        + 2 * 2 * n_tokens * d * (ratio * d)  # mlp
    )
    return patch + cfg.depth * per_block


def count_flops(config, image_size=(64, 64)):
    """Analytic FLOPs per image for every module, given the config."""
    h, w = image_size
    cfg = config
    patch = cfg.patch_size
    scale_set = cfg.scale_set
    sizes = scale_set.scaled_size(h, w, patch)
    n_native = (h // patch) * (w // patch)
    d = cfg.d

    flops = {g: 0 for g in MODULE_GROUPS}
    # frozen encoder: once per scale, once per temporal frame
    for sh, sw in sizes:
        flops["frozen"] += _encoder_flops((sh // patch) * (sw // patch), cfg.encoder_config)
    if cfg.effective_prompt_strategy == "temporal":
        flops["frozen"] += cfg.temporal_window * _encoder_flops(n_native, cfg.encoder_config)

    if cfg.use_terrain:
        chans = dem_conv_channels(patch, d)
        for sh, sw in sizes:
            c_in, cur_h, cur_w = 1, sh, sw
            for i, c_out in enumerate(chans):
                stride = 1 if i == len(chans) - 1 else 2
                cur_h, cur_w = cur_h // stride, cur_w // stride
                flops["ta_adapter"] += 2 * c_in * c_out * 9 * cur_h * cur_w
                c_in = c_out
            n_s = (sh // patch) * (sw // patch)
            flops["ta_adapter"] += 2 * n_s * (2 * d) * d  # gate projection

    if cfg.effective_prompt_strategy == "temporal":
        seq = cfg.temporal_window * n_native
        flops["tp_prompt"] += _attention_flops(seq, seq, d, ATTN_DH)
        flops["tp_prompt"] += cfg.k * (2 * d * (2 * d) + 2 * (2 * d) * d)

    if cfg.use_multiscale:
        from .fusion import _fine_ratio

        # non-native grids are resampled onto the native grid first
        nk = n_native * len(sizes)
        flops["ms_fusion"] += _attention_flops(n_native, nk, d, ATTN_DH)
        for f in scale_set.factors:
            if f == 1.0:
                continue
            r = _fine_ratio(f)
            lat_in = d * r * r if r else d
            flops["ms_fusion"] += 2 * n_native * lat_in * d

    seq = n_native + cfg.k
    per_block = _attention_flops(seq, seq, d, d) + 2 * 2 * seq * d * (2 * d)
    flops["decoder"] += DECODER_DEPTH * per_block + 2 * n_native * d * cfg.num_classes
    return {g: int(v) for g, v in flops.items()}


def time_model(state, sample, features, runs=20, warmup=3, chunk=5):
    """Per-module wall-clock per image: median of chunk means over a
    monotonic clock, after warmup."""
    from .model import forward

    for _ in range(warmup):
        forward(state, sample, features)
    chunk_means = []
    for start in range(0, runs, chunk):
        n = min(chunk, runs - start)
        acc = {}
        for _ in range(n):
            timings = {}
            t0 = time.perf_counter()
            forward(state, sample, features, timings=timings)
            timings["total"] = time.perf_counter() - t0
            for k, v in timings.items():
                acc[k] = acc.get(k, 0.0) + v
        chunk_means.append({k: v / n for k, v in acc.items()})
    keys = chunk_means[0].keys()
    return {k: float(np.median([m[k] for m in chunk_means]) * 1000.0) for k in keys}
