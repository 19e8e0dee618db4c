"""Frozen-backbone training loop, ablation runner, and sweep runners.

Only the adapter/prompt/fusion/decoder parameter groups are optimized
(decoupled-weight-decay Adam); the encoder group never receives updates,
and every run ends with a bit-exact freeze verification. Runs are
deterministic given their seed: shuffling, initialization, and batching
all derive from it.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .decoder import segmentation_loss
from .encoder import freeze_check
from .errors import ConfigError, NumericError
from .metrics import ConfusionMatrix, all_metrics, count_flops, count_params
from .model import ModelConfig, build_model, forward, precompute_features
from .tensor import Tape
from .tensorio import save_checkpoint

ABLATION_VARIANTS = (
    ("baseline", dict(use_terrain=False, use_temporal=False, use_multiscale=False)),
    ("wo_terrain", dict(use_terrain=False)),
    ("wo_temporal", dict(use_temporal=False)),
    ("wo_multiscale", dict(use_multiscale=False)),
    ("full", dict()),
)

PROMPT_SWEEP_KS = (1, 2, 4, 6, 8)
TEMPORAL_SWEEP_TS = (1, 2, 3, 4, 5)

CSV_COLUMNS = ("variant", "miou", "f1", "precision", "recall", "params", "flops", "ms")


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    lr: float = 1.5e-3
    batch_size: int = 8
    epochs: int = 30
    weight_decay: float = 0.01
    seed: int = 0
    # module toggles and prompt settings
    use_terrain: bool = True
    use_temporal: bool = True
    use_multiscale: bool = True
    prompt_strategy: str = "temporal"
    k: int = 4
    temporal_window: int = 3
    scales: tuple = (0.5, 1.0, 2.0)
    # architecture (desk-scale defaults)
    patch_size: int = 8
    depth: int = 12
    d: int = 64
    heads: int = 4
    mlp_ratio: int = 8
    pos_grid: int = 32
    num_classes: int = 4
    # test-only negative control for the freeze invariant
    unfreeze_encoder: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")

    def model_config(self):
        return ModelConfig(
            patch_size=self.patch_size, depth=self.depth, d=self.d,
            heads=self.heads, mlp_ratio=self.mlp_ratio, pos_grid=self.pos_grid,
            num_classes=self.num_classes, k=self.k,
            temporal_window=self.temporal_window, scales=tuple(self.scales),
            use_terrain=self.use_terrain, use_temporal=self.use_temporal,
            use_multiscale=self.use_multiscale,
            prompt_strategy=self.prompt_strategy, seed=self.seed,
        )

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
class RunRecord:
    config: dict
    epoch_losses: list
    step_losses: list
    metrics: dict
    wall_time_s: float
    freeze_ok: bool
    variant: str = "full"
    checkpoint_path: str = ""
    per_class_iou: list = field(default_factory=list)
    param_counts: dict = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay over a name->Tensor dict."""

    def __init__(self, params, lr, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.wd:
                p.data -= (self.lr * self.wd) * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)


def compute_features(state, samples, scale_factors=None, temporal_window=None):
    """Frozen-encoder caches for a sample list (one pass, reusable)."""
    return [
        precompute_features(state, s, scale_factors=scale_factors,
                            temporal_window=temporal_window)
        for s in samples
    ]


def _first_bad_group(state):
    for name, p in state.trainable().items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            return name.split("/")[0]
    return "unknown"


def evaluate(state, samples, features=None):
    """Confusion matrix + macro metrics of a model over a sample list."""
    cm = ConfusionMatrix(state.config.num_classes)
    preds = []
    for i, sample in enumerate(samples):
        feats = features[i] if features is not None else None
        seg = forward(state, sample, feats)
        pred = seg.labels
        preds.append(pred)
        cm.accumulate(pred, sample.labels)
    return cm, all_metrics(cm), preds


def train(cfg, train_samples, eval_samples=None, train_features=None,
          eval_features=None, out_dir=None, variant="full", log=None):
    """Train a model from scratch; returns (RunRecord, ModelState)."""
    if not train_samples:
        raise ConfigError("training dataset is empty")
    t_start = time.perf_counter()
    state = build_model(cfg.model_config())
    if cfg.unfreeze_encoder:
        state.unfreeze_for_test()
    if train_features is None:
        train_features = compute_features(state, train_samples)
    opt = AdamW(state.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    step_losses = []
    epoch_losses = []
    n = len(train_samples)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 101, epoch]).permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                total = None
                for i in idx:
                    seg = forward(state, train_samples[i], train_features[i])
                    loss = segmentation_loss(seg, train_samples[i].labels)
                    total = loss if total is None else total + loss
                total = total * (1.0 / len(idx))
                loss_val = total.item()
                if not np.isfinite(loss_val):
                    raise NumericError(
                        f"non-finite loss at step {step}", step=step, group="loss"
                    )
                tape.backward(total)
            for name, p in state.trainable().items():
                if p.grad is not None and not np.isfinite(p.grad).all():
                    raise NumericError(
                        f"non-finite gradient at step {step} in group "
                        f"{name.split('/')[0]}",
                        step=step, group=name.split("/")[0],
                    )
            opt.step()
            step_losses.append(loss_val)
            epoch_loss += loss_val
            batches += 1
            step += 1
        epoch_losses.append(epoch_loss / batches)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {epoch_losses[-1]:.4f}")

    eval_set = eval_samples if eval_samples else train_samples
    if eval_samples is None:
        eval_features = train_features
    cm, final_metrics, _ = evaluate(state, eval_set, eval_features)
    from .metrics import per_class_iou

    iou, present = per_class_iou(cm)
    frozen_ok = freeze_check(state.params, cfg.model_config().encoder_config)
    pc = count_params(state)
    record = RunRecord(
        config=cfg.to_dict(),
        epoch_losses=epoch_losses,
        step_losses=step_losses,
        metrics=final_metrics,
        wall_time_s=time.perf_counter() - t_start,
        freeze_ok=frozen_ok,
        variant=variant,
        per_class_iou=[float(x) for x in iou],
        param_counts=dict(pc.params),
    )
    if out_dir is not None:
        save_run(record, state, out_dir)
    return record, state


def save_run(record, state, out_dir, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.tsmc"
    save_checkpoint(ckpt, state.arrays())
    record.checkpoint_path = str(ckpt)
    payload = {
        "config": record.config,
        "variant": record.variant,
        "epoch_losses": record.epoch_losses,
        "step_losses": record.step_losses,
        "metrics": record.metrics,
        "per_class_iou": record.per_class_iou,
        "param_counts": record.param_counts,
        "wall_time_s": record.wall_time_s,
        "freeze_ok": record.freeze_ok,
        "checkpoint": ckpt.name,
    }
    if extra:
        payload.update(extra)
    with open(out_dir / "run.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    write_metrics_csv(out_dir / "metrics.csv", [run_row(record)])
    return out_dir


def run_row(record, ms=""):
    cfg = TrainConfig.from_dict(record.config)
    flops = count_flops(cfg.model_config())
    return {
        "variant": record.variant,
        "miou": f"{record.metrics['miou']:.6f}",
        "f1": f"{record.metrics['f1']:.6f}",
        "precision": f"{record.metrics['precision']:.6f}",
        "recall": f"{record.metrics['recall']:.6f}",
        "params": str(sum(record.param_counts.values())),
        "flops": str(sum(flops.values())),
        "ms": str(ms),
    }


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(CSV_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------
# experiment runners
# ---------------------------------------------------------------------

def _shared_features(base_cfg, train_samples, eval_samples, max_window=None):
    """One frozen-feature cache per seed, wide enough for every variant."""
    full = replace(base_cfg, use_terrain=True, use_temporal=True,
                   use_multiscale=True, prompt_strategy="temporal")
    state = build_model(full.model_config())
    window = max_window if max_window is not None else max(
        base_cfg.temporal_window, len(train_samples[0].frames)
    )
    window = min(window, len(train_samples[0].frames))
    tf = compute_features(state, train_samples, scale_factors=full.scales,
                          temporal_window=window)
    ef = compute_features(state, eval_samples, scale_factors=full.scales,
                          temporal_window=window)
    return tf, ef


def run_ablation(base_cfg, train_samples, eval_samples, log=None):
    """Five rows: baseline, three single-module removals, full model."""
    tf, ef = _shared_features(base_cfg, train_samples, eval_samples)
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        cfg = replace(base_cfg, **overrides)
        if log:
            log(f"[ablate] {name} (seed {cfg.seed})")
        record, _ = train(cfg, train_samples, eval_samples,
                          train_features=tf, eval_features=ef, variant=name)
        rows.append(record)
        if log:
            log(f"[ablate] {name}: miou {record.metrics['miou']:.4f}")
    return rows


def sweep_prompts(base_cfg, train_samples, eval_samples, ks=PROMPT_SWEEP_KS, log=None):
    """One run per prompt count, temporal strategy, shared seed."""
    if base_cfg.prompt_strategy != "temporal" or not base_cfg.use_temporal:
        raise ConfigError("the prompt-count sweep requires the temporal strategy")
    tf, ef = _shared_features(base_cfg, train_samples, eval_samples)
    rows = []
    for k in ks:
        cfg = replace(base_cfg, k=int(k))
        if log:
            log(f"[sweep] k={k} (seed {cfg.seed})")
        record, _ = train(cfg, train_samples, eval_samples,
                          train_features=tf, eval_features=ef, variant=f"k={k}")
        rows.append(record)
        if log:
            log(f"[sweep] k={k}: miou {record.metrics['miou']:.4f}")
    return rows


def sweep_temporal(base_cfg, train_samples, eval_samples, ts=TEMPORAL_SWEEP_TS, log=None):
    """One run per temporal-window size; frames truncated to the newest T."""
    max_t = len(train_samples[0].frames)
    ts = tuple(int(t) for t in ts)
    if max(ts) > max_t:
        raise ConfigError(
            f"dataset has {max_t} frames, cannot sweep to T={max(ts)}"
        )
    tf, ef = _shared_features(base_cfg, train_samples, eval_samples, max_window=max(ts))
    rows = []
    for t in ts:
        cfg = replace(base_cfg, temporal_window=t, use_temporal=True,
                      prompt_strategy="temporal")
        if log:
            log(f"[sweep] T={t} (seed {cfg.seed})")
        record, _ = train(cfg, train_samples, eval_samples,
                          train_features=tf, eval_features=ef, variant=f"T={t}")
        rows.append(record)
        if log:
            log(f"[sweep] T={t}: miou {record.metrics['miou']:.4f}")
    return rows
