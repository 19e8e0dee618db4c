"""Terrain- and time-aware segmentation adapter stack on a frozen backbone.

A small, dependency-light research codebase: a reverse-mode autodiff
tensor core, a seeded frozen patch-transformer encoder, trainable
terrain/temporal/multi-scale adapter modules with a mask decoder, a
causal synthetic geodata generator, and training/evaluation harnesses.
"""

from .data import GenConfig, Sample, generate, load_dataset, save_dataset
from .decoder import SegmentationMap, segmentation_loss
from .encoder import EncoderConfig, FeatureGrid, encode, freeze_check
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DatasetError,
    DimensionError,
    FormatError,
    MetricError,
    NumericError,
    ReproducibilityError,
    TasamError,
)
from .gradcheck import GradCheckReport, gradcheck
from .metrics import (
    ConfusionMatrix,
    EfficiencyReport,
    all_metrics,
    count_flops,
    count_params,
    f1,
    miou,
    per_class_iou,
    precision,
    recall,
    time_model,
)
from .model import (
    ModelConfig,
    ModelState,
    SampleFeatures,
    build_model,
    forward,
    precompute_features,
    state_from_arrays,
)
from .tensor import Tape, Tensor
from .tensorio import load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .train import (
    AdamW,
    RunRecord,
    TrainConfig,
    evaluate,
    run_ablation,
    sweep_prompts,
    sweep_temporal,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "ConfigError", "ConfusionMatrix", "ContractError", "DataError",
    "DatasetError", "DimensionError", "EfficiencyReport", "EncoderConfig",
    "FeatureGrid", "FormatError", "GenConfig", "GradCheckReport",
    "MetricError", "ModelConfig", "ModelState", "NumericError",
    "ReproducibilityError", "RunRecord", "Sample", "SampleFeatures",
    "SegmentationMap", "Tape", "TasamError", "Tensor", "TrainConfig",
    "all_metrics", "build_model", "count_flops", "count_params", "encode",
    "evaluate", "f1", "forward", "freeze_check", "generate", "gradcheck",
    "load_checkpoint", "load_dataset", "load_tensor", "miou",
    "per_class_iou", "precision", "precompute_features", "recall",
    "run_ablation", "save_checkpoint", "save_dataset", "save_tensor",
    "segmentation_loss", "state_from_arrays", "sweep_prompts",
    "sweep_temporal", "time_model", "train",
]
