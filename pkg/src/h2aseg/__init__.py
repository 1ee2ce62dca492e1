"""Dual-branch PET/CT tumor segmentation with hierarchical cross-modal attention."""

from .attention import BdsaDirection, BdsaPair, attend, attention_weights
from .backbone import H2ASeg, PredictionPyramid, build_model, count_parameters
from .config import (
    ModelConfig,
    TENSOR_LAYOUT,
    TensorLayout,
    TrainConfig,
    ValidationReport,
    effective_window,
    level_shape,
    validate_config,
)
from .errors import CheckpointMismatchError, ConfigError, ContractViolation, NumericError
from .loss import LossReport, bce_loss, deep_supervision_weights, dice_loss, total_loss
from .mcsa import McsaBlock, WindowPool, window_partition, window_reconstruct, window_upsample
from .metrics import (
    CaseMetrics,
    MetricSummary,
    aggregate,
    binarize,
    dice_precision_recall,
    evaluate_case,
    hd95,
)
from .phantom import (
    PhantomConfig,
    VolumePair,
    build_split,
    generate_case,
    load_case,
    pet_threshold_segment,
    save_case,
    unimodal_threshold,
)
from .tamw import (
    TamwBlock,
    assemble_fused_feature,
    channel_partition,
    channel_weights,
    emphasis_stats,
    split_fore_back,
)

__version__ = "0.1.0"

__all__ = [
    "BdsaDirection",
    "BdsaPair",
    "CaseMetrics",
    "CheckpointMismatchError",
    "ConfigError",
    "ContractViolation",
    "H2ASeg",
    "LossReport",
    "McsaBlock",
    "MetricSummary",
    "ModelConfig",
    "NumericError",
    "PhantomConfig",
    "PredictionPyramid",
    "TENSOR_LAYOUT",
    "TamwBlock",
    "TensorLayout",
    "TrainConfig",
    "ValidationReport",
    "VolumePair",
    "WindowPool",
    "aggregate",
    "assemble_fused_feature",
    "attend",
    "attention_weights",
    "bce_loss",
    "binarize",
    "build_model",
    "build_split",
    "channel_partition",
    "channel_weights",
    "count_parameters",
    "deep_supervision_weights",
    "dice_loss",
    "dice_precision_recall",
    "effective_window",
    "emphasis_stats",
    "evaluate_case",
    "generate_case",
    "hd95",
    "level_shape",
    "load_case",
    "pet_threshold_segment",
    "save_case",
    "split_fore_back",
    "total_loss",
    "unimodal_threshold",
    "validate_config",
    "window_partition",
    "window_reconstruct",
    "window_upsample",
]
