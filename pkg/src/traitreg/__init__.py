"""Trait regression from RGB and depth imagery with deformable CNNs.

The package is self-contained: a small float64 autodiff engine, the
neural network layers built on it (including deformable convolution with
learned sampling offsets), a paired RGB plus depth data pipeline, model
builders for the single/multi input and output architecture grid, the
normalized-error metric, a deterministic training harness, offset
visualization, and a CLI tying it all together.
"""

__version__ = "0.1.0"

from .autograd import Function, Tensor, no_grad
from .checkpoint import (
    apply_state,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_model,
)
from .data import (
    DEFAULT_CROP,
    DEPTH_RANGE_CM,
    PIXEL_SCALE_CM,
    TRAIT_NAMES,
    AugmentConfig,
    ChannelStats,
    Sample,
    SplitDataset,
    SplitSpec,
    TraitVector,
    augment_sample,
    compute_channel_stats,
    crop_image,
    load_dataset,
    load_manifest,
    load_sample,
    make_batch,
    make_sampler,
    normalize_sample,
    prepare_dataset,
    read_depth_png,
    read_rgb_png,
    save_manifest,
    split_samples,
    verify_no_leakage,
    write_depth_png,
    write_rgb_png,
)
from .deform import (
    DeformableConv2d,
    bilinear_sample,
    convert_conv_to_deformable,
    deform_conv2d,
    offset_channel_count,
    resolve_offset_groups,
    split_offset_field,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    MetricError,
    ShapeError,
    TrainingDiverged,
    TraitRegError,
)
from .layers import (
    BatchNorm2d,
    Conv2d,
    Linear,
    MaxPool2d,
    Module,
    Parameter,
    ReLU,
    Sequential,
)
from .metrics import (
    EvalReport,
    NmseAccumulator,
    evaluate_model,
    nmse,
    nmse_loss,
    per_trait_mse,
)
from .models import (
    CONV_KINDS,
    ENCODER_PRESETS,
    FUSION_KINDS,
    INPUT_KINDS,
    ModelConfig,
    TraitRegressor,
    build_model,
    convert_model_to_deformable,
    enumerate_ablation,
    parameter_count,
)
from .offsets import (
    DEFAULT_THRESHOLD_PX,
    OffsetField,
    StrongOffset,
    StrongOffsetSet,
    displaced_positions,
    extract_offsets,
    filter_strong,
    render_overlay,
)
from .optim import Adam
from .synthetic import generate_synthetic, render_plant, sample_plant_spec
from .train import (
    RunRecord,
    TrainConfig,
    run_ablation,
    run_training,
    train_model,
)

__all__ = [
    "__version__",
    "Function",
    "Tensor",
    "no_grad",
    "TraitRegError",
    "ShapeError",
    "ConfigError",
    "DataError",
    "MetricError",
    "CheckpointError",
    "TrainingDiverged",
    "Module",
    "Parameter",
    "Conv2d",
    "Linear",
    "BatchNorm2d",
    "MaxPool2d",
    "ReLU",
    "Sequential",
    "Adam",
    "DeformableConv2d",
    "deform_conv2d",
    "bilinear_sample",
    "convert_conv_to_deformable",
    "offset_channel_count",
    "resolve_offset_groups",
    "split_offset_field",
    "TRAIT_NAMES",
    "PIXEL_SCALE_CM",
    "DEPTH_RANGE_CM",
    "DEFAULT_CROP",
    "TraitVector",
    "Sample",
    "ChannelStats",
    "AugmentConfig",
    "SplitSpec",
    "SplitDataset",
    "load_dataset",
    "load_manifest",
    "load_sample",
    "save_manifest",
    "read_rgb_png",
    "read_depth_png",
    "write_rgb_png",
    "write_depth_png",
    "crop_image",
    "compute_channel_stats",
    "verify_no_leakage",
    "normalize_sample",
    "augment_sample",
    "make_sampler",
    "split_samples",
    "prepare_dataset",
    "make_batch",
    "generate_synthetic",
    "render_plant",
    "sample_plant_spec",
    "nmse",
    "nmse_loss",
    "per_trait_mse",
    "NmseAccumulator",
    "EvalReport",
    "evaluate_model",
    "INPUT_KINDS",
    "CONV_KINDS",
    "FUSION_KINDS",
    "ENCODER_PRESETS",
    "ModelConfig",
    "TraitRegressor",
    "build_model",
    "convert_model_to_deformable",
    "enumerate_ablation",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
    "apply_state",
    "save_model",
    "load_model",
    "TrainConfig",
    "RunRecord",
    "train_model",
    "run_training",
    "run_ablation",
    "DEFAULT_THRESHOLD_PX",
    "OffsetField",
    "StrongOffset",
    "StrongOffsetSet",
    "extract_offsets",
    "filter_strong",
    "displaced_positions",
    "render_overlay",
]
