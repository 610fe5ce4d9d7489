"""Guided super-resolution of Monte Carlo renderings.

Super-resolves a noisy low-resolution radiance image using fast-to-compute
high-resolution albedo/normal buffers as guidance.  See the README for the
data format, training workflow, and CLI.
"""

from .data_io import (
    FeatureMap,
    PatchBatch,
    RenderingSample,
    extract_patches,
    load_sample,
    save_sample,
)
from .metrics import (
    MetricsReport,
    bicubic_upsample,
    linear_to_srgb,
    psnr_srgb,
    relmse,
    robust_loss,
    spp_average,
)
from .model import (
    GuidedSRNet,
    ModelConfig,
    count_parameters,
    load_checkpoint,
    micro_profile,
    paper_profile,
    save_checkpoint,
    small_profile,
)
from .toyscenes import SceneSpec, make_dataset, render_clean, render_noisy
from .trainer import TrainConfig, evaluate, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "FeatureMap",
    "GuidedSRNet",
    "MetricsReport",
    "ModelConfig",
    "PatchBatch",
    "RenderingSample",
    "SceneSpec",
    "TrainConfig",
    "bicubic_upsample",
    "count_parameters",
    "evaluate",
    "extract_patches",
    "linear_to_srgb",
    "load_checkpoint",
    "load_sample",
    "make_dataset",
    "micro_profile",
    "paper_profile",
    "psnr_srgb",
    "relmse",
    "render_clean",
    "render_noisy",
    "robust_loss",
    "run_ablation",
    "save_checkpoint",
    "save_sample",
    "small_profile",
    "spp_average",
    "train",
]
