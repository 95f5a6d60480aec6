"""Blind single-image deblurring with constrained deformable convolutions.

A multi-scale, multi-level encoder-decoder that estimates a per-pixel blur
kernel field, inverts it with learned deformable kernels, and is trained with
an extra loss that re-blurs the sharp target through the estimated field.
"""
from .cdcr import CDCR, InverseKernelField, apply_inverse_kernels, cdcr_forward
from .data import DatasetManifest, PairDataset, generate_synthetic_dataset, load_pair_dataset
from .estimator import CDCNDeblurrer, check_image_batch
from .losses import LossConfig, compute_losses
from .metrics import EvalReport, evaluate, psnr, restore_image, ssim
from .network import CDCN, ModelConfig, audit_resolutions, build_model, model_forward
from .pmpb import (
    BlurKernelField,
    TrajectorySpec,
    dense_oracle_reblur,
    kernel_alignment,
    reblur,
    synthesize_blur,
    warp,
)
from .training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_run

__version__ = "0.1.0"

__all__ = [
    "BlurKernelField",
    "CDCN",
    "CDCNDeblurrer",
    "CDCR",
    "Checkpoint",
    "DatasetManifest",
    "EvalReport",
    "InverseKernelField",
    "LossConfig",
    "ModelConfig",
    "PairDataset",
    "TrainConfig",
    "TrajectorySpec",
    "apply_inverse_kernels",
    "audit_resolutions",
    "build_model",
    "cdcr_forward",
    "check_image_batch",
    "compute_losses",
    "dense_oracle_reblur",
    "evaluate",
    "generate_synthetic_dataset",
    "kernel_alignment",
    "load_checkpoint",
    "load_pair_dataset",
    "model_forward",
    "psnr",
    "reblur",
    "restore_image",
    "save_checkpoint",
    "ssim",
    "synthesize_blur",
    "train_run",
    "warp",
]
