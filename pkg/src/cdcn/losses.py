"""Training objective: content (L1) + lambda * frequency (L1 on spectra) + PMPB reblur (L2)."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .ops import fft2, reduce_loss
from .pmpb import reblur

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "content_loss",
    "frequency_loss",
    "reblur_loss",
    "total_loss",
    "compute_losses",
]


@dataclass
class LossConfig:
    lam: float = 0.1
    content: bool = True
    frequency: bool = True
    reblur: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


@dataclass
class LossBreakdown:
    content: torch.Tensor | float
    frequency: torch.Tensor | float
    reblur: torch.Tensor | float
    total: torch.Tensor | float

    def as_floats(self) -> dict:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("content", "frequency", "reblur", "total")}


def _pairs(restorations, gt_pyramid):
    for key, s in restorations.items():
        gt = gt_pyramid[key]
        if s.shape != gt.shape:
            raise ValueError(f"site {key}: restoration {tuple(s.shape)} vs ground truth {tuple(gt.shape)}")
        yield s, gt


def content_loss(restorations: dict, gt_pyramid: dict):
    """Sum over sites of the mean absolute error.

    ``restorations`` and ``gt_pyramid`` are keyed identically, e.g. by
    ``(scale, k)``.
    """
    total = 0.0
    for s, gt in _pairs(restorations, gt_pyramid):
        total = total + reduce_loss(s, gt, "L1")
    return total


def frequency_loss(restorations: dict, gt_pyramid: dict):
    """Sum over sites of the mean absolute difference of real and imaginary DFT planes."""
    total = 0.0
    for s, gt in _pairs(restorations, gt_pyramid):
        sr, si = fft2(s)
        gr, gi = fft2(gt)
        total = total + reduce_loss(torch.cat([sr, si], dim=1), torch.cat([gr, gi], dim=1), "L1")
    return total


def reblur_loss(fields: dict, sharp_quarter: dict, blurred_targets: dict):
    """Sum over CDCR sites of the MSE between the re-blurred sharp image and the blurred input.

    All three dicts share keys (``(scale, level)``). ``sharp_quarter[key]`` is
    the ground truth at the field's resolution; ``blurred_targets[key]`` is
    the observed blurred image at that resolution.
    """
    total = 0.0
    for key, fld in fields.items():
        sharp = sharp_quarter[key]
        target = blurred_targets[key]
        if sharp.shape[-2:] != fld.offsets.shape[-2:] or target.shape[-2:] != fld.offsets.shape[-2:]:
            raise ValueError(
                f"site {key}: field at {tuple(fld.offsets.shape[-2:])}, sharp at {tuple(sharp.shape[-2:])}, "
                f"target at {tuple(target.shape[-2:])}"
            )
        total = total + reduce_loss(reblur(sharp, fld), target, "L2")
    return total


def total_loss(content, frequency, reblur_term, config: LossConfig) -> LossBreakdown:
    zero = 0.0
    c = content if config.content else zero
    f = frequency if config.frequency else zero
    r = reblur_term if config.reblur else zero
    return LossBreakdown(content=c, frequency=f, reblur=r, total=c + config.lam * f + r)


def compute_losses(outputs: dict, gt_pyramid: dict, config: LossConfig) -> LossBreakdown:
    """Evaluate every enabled term on a model forward pass.

    ``outputs`` is the ``{scale: ScaleIO}`` map from the network and
    ``gt_pyramid`` the ``(scale, tier)`` sharp pyramid; restoration
    ``S[i, 1, k]`` is compared with tier ``4 - k``.
    """
    restorations = {}
    targets = {}
    for i, io in outputs.items():
        for k, s in io.restorations.items():
            restorations[i, k] = s
            targets[i, k] = gt_pyramid[i, 4 - k]
    content = content_loss(restorations, targets) if config.content else 0.0
    frequency = frequency_loss(restorations, targets) if config.frequency else 0.0
    reblur_term = 0.0
    if config.reblur:
        fields, sharp_q, blurred_q = {}, {}, {}
        for i, io in outputs.items():
            for j, fld in io.fields.items():
                fields[i, j] = fld
                sharp_q[i, j] = gt_pyramid[i, 3]
                blurred_q[i, j] = io.inputs[3]
        reblur_term = reblur_loss(fields, sharp_q, blurred_q)
    return total_loss(content, frequency, reblur_term, config)
