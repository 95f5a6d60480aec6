"""Constrained deformable convolution reblurring (CDCR) block.

``conv1`` predicts a blur-kernel field (N offsets + softmax weights) from the
features; two PReLU + conv stages turn that field into an inverse kernel
(M offsets + unnormalized weights) which is applied to the features with a
single depthwise deformable convolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .ops import channel_softmax, conv2d, prelu, split_channels
from .pmpb import BlurKernelField, _weighted_gather

__all__ = [
    "InverseKernelField",
    "CDCR",
    "predict_blur_kernels",
    "predict_inverse_kernels",
    "apply_inverse_kernels",
    "cdcr_forward",
    "export_kernel_table",
]


@dataclass
class InverseKernelField:
    offsets: torch.Tensor  # (B, 2M, h, w)
    weights: torch.Tensor  # (B, M, h, w), unnormalized

    def __post_init__(self):
        if self.offsets.shape[1] != 2 * self.weights.shape[1]:
            raise ValueError("inverse offsets must carry 2M channels for M weights")

    @property
    def n_points(self) -> int:
        return self.weights.shape[1]


class CDCR(nn.Module):
    """Parameters of one CDCR site: conv1 (C -> 3N), conv2 (3N -> Cmid), conv3 (Cmid -> 3M)."""

    def __init__(self, channels: int, n_points: int = 3, m_points: int = 7, mid_channels: int = 64,
                 inverse: bool = True):
        super().__init__()
        self.channels = channels
        self.n_points = n_points
        self.m_points = m_points
        self.inverse = inverse
        self.conv1 = nn.Conv2d(channels, 3 * n_points, 3, padding=1)
        if inverse:
            self.prelu1 = nn.Parameter(torch.full((1,), 0.25))
            self.conv2 = nn.Conv2d(3 * n_points, mid_channels, 3, padding=1)
            self.prelu2 = nn.Parameter(torch.full((1,), 0.25))
            self.conv3 = nn.Conv2d(mid_channels, 3 * m_points, 3, padding=1)

    def reset_heads(self):
        """Zero the kernel heads: identity-like blur field and identity inverse kernel."""
        with torch.no_grad():
            self.conv1.weight.zero_()
            self.conv1.bias.zero_()
            if self.inverse:
                self.conv3.weight.zero_()
                self.conv3.bias.zero_()
                # first inverse tap weight 1 at zero offset
                self.conv3.bias[2 * self.m_points] = 1.0

    def forward(self, f_in):
        return cdcr_forward(f_in, self)


def predict_blur_kernels(f_in, params: CDCR) -> BlurKernelField:
    n = params.n_points
    raw = conv2d(f_in, params.conv1.weight, params.conv1.bias, padding=1)
    offsets, logits = split_channels(raw, [2 * n, n])
    return BlurKernelField(offsets, channel_softmax(logits))


def predict_inverse_kernels(field: BlurKernelField, params: CDCR) -> InverseKernelField:
    if field.offsets.shape[-2:] != field.weights.shape[-2:]:
        raise ValueError("blur field tensors must share resolution")
    hidden = torch.cat([prelu(field.offsets, params.prelu1), field.weights], dim=1)
    hidden = conv2d(hidden, params.conv2.weight, params.conv2.bias, padding=1)
    out = conv2d(prelu(hidden, params.prelu2), params.conv3.weight, params.conv3.bias, padding=1)
    offsets, weights = split_channels(out, [2 * params.m_points, params.m_points])
    return InverseKernelField(offsets, weights)


def apply_inverse_kernels(f_in, inv: InverseKernelField):
    """Depthwise deformable convolution: the same per-pixel taps filter every channel."""
    return _weighted_gather(f_in, inv.offsets, inv.weights)


def cdcr_forward(f_in, params: CDCR):
    """Return (deblurred features, blur-kernel field).

    Without the inverse path (``params.inverse`` false) the features pass
    through unchanged and only the field is produced.
    """
    field = predict_blur_kernels(f_in, params)
    if not params.inverse:
        return f_in, field
    inv = predict_inverse_kernels(field, params)
    return apply_inverse_kernels(f_in, inv), field


def export_kernel_table(field: BlurKernelField, stride: int = 4, index: int = 0) -> str:
    """Plain-text rows ``x y n dx dy w`` for every ``stride``-th pixel."""
    off = field.offsets[index].detach().double()
    wts = field.weights[index].detach().double()
    lines = ["# x y n dx dy w"]
    h, w = wts.shape[-2:]
    for y in range(0, h, stride):
        for x in range(0, w, stride):
            for n in range(wts.shape[0]):
                lines.append(
                    f"{x} {y} {n} {off[2 * n, y, x].item():.6f} {off[2 * n + 1, y, x].item():.6f} "
                    f"{wts[n, y, x].item():.6f}"
                )
    return "\n".join(lines) + "\n"
