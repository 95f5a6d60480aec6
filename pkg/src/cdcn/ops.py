"""Differentiable tensor primitives shared by every other module.

All tensors are 4-D ``(batch, channel, height, width)``. Gradients come from
torch autograd; :mod:`cdcn.gradcheck` verifies them against finite
differences.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

__all__ = [
    "conv2d",
    "transposed_conv2d",
    "prelu",
    "channel_softmax",
    "split_channels",
    "bilinear_resize",
    "fft2",
    "reduce_loss",
    "check_4d",
]


def check_4d(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ValueError(f"{name} must be 4-D (batch, channel, height, width), got shape {tuple(x.shape)}")
    if min(x.shape) < 1:
        raise ValueError(f"{name} has an empty extent: {tuple(x.shape)}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    check_4d(x)
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    k_h, k_w = weight.shape[-2:]
    out_h = (x.shape[2] + 2 * padding - k_h) // stride + 1
    out_w = (x.shape[3] + 2 * padding - k_w) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extent < 1 for input {tuple(x.shape)} and kernel {k_h}x{k_w}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def transposed_conv2d(x, weight, bias=None, stride: int = 2):
    """Upsample by ``stride`` with a (Cin, Cout, 4, 4) kernel and padding 1.

    With stride 2 the output is exactly ``2H x 2W``.
    """
    check_4d(x)
    if weight.shape[0] != x.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[0]}")
    if weight.shape[-1] != weight.shape[-2]:
        raise ValueError("transposed convolution weight must be square")
    k = weight.shape[-1]
    padding = (k - stride) // 2
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def prelu(x, slope):
    slope = torch.as_tensor(slope, dtype=x.dtype, device=x.device)
    if slope.dim() == 0:
        slope = slope.reshape(1)
    return torch.where(x >= 0, x, slope.reshape(1, -1, 1, 1) * x)


def channel_softmax(x, group: slice | tuple[int, int] | None = None):
    """Softmax over a contiguous channel range, other channels untouched."""
    check_4d(x)
    if group is None:
        start, stop = 0, x.shape[1]
    elif isinstance(group, slice):
        start, stop, _ = group.indices(x.shape[1])
    else:
        start, stop = group
    if stop <= start:
        raise ValueError("softmax group is empty")
    # torch.softmax subtracts the running max, so extreme logits stay finite
    soft = torch.softmax(x[:, start:stop], dim=1)
    if start == 0 and stop == x.shape[1]:
        return soft
    return torch.cat([x[:, :start], soft, x[:, stop:]], dim=1)


def split_channels(x, sizes: Sequence[int]) -> list[torch.Tensor]:
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise ValueError(f"split sizes must be positive, got {sizes}")
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"split sizes {sizes} do not sum to channel extent {x.shape[1]}")
    return list(torch.split(x, sizes, dim=1))


def bilinear_resize(x, height: int, width: int):
    """Half-pixel-center bilinear resize (source = (i + 0.5) / scale - 0.5, edge clamped)."""
    check_4d(x)
    if height < 1 or width < 1:
        raise ValueError("target extents must be >= 1")
    if (height, width) == tuple(x.shape[-2:]):
        return x
    return F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)


def fft2(x) -> tuple[torch.Tensor, torch.Tensor]:
    """Unnormalized 2-D DFT per channel, returned as (real, imaginary) planes."""
    check_4d(x)
    spec = torch.fft.fft2(x, norm="backward")
    return spec.real, spec.imag


def reduce_loss(a, b, kind: str = "L1"):
    """Mean absolute (L1) or mean squared (L2) difference over all elements."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = a - b
    if kind == "L1":
        return diff.abs().mean()
    if kind == "L2":
        return (diff * diff).mean()
    raise ValueError(f"unknown loss kind {kind!r}")
