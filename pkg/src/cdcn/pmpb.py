"""Projective-motion-path blur (PMPB) forward model.

A blurred pixel is the exposure-weighted average of the sharp image sampled
along that pixel's own motion trajectory (gather form)::

    B(p) = sum_n w_n(p) * S(p + d_n(p))

Sampling is bilinear with clamp-to-edge. Displacements are in pixels relative
to the pixel centre; channel ``2n`` of an offset tensor is the x (column)
displacement of point ``n`` and channel ``2n + 1`` the y (row) displacement.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .ops import check_4d

__all__ = [
    "BlurKernelField",
    "TrajectorySpec",
    "SyntheticSample",
    "MOTION_FAMILIES",
    "bilinear_gather",
    "warp",
    "reblur",
    "dense_oracle_reblur",
    "sample_trajectory",
    "synthesize_blur",
    "kernel_alignment",
    "field_from_taps",
    "resample_taps",
    "taps_from_field",
    "save_true_field",
    "load_true_field",
]

MOTION_FAMILIES = ("linear", "polyline", "rotation")

_FIELD_MAGIC = b"PMPB"
_FIELD_VERSION = 1


@dataclass
class BlurKernelField:
    """Per-pixel blur kernel: ``offsets`` (B, 2N, h, w) and ``weights`` (B, N, h, w)."""

    offsets: torch.Tensor
    weights: torch.Tensor

    def __post_init__(self):
        if self.offsets.shape[1] != 2 * self.weights.shape[1]:
            raise ValueError(
                f"offsets carry {self.offsets.shape[1]} channels but weights imply N={self.weights.shape[1]}"
            )
        if self.offsets.shape[-2:] != self.weights.shape[-2:]:
            raise ValueError("offsets and weights must share resolution")

    @property
    def n_points(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def identity(cls, batch, height, width, n_points=1, dtype=torch.float64):
        offsets = torch.zeros(batch, 2 * n_points, height, width, dtype=dtype)
        weights = torch.full((batch, n_points, height, width), 1.0 / n_points, dtype=dtype)
        return cls(offsets, weights)

    def detach(self) -> "BlurKernelField":
        return BlurKernelField(self.offsets.detach(), self.weights.detach())


def _pixel_grid(height, width, dtype, device):
    ys = torch.arange(height, dtype=dtype, device=device).view(1, 1, height, 1)
    xs = torch.arange(width, dtype=dtype, device=device).view(1, 1, 1, width)
    return xs, ys


def bilinear_gather(image, x, y):
    """Sample ``image`` (B, C, H, W) at absolute coordinates ``x``, ``y`` (B, 1, h, w).

    Coordinates are clamped to the image before interpolation, so samples
    outside the frame repeat the edge pixel.
    """
    b, c, h, w = image.shape
    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)
    x0 = torch.floor(x).clamp(max=max(w - 2, 0))
    y0 = torch.floor(y).clamp(max=max(h - 2, 0))
    fx = x - x0
    fy = y - y0
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)

    flat = image.reshape(b, c, h * w)
    out_hw = x.shape[-2] * x.shape[-1]

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, out_hw).expand(b, c, out_hw)
        return torch.gather(flat, 2, idx).reshape(b, c, *x.shape[-2:])

    top = gather(y0i, x0i) * (1 - fx) + gather(y0i, x1i) * fx
    bottom = gather(y1i, x0i) * (1 - fx) + gather(y1i, x1i) * fx
    return top * (1 - fy) + bottom * fy


def warp(image, offset_plane):
    """Gather ``image`` at ``p + offset(p)`` for every pixel ``p``.

    ``offset_plane`` is (B, 2, h, w) holding (dx, dy) in pixels and must match
    the image resolution.
    """
    check_4d(image, "image")
    check_4d(offset_plane, "offset_plane")
    if offset_plane.shape[1] != 2:
        raise ValueError("offset_plane must have exactly 2 channels (dx, dy)")
    if image.shape[-2:] != offset_plane.shape[-2:]:
        raise ValueError(
            f"extent mismatch: image {tuple(image.shape[-2:])} vs offsets {tuple(offset_plane.shape[-2:])}"
        )
    h, w = image.shape[-2:]
    xs, ys = _pixel_grid(h, w, offset_plane.dtype, offset_plane.device)
    return bilinear_gather(image, xs + offset_plane[:, 0:1], ys + offset_plane[:, 1:2])


def _weighted_gather(image, offsets, weights):
    if image.shape[-2:] != offsets.shape[-2:]:
        raise ValueError(
            f"resolution mismatch: image {tuple(image.shape[-2:])} vs field {tuple(offsets.shape[-2:])}"
        )
    n = weights.shape[1]
    if offsets.shape[1] != 2 * n:
        raise ValueError(f"weights carry {n} points but offsets carry {offsets.shape[1]} channels")
    out = None
    for i in range(n):
        term = warp(image, offsets[:, 2 * i:2 * i + 2]) * weights[:, i:i + 1]
        out = term if out is None else out + term
    return out


def reblur(sharp, field: BlurKernelField):
    """Re-blur ``sharp`` with a per-pixel kernel field (gather form)."""
    check_4d(sharp, "sharp")
    return _weighted_gather(sharp, field.offsets, field.weights)


def _bilinear_scalar(img, x, y):
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = min(int(math.floor(x)), max(w - 2, 0))
    y0 = min(int(math.floor(y)), max(h - 2, 0))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def dense_oracle_reblur(sharp, taps) -> np.ndarray:
    """Reference reblur by explicit per-pixel loops; no autograd, small inputs only.

    ``sharp`` is (C, H, W) or (B, C, H, W); ``taps`` is (H, W, T, 3) holding
    (dx, dy, weight) rows, or (B, H, W, T, 3) for per-sample taps.
    """
    img = np.asarray(sharp.detach() if isinstance(sharp, torch.Tensor) else sharp, dtype=np.float64)
    taps = np.asarray(taps, dtype=np.float64)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[None]
    if taps.ndim == 4:
        taps = np.broadcast_to(taps, (img.shape[0],) + taps.shape)
    b, c, h, w = img.shape
    out = np.zeros_like(img)
    for bi in range(b):
        for ci in range(c):
            plane = img[bi, ci]
            for yy in range(h):
                for xx in range(w):
                    acc = 0.0
                    for dx, dy, wt in taps[bi, yy, xx]:
                        acc += wt * _bilinear_scalar(plane, xx + dx, yy + dy)
                    out[bi, ci, yy, xx] = acc
    return out[0] if squeeze else out


@dataclass
class TrajectorySpec:
    """Camera-shake trajectory recipe.

    ``max_displacement`` is the end-to-end span of the path in pixels (for
    ``rotation``: the span swept by the farthest image corner). Paths are
    centred on the zero displacement so blurred and sharp stay registered.
    """

    n_samples: int = 9
    max_displacement: float = 5.0
    family: str = "linear"
    seed: int = 0
    angle: float | None = None

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("trajectory needs at least 2 time samples")
        if self.max_displacement < 0:
            raise ValueError("max_displacement must be >= 0")
        if self.family not in MOTION_FAMILIES:
            raise ValueError(f"unknown motion family {self.family!r}; expected one of {MOTION_FAMILIES}")


@dataclass
class SyntheticSample:
    sharp: torch.Tensor
    blurred: torch.Tensor
    true_field: np.ndarray  # (H, W, T, 3) rows of (dx, dy, w)
    spec: TrajectorySpec | None = field(default=None)


def _polyline_points(vertices, n):
    seg = np.diff(vertices, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cum[-1]
    if total == 0:
        return np.repeat(vertices[:1], n, axis=0)
    s = np.linspace(0.0, total, n)
    xs = np.interp(s, cum, vertices[:, 0])
    ys = np.interp(s, cum, vertices[:, 1])
    return np.stack([xs, ys], axis=1)


def sample_trajectory(spec: TrajectorySpec, height: int, width: int) -> np.ndarray:
    """Dense per-pixel displacements (H, W, T, 2) for the requested motion family."""
    rng = np.random.default_rng(spec.seed)
    t = spec.n_samples
    span = float(spec.max_displacement)
    angle = rng.uniform(0, np.pi) if spec.angle is None else float(spec.angle)

    if spec.family == "linear":
        s = np.linspace(-0.5, 0.5, t) * span
        path = np.stack([s * np.cos(angle), s * np.sin(angle)], axis=1)
        return np.broadcast_to(path, (height, width, t, 2)).copy()

    if spec.family == "polyline":
        n_vertices = 4
        steps = rng.normal(size=(n_vertices - 1, 2))
        steps /= np.maximum(np.hypot(steps[:, 0], steps[:, 1]), 1e-12)[:, None]
        vertices = np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
        vertices -= vertices.mean(axis=0)
        extent = np.max(np.hypot(*(vertices[:, None] - vertices[None]).transpose(2, 0, 1)))
        if extent > 0:
            vertices *= span / extent
        path = _polyline_points(vertices, t)
        path -= path.mean(axis=0)
        return np.broadcast_to(path, (height, width, t, 2)).copy()

    # rotation about the image centre
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    radius = math.hypot(cx, cy)
    theta_max = 0.0 if radius == 0 else 2.0 * math.asin(min(span / (2.0 * radius), 1.0))
    thetas = np.linspace(-0.5, 0.5, t) * theta_max
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    rx, ry = xs - cx, ys - cy
    cos, sin = np.cos(thetas), np.sin(thetas)
    dx = rx[..., None] * cos + (-ry[..., None]) * sin - rx[..., None]
    dy = rx[..., None] * sin + ry[..., None] * cos - ry[..., None]
    return np.stack([dx, dy], axis=-1)


def synthesize_blur(sharp, spec: TrajectorySpec) -> SyntheticSample:
    """Blur ``sharp`` (C, H, W) or (1, C, H, W) along a sampled trajectory."""
    sharp = torch.as_tensor(sharp)
    if sharp.dim() == 3:
        sharp = sharp[None]
    check_4d(sharp, "sharp")
    if sharp.shape[0] != 1:
        raise ValueError("synthesize_blur expects a single image")
    h, w = sharp.shape[-2:]
    if spec.max_displacement >= min(h, w):
        raise ValueError(
            f"max displacement {spec.max_displacement} px exceeds image extents {h}x{w}"
        )
    disp = sample_trajectory(spec, h, w)
    t = spec.n_samples
    taps = np.concatenate([disp, np.full(disp.shape[:-1] + (1,), 1.0 / t)], axis=-1)
    field_ = field_from_taps(taps, dtype=sharp.dtype)
    blurred = reblur(sharp, field_)
    return SyntheticSample(sharp=sharp, blurred=blurred, true_field=taps, spec=spec)


def field_from_taps(taps, height: int | None = None, width: int | None = None,
                    dtype=torch.float64) -> BlurKernelField:
    """Turn dense taps (H, W, T, 3) into a (1, 2T, h, w) kernel field.

    When a smaller target resolution is given the taps are resampled with
    :func:`resample_taps` (displacements rescaled to the target grid).
    """
    taps = np.asarray(taps, dtype=np.float64)
    if height is not None and (height, width) != taps.shape[:2]:
        taps = resample_taps(taps, height, width)
    h, w, t, _ = taps.shape
    offsets = np.ascontiguousarray(taps[..., :2].reshape(h, w, 2 * t).transpose(2, 0, 1))
    weights = np.ascontiguousarray(taps[..., 2].transpose(2, 0, 1))
    return BlurKernelField(
        torch.as_tensor(offsets, dtype=dtype)[None],
        torch.as_tensor(weights, dtype=dtype)[None],
    )


def resample_taps(taps, height: int, width: int) -> np.ndarray:
    """Nearest-centre resampling of dense taps onto a coarser (height, width) grid."""
    taps = np.asarray(taps, dtype=np.float64)
    src_h, src_w = taps.shape[:2]
    sy, sx = src_h / height, src_w / width
    rows = np.clip(np.round((np.arange(height) + 0.5) * sy - 0.5).astype(int), 0, src_h - 1)
    cols = np.clip(np.round((np.arange(width) + 0.5) * sx - 0.5).astype(int), 0, src_w - 1)
    out = taps[rows][:, cols].copy()
    out[..., 0] /= sx
    out[..., 1] /= sy
    return out


def taps_from_field(field_: BlurKernelField, index: int = 0) -> np.ndarray:
    """Inverse of :func:`field_from_taps` for one batch element."""
    off = field_.offsets[index].detach().cpu().double().numpy()
    wts = field_.weights[index].detach().cpu().double().numpy()
    n, h, w = wts.shape
    d = off.reshape(n, 2, h, w).transpose(2, 3, 0, 1)
    return np.concatenate([d, wts.transpose(1, 2, 0)[..., None]], axis=-1)


def _chamfer(a, b):
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    return dist.min(axis=1).mean() + dist.min(axis=0).mean()


def kernel_alignment(estimated, truth, mask=None) -> float:
    """Symmetric Chamfer distance between estimated and true sampling points.

    Per pixel: mean nearest-neighbour distance from estimated points to true
    taps plus the same from true taps to estimated points; averaged over the
    pixels selected by ``mask`` (all pixels by default). Units are pixels of
    the field grid.
    """
    est = taps_from_field(estimated) if isinstance(estimated, BlurKernelField) else np.asarray(estimated)
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape[2] == 0 or est.shape[2] == 0:
        raise ValueError("kernel alignment needs at least one tap per pixel")
    if est.shape[:2] != truth.shape[:2]:
        raise ValueError(f"resolution mismatch: {est.shape[:2]} vs {truth.shape[:2]}")
    h, w = truth.shape[:2]
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    scores = [_chamfer(est[y, x, :, :2], truth[y, x, :, :2]) for y, x in zip(*np.nonzero(mask))]
    if not scores:
        raise ValueError("mask selects no pixels")
    return float(np.mean(scores))


def save_true_field(path, taps) -> None:
    """Write dense taps as ``PMPB`` | u32 version | u32 h, w, T | float32 (dx, dy, w) rows."""
    taps = np.asarray(taps, dtype="<f4")
    h, w, t, _ = taps.shape
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<4I", _FIELD_VERSION, h, w, t))
        fh.write(np.ascontiguousarray(taps).tobytes())


def load_true_field(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _FIELD_MAGIC:
        raise ValueError(f"{path}: not a PMPB field file")
    version, h, w, t = struct.unpack("<4I", data[4:20])
    if version != _FIELD_VERSION:
        raise ValueError(f"{path}: unsupported field version {version}")
    expected = h * w * t * 3 * 4
    if len(data) - 20 != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(data) - 20}")
    return np.frombuffer(data[20:], dtype="<f4").reshape(h, w, t, 3).astype(np.float64)
