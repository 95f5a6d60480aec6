"""Image quality metrics, dataset evaluation and kernel-field overlays."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .pmpb import BlurKernelField

__all__ = [
    "PSNR_CAP",
    "psnr",
    "ssim",
    "EvalReport",
    "restore_image",
    "evaluate",
    "export_kernel_overlay",
]

PSNR_CAP = 100.0


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x.detach()).double()
    if t.dim() == 3:
        t = t[None]
    return t


def psnr(a, b) -> float:
    """10 log10(1 / MSE) on [0, 1] images; identical images give :data:`PSNR_CAP`."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, per channel, then averaged."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image {tuple(a.shape[-2:])} smaller than the {window}x{window} window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    n, c, h, w = a.shape
    win = _gaussian_window(window, sigma)
    x = a.reshape(n * c, 1, h, w)
    y = b.reshape(n * c, 1, h, w)

    def filt(t):
        return F.conv2d(t, win)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


@dataclass
class EvalReport:
    rows: list  # dicts: name, psnr, ssim
    model_id: str = ""
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r["psnr"] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.rows])) if self.rows else float("nan")

    def table(self) -> str:
        lines = [f"model: {self.model_id}", f"{'image':<40} {'PSNR':>8} {'SSIM':>7}"]
        for r in self.rows:
            lines.append(f"{r['name']:<40} {r['psnr']:8.3f} {r['ssim']:7.4f}")
        lines.append(f"{'mean':<40} {self.mean_psnr:8.3f} {self.mean_ssim:7.4f}")
        lines.append(f"images: {len(self.rows)}  time: {self.seconds:.2f}s")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        recs = [dict(r) for r in self.rows]
        recs.append({"name": "__mean__", "psnr": self.mean_psnr, "ssim": self.mean_ssim, "model": self.model_id})
        return "".join(json.dumps(r) + "\n" for r in recs)


def _restore_tile(model, tile):
    div = model.config.divisor
    h, w = tile.shape[-2:]
    ph, pw = (-h) % div, (-w) % div
    x = F.pad(tile, (0, pw, 0, ph), mode="replicate") if ph or pw else tile
    with torch.no_grad():
        out = model(x.to(model.config.dtype))[1].restorations[3]
    return out[..., :h, :w].double()


def _blend_ramp(n, overlap, lead, trail):
    r = torch.ones(n, dtype=torch.float64)
    ov = min(overlap, n)
    ramp = (torch.arange(ov, dtype=torch.float64) + 1) / (ov + 1)
    if lead:
        r[:ov] = ramp
    if trail:
        r[n - ov:] = torch.minimum(r[n - ov:], ramp.flip(0))
    return r


def _starts(n, tile, overlap):
    if n <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, n - tile, step)) + [n - tile]
    return sorted(set(starts))


def restore_image(model, image, tile: int = 256, overlap: int = 32) -> torch.Tensor:
    """Full-resolution restoration ``S[1, 1, 3]`` with linearly blended overlapping tiles."""
    x = _as_tensor(image)
    h, w = x.shape[-2:]
    if h <= tile and w <= tile:
        return _restore_tile(model, x)
    out = torch.zeros_like(x)
    weight = torch.zeros(1, 1, h, w, dtype=torch.float64)
    ys, xs = _starts(h, tile, overlap), _starts(w, tile, overlap)
    for top in ys:
        for left in xs:
            th, tw = min(tile, h - top), min(tile, w - left)
            piece = _restore_tile(model, x[..., top:top + th, left:left + tw])
            wy = _blend_ramp(th, overlap, top > 0, top + th < h)
            wx = _blend_ramp(tw, overlap, left > 0, left + tw < w)
            wt = (wy[:, None] * wx[None, :])[None, None]
            out[..., top:top + th, left:left + tw] += piece * wt
            weight[..., top:top + th, left:left + tw] += wt
    return out / weight


def evaluate(model, data, model_id: str = "", tile: int = 256, overlap: int = 32) -> EvalReport:
    """Score the full-resolution restoration of every pair against its sharp image."""
    from .data import PairDataset

    dataset = PairDataset.coerce(data)
    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    model.eval()
    start = time.perf_counter()
    rows = []
    for i in range(len(dataset)):
        blurred, sharp = dataset[i]
        restored = restore_image(model, blurred, tile, overlap).clamp(0, 1)
        name = Path(dataset.manifest.pairs[i][0]).name if dataset.manifest is not None else f"{i:05d}"
        rows.append({"name": name, "psnr": psnr(restored, sharp), "ssim": ssim(restored, sharp)})
    return EvalReport(rows, model_id, time.perf_counter() - start)


def overlay_points(field_: BlurKernelField, image_hw, stride: int, index: int = 0) -> list:
    """Marker positions in image pixel coordinates: (field x, field y, point n, img x, img y)."""
    off = field_.offsets[index].detach().double()
    n, fh, fw = field_.weights[index].shape
    h, w = image_hw
    if h % fh or w % fw:
        raise ValueError(f"field {fh}x{fw} does not divide image {h}x{w}")
    sy, sx = h / fh, w / fw
    points = []
    # grid cells are centred, so a stride beyond the field leaves no markers
    for y in range(stride // 2, fh, stride):
        for x in range(stride // 2, fw, stride):
            cx, cy = (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5
            for k in range(n):
                points.append((x, y, k, cx + off[2 * k, y, x].item() * sx, cy + off[2 * k + 1, y, x].item() * sy))
    return points


_MARKER_COLOURS = [(255, 40, 40), (40, 220, 40), (60, 120, 255), (255, 200, 0), (255, 0, 255), (0, 230, 230)]


def export_kernel_overlay(image, field_: BlurKernelField, stride: int, path, upscale: int = 4) -> list:
    """Draw every ``stride``-th field pixel's sampling points over ``image`` and save it.

    Returns the marker list from :func:`overlay_points`.
    """
    from .data import to_uint8

    arr = to_uint8(_as_tensor(image))
    h, w = arr.shape[:2]
    points = overlay_points(field_, (h, w), max(1, int(stride)))
    canvas = Image.fromarray(arr, mode="RGB").resize((w * upscale, h * upscale), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    r = max(1, upscale // 2)
    for _, _, k, px, py in points:
        cx, cy = (px + 0.5) * upscale, (py + 0.5) * upscale
        colour = _MARKER_COLOURS[k % len(_MARKER_COLOURS)]
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=colour)
    canvas.save(path)
    return points
