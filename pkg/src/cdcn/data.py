"""Paired blurred/sharp datasets, patch sampling and synthetic data generation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .network import build_pyramid
from .pmpb import TrajectorySpec, load_true_field, save_true_field, synthesize_blur

__all__ = [
    "DatasetManifest",
    "PairDataset",
    "PatchBatch",
    "read_image",
    "write_image",
    "load_pair_dataset",
    "sample_patch",
    "make_pyramids",
    "procedural_scene",
    "generate_synthetic_dataset",
]

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")
LAYOUTS = ("gopro", "hide", "flat-pairs")


def read_image(path) -> torch.Tensor:
    """Decode an image file to a (3, H, W) float64 tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr.astype(np.float64) / 255.0).permute(2, 0, 1).contiguous()


def to_uint8(image) -> np.ndarray:
    arr = image.detach().cpu().double().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if arr.ndim == 4:
        arr = arr[0]
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_image(path, image) -> None:
    """Write a (3, H, W) or (1, 3, H, W) [0, 1] image as lossless 8-bit RGB."""
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


@dataclass
class DatasetManifest:
    root: str
    pairs: list  # (blurred path, sharp path)
    split: str = "train"
    fields: list | None = None

    def __len__(self):
        return len(self.pairs)

    def save(self, path) -> None:
        """Line-delimited JSON: a header record, then one record per pair."""
        with open(path, "w") as fh:
            fh.write(json.dumps({"root": self.root, "split": self.split, "count": len(self.pairs)}) + "\n")
            for i, (b, s) in enumerate(self.pairs):
                rec = {"blurred": b, "sharp": s}
                if self.fields is not None:
                    rec["field"] = self.fields[i]
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        recs = [json.loads(line) for line in lines[1:] if line.strip()]
        fields = [r["field"] for r in recs] if recs and all("field" in r for r in recs) else None
        return cls(head["root"], [(r["blurred"], r["sharp"]) for r in recs], head.get("split", "train"), fields)


def _images_in(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _pairs_gopro(root: Path, split: str):
    base = root / split if (root / split).is_dir() else root
    pairs = []
    for seq in sorted(p for p in base.iterdir() if p.is_dir()):
        blur_dir, sharp_dir = seq / "blur", seq / "sharp"
        if not blur_dir.is_dir() or not sharp_dir.is_dir():
            continue
        sharp_names = {p.name for p in _images_in(sharp_dir)}
        for b in _images_in(blur_dir):
            if b.name not in sharp_names:
                raise FileNotFoundError(f"no sharp counterpart for {b}")
            pairs.append((str(b), str(sharp_dir / b.name)))
    return pairs


def _pairs_hide(root: Path, split: str):
    gt_dir = root / "GT"
    if not gt_dir.is_dir():
        raise FileNotFoundError(f"HIDE layout needs a GT directory under {root}")
    base = root / split if (root / split).is_dir() else root
    pairs = []
    for b in sorted(p for p in base.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES):
        if gt_dir in b.parents:
            continue
        s = gt_dir / b.name
        if not s.exists():
            raise FileNotFoundError(f"no sharp counterpart for {b}")
        pairs.append((str(b), str(s)))
    return pairs


def _pairs_flat(root: Path):
    pairs, fields = [], []
    files = _images_in(root)
    sharp = {p.stem[: -len("_sharp")]: p for p in files if p.stem.endswith("_sharp")}
    for b in files:
        if not b.stem.endswith("_blur"):
            continue
        key = b.stem[: -len("_blur")]
        if key not in sharp:
            raise FileNotFoundError(f"no sharp counterpart for {b}")
        pairs.append((str(b), str(sharp[key])))
        f = root / f"{key}_field.pmpb"
        fields.append(str(f) if f.exists() else None)
    blur_keys = {p.stem[: -len("_blur")] for p in files if p.stem.endswith("_blur")}
    orphans = sorted(set(sharp) - blur_keys)
    if orphans:
        raise FileNotFoundError(f"no blurred counterpart for {sharp[orphans[0]]}")
    return pairs, (fields if fields and all(f is not None for f in fields) else None)


def load_pair_dataset(root, layout: str = "flat-pairs", split: str = "train") -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    fields = None
    if layout == "gopro":
        pairs = _pairs_gopro(root, split)
    elif layout == "hide":
        pairs = _pairs_hide(root, split)
    else:
        pairs, fields = _pairs_flat(root)
    log.info("loaded %d pairs from %s (%s)", len(pairs), root, layout)
    return DatasetManifest(str(root), pairs, split, fields)


class PairDataset:
    """In-memory image pairs, decoded and validated on first access."""

    def __init__(self, blurred=None, sharp=None, manifest: DatasetManifest | None = None):
        self.manifest = manifest
        if manifest is not None:
            self._blurred = [None] * len(manifest)
            self._sharp = [None] * len(manifest)
        else:
            self._blurred = [torch.as_tensor(b, dtype=torch.float64) for b in blurred]
            self._sharp = [torch.as_tensor(s, dtype=torch.float64) for s in sharp]
            for i, (b, s) in enumerate(zip(self._blurred, self._sharp)):
                if b.shape != s.shape:
                    raise ValueError(f"pair {i}: blurred {tuple(b.shape)} vs sharp {tuple(s.shape)}")

    @classmethod
    def coerce(cls, data) -> "PairDataset":
        if isinstance(data, PairDataset):
            return data
        if isinstance(data, DatasetManifest):
            return cls(manifest=data)
        blurred, sharp = data
        return cls(blurred, sharp)

    def __len__(self):
        return len(self._blurred)

    def __getitem__(self, i):
        if self._blurred[i] is None:
            b_path, s_path = self.manifest.pairs[i]
            b, s = read_image(b_path), read_image(s_path)
            if b.shape != s.shape:
                raise ValueError(f"extent mismatch between {b_path} and {s_path}")
            self._blurred[i], self._sharp[i] = b, s
        return self._blurred[i], self._sharp[i]


@dataclass
class PatchBatch:
    blurred: torch.Tensor
    sharp: torch.Tensor
    blurred_pyramid: dict
    sharp_pyramid: dict
    records: list = field(default_factory=list)  # (index, top, left, flipped)


def sample_patch(data, patch_size: int, rng: np.random.Generator, batch_size: int = 1,
                 scales: int = 3, flip_prob: float = 0.5, dtype=torch.float32) -> PatchBatch:
    """Random aligned crops with a shared horizontal flip, plus both pyramids."""
    data = PairDataset.coerce(data)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    div = 2 ** (scales - 1) * 4
    if patch_size % div:
        raise ValueError(f"patch size {patch_size} must be divisible by {div}")
    blurred, sharp, records = [], [], []
    for _ in range(batch_size):
        idx = int(rng.integers(len(data)))
        b, s = data[idx]
        h, w = b.shape[-2:]
        if patch_size > h or patch_size > w:
            raise ValueError(f"patch size {patch_size} exceeds image {idx} extents {h}x{w}")
        top = int(rng.integers(h - patch_size + 1))
        left = int(rng.integers(w - patch_size + 1))
        flip = bool(rng.random() < flip_prob)
        bp = b[:, top:top + patch_size, left:left + patch_size]
        sp = s[:, top:top + patch_size, left:left + patch_size]
        if flip:
            bp, sp = bp.flip(-1), sp.flip(-1)
        blurred.append(bp)
        sharp.append(sp)
        records.append((idx, top, left, flip))
    b = torch.stack(blurred).to(dtype)
    s = torch.stack(sharp).to(dtype)
    return PatchBatch(b, s, make_pyramids(b, scales), make_pyramids(s, scales), records)


def make_pyramids(image, scales: int = 3) -> dict:
    """(scale, tier) -> bilinear downsample; tier k of scale i is full / 2**(i-1) / 2**(k-1)."""
    if image.dim() == 3:
        image = image[None]
    return build_pyramid(image, scales)


def _soft_step(d, width=0.75):
    return 1.0 / (1.0 + np.exp(-d / width))


def procedural_scene(height: int, width: int, rng: np.random.Generator, n_shapes: int = 14,
                     edge_width: float = 0.75) -> torch.Tensor:
    """Random smooth-edged shapes and stripes over a colour gradient, (3, H, W) in [0, 1].

    ``edge_width`` (pixels) sets how soft shape boundaries are; large values
    give band-limited scenes that survive downsampling without aliasing.
    """
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    g = rng.uniform(-1, 1, size=2)
    ramp = (g[0] * (xs / width - 0.5) + g[1] * (ys / height - 0.5)) / (abs(g).sum() + 1e-9) + 0.5
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(n_shapes):
        colour = rng.uniform(0.0, 1.0, size=3)[:, None, None]
        kind = rng.integers(3)
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        if kind == 0:
            r = rng.uniform(3, max(4, min(height, width) / 4))
            mask = _soft_step(r - np.hypot(xs - cx, ys - cy), edge_width)
        elif kind == 1:
            hw, hh = rng.uniform(2, width / 4), rng.uniform(2, height / 4)
            mask = _soft_step(hw - np.abs(xs - cx), edge_width) * _soft_step(hh - np.abs(ys - cy), edge_width)
        else:
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(5, 12)
            u = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
            mask = _soft_step(np.cos(2 * np.pi * u / period) * period / 6, edge_width)
            mask *= _soft_step(min(height, width) / 5 - np.hypot(xs - cx, ys - cy), edge_width)
        img = img * (1 - mask) + colour * mask
    return torch.from_numpy(np.clip(img, 0.0, 1.0))


def generate_synthetic_dataset(count: int, out_dir, families=("linear",), image_size: int = 64,
                               max_displacement: float = 5.0, n_samples: int = 9, seed: int = 0,
                               sources=None, edge_width: float = 0.75, n_shapes: int = 14) -> DatasetManifest:
    """Write ``count`` PMPB-blurred pairs with their true kernel fields (flat-pairs layout).

    Sharp images come from ``sources`` (a list of image paths, cropped and
    cycled) or from :func:`procedural_scene` with ``n_shapes`` and ``edge_width``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs, fields = [], []
    for i in range(count):
        if sources:
            src = read_image(sources[i % len(sources)])
            h, w = src.shape[-2:]
            if h < image_size or w < image_size:
                raise ValueError(f"source {sources[i % len(sources)]} smaller than {image_size}px")
            top = int(rng.integers(h - image_size + 1))
            left = int(rng.integers(w - image_size + 1))
            sharp = src[:, top:top + image_size, left:left + image_size]
        else:
            sharp = procedural_scene(image_size, image_size, rng, n_shapes, edge_width)
        family = families[i % len(families)]
        spec = TrajectorySpec(n_samples=n_samples, max_displacement=max_displacement, family=family,
                              seed=int(rng.integers(2**31)))
        sample = synthesize_blur(sharp, spec)
        stem = f"{i:05d}"
        b_path, s_path, f_path = out / f"{stem}_blur.png", out / f"{stem}_sharp.png", out / f"{stem}_field.pmpb"
        write_image(s_path, sample.sharp)
        write_image(b_path, sample.blurred)
        save_true_field(f_path, sample.true_field)
        pairs.append((str(b_path), str(s_path)))
        fields.append(str(f_path))
    manifest = DatasetManifest(str(out), pairs, "train", fields)
    manifest.save(out / "manifest.jsonl")
    return manifest


def load_fields(manifest: DatasetManifest) -> list:
    if manifest.fields is None:
        raise ValueError("manifest carries no kernel fields")
    return [load_true_field(p) for p in manifest.fields]
