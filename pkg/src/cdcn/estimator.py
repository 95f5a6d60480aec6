"""scikit-learn style front end: ``CDCNDeblurrer().fit(blurred, sharp).predict(blurred)``."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import psnr, restore_image
from .network import ModelConfig
from .training import Checkpoint, TrainConfig, load_checkpoint, train_run

__all__ = ["CDCNDeblurrer", "check_image_batch", "check_paired_batches"]


def check_image_batch(X, name: str = "X", min_size: int = 1) -> np.ndarray:
    """Validate a batch of RGB images and return float64 ``(n, H, W, 3)`` in [0, 1].

    Accepts channels-last arrays (or a list of them); ``uint8`` input is
    rescaled by 1/255. A single ``(H, W, 3)`` image is promoted to a batch.
    """
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(x) for x in X])
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (n_images, height, width, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if min(X.shape[1:3]) < min_size:
        raise ValueError(f"{name} images must be at least {min_size}px, got {X.shape[1:3]}")
    if X.dtype == np.uint8:
        X = X.astype(np.float64) / 255.0
    else:
        X = X.astype(np.float64)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} must lie in [0, 1] (or be uint8)")
    return X


def check_paired_batches(X, y):
    X = check_image_batch(X, "X")
    y = check_image_batch(y, "y")
    if X.shape != y.shape:
        raise ValueError(f"blurred and sharp batches differ in shape: {X.shape} vs {y.shape}")
    return X, y


def _to_chw(X):
    return [torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))) for x in X]


class CDCNDeblurrer(TransformerMixin, BaseEstimator):
    """Blind single-image deblurring with a constrained deformable convolutional network.

    Parameters mirror the model and training configuration; the ablation
    switches (``no_reblur``, ``no_cdcr``, ``one_level``, ``no_mimo``) build the
    corresponding reduced variants.

    Attributes
    ----------
    checkpoint_ : Checkpoint
        Final weights and optimizer state.
    model_ : CDCN
        The trained network.
    train_log_ : TrainLog
        Per-step loss records.
    """

    def __init__(self, scales=3, levels=2, base_channels=32, resblocks=8, n_points=3, m_points=7,
                 mid_channels=64, lr=1e-4, epochs=400, decay_every=40, batch_size=8, patch_size=64,
                 lam=0.1, no_reblur=False, no_cdcr=False, one_level=False, no_mimo=False,
                 precision="float32", random_state=0):
        self.scales = scales
        self.levels = levels
        self.base_channels = base_channels
        self.resblocks = resblocks
        self.n_points = n_points
        self.m_points = m_points
        self.mid_channels = mid_channels
        self.lr = lr
        self.epochs = epochs
        self.decay_every = decay_every
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.lam = lam
        self.no_reblur = no_reblur
        self.no_cdcr = no_cdcr
        self.one_level = one_level
        self.no_mimo = no_mimo
        self.precision = precision
        self.random_state = random_state

    def _configs(self):
        model = ModelConfig(scales=self.scales, levels=self.levels, base_channels=self.base_channels,
                            resblocks=self.resblocks, n_points=self.n_points, m_points=self.m_points,
                            mid_channels=self.mid_channels, precision=self.precision)
        train = TrainConfig(lr=self.lr, epochs=self.epochs, decay_every=self.decay_every,
                            batch_size=self.batch_size, patch_size=self.patch_size, seed=self.random_state,
                            lam=self.lam, no_reblur=self.no_reblur, no_cdcr=self.no_cdcr,
                            one_level=self.one_level, no_mimo=self.no_mimo)
        return model, train

    def fit(self, X, y):
        """Train on blurred images ``X`` against sharp targets ``y`` (both ``(n, H, W, 3)``)."""
        X, y = check_paired_batches(X, y)
        model_cfg, train_cfg = self._configs()
        if min(X.shape[1:3]) < self.patch_size:
            raise ValueError(f"images smaller than patch_size={self.patch_size}")
        self.checkpoint_, self.train_log_ = train_run(train_cfg, model_cfg, (_to_chw(X), _to_chw(y)))
        self.model_ = self.checkpoint_.build()
        return self

    @classmethod
    def from_checkpoint(cls, ckpt) -> "CDCNDeblurrer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        m, t = ckpt.config["model"], ckpt.config["train"]
        est = cls(scales=m["scales"], levels=2 if t["one_level"] else m["levels"],
                  base_channels=m["base_channels"], resblocks=m["resblocks"], n_points=m["n_points"],
                  m_points=m["m_points"], mid_channels=m["mid_channels"], lr=t["lr"], epochs=t["epochs"],
                  decay_every=t["decay_every"], batch_size=t["batch_size"], patch_size=t["patch_size"],
                  lam=t["lam"], no_reblur=t["no_reblur"], no_cdcr=t["no_cdcr"], one_level=t["one_level"],
                  no_mimo=t["no_mimo"], precision=m["precision"], random_state=t["seed"])
        est.checkpoint_ = ckpt
        est.model_ = ckpt.build()
        return est

    def predict(self, X):
        """Restored images, float64 ``(n, H, W, 3)`` clipped to [0, 1]."""
        check_is_fitted(self, "model_")
        X = check_image_batch(X, "X")
        out = [restore_image(self.model_, x).clamp(0, 1)[0].numpy().transpose(1, 2, 0) for x in _to_chw(X)]
        return np.stack(out)

    def transform(self, X):
        return self.predict(X)

    def estimate_kernels(self, X, scale: int = 1, level: int = 2):
        """Blur-kernel fields predicted for each image at the given CDCN site."""
        check_is_fitted(self, "model_")
        X = check_image_batch(X, "X")
        cfg = self.model_.config
        if level > cfg.levels:
            level = cfg.levels
        fields = []
        with torch.no_grad():
            for x in _to_chw(X):
                out = self.model_(x[None].to(cfg.dtype))
                fields.append(out[scale].fields[level].detach())
        return fields

    def score(self, X, y):
        """Mean PSNR (dB) of the restorations against ``y``."""
        X, y = check_paired_batches(X, y)
        pred = self.predict(X)
        return float(np.mean([psnr(p.transpose(2, 0, 1), t.transpose(2, 0, 1)) for p, t in zip(pred, y)]))
