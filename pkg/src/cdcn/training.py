"""Adam optimisation loop, learning-rate schedule and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import PairDataset, sample_patch
from .losses import LossConfig, compute_losses
from .metrics import evaluate
from .network import CDCN, ModelConfig, build_model

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "TrainLog",
    "NonFiniteError",
    "TrainingAborted",
    "adam_step",
    "lr_at_epoch",
    "ablated_configs",
    "train_run",
    "save_checkpoint",
    "load_checkpoint",
    "load_into",
    "configure_threads",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CDCN"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint=None, train_log=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.train_log = train_log


@dataclass
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-4
    decay: float = 0.5
    decay_every: int = 40
    epochs: int = 400
    batch_size: int = 8
    patch_size: int = 64
    seed: int = 0
    lam: float = 0.1
    no_reblur: bool = False
    no_cdcr: bool = False
    one_level: bool = False
    no_mimo: bool = False
    flip_prob: float = 0.5
    checkpoint_every: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("learning rate and epsilon must be positive")
        if self.decay_every < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("decay_every and batch_size must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.decay ** (epoch // config.decay_every)


def ablated_configs(train: TrainConfig, model: ModelConfig) -> tuple[ModelConfig, LossConfig]:
    """Fold the ablation flags into the model and loss configurations."""
    model = replace(
        model,
        cdcr=model.cdcr and not train.no_cdcr,
        levels=1 if train.one_level else model.levels,
        mimo=model.mimo and not train.no_mimo,
    )
    return model, LossConfig(lam=train.lam, reblur=not train.no_reblur)


def adam_step(params: dict, grads: dict, moments: dict, lr: float, step: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place. ``step`` counts from 1.

    ``moments`` maps each name to ``[m, v]`` and is created on first use.
    Raises :class:`NonFiniteError` before touching anything if a gradient is
    not finite.
    """
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"non-finite gradient for {name}")
    bc1 = 1 - beta1 ** step
    bc2 = 1 - beta2 ** step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if name not in moments:
                moments[name] = [torch.zeros_like(p), torch.zeros_like(p)]
            m, v = moments[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    step: int
    params: dict  # name -> tensor
    moments: dict = field(default_factory=dict)  # name -> [m, v]
    rng_state: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config["model"])

    def build(self) -> CDCN:
        model = build_model(self.model_config())
        load_into(model, self)
        return model


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    def totals(self) -> list[float]:
        return [r["total"] for r in self.records]


def _snapshot(model: CDCN, moments, epoch, step, config, rng) -> Checkpoint:
    params = {n: p.detach().clone() for n, p in model.named_parameters()}
    mom = {n: [m.clone(), v.clone()] for n, (m, v) in moments.items()}
    return Checkpoint(config, epoch, step, params, mom, rng.bit_generator.state)


def configure_threads() -> int:
    n = os.environ.get("CDCN_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))
    return torch.get_num_threads()


def train_run(train: TrainConfig, model_config: ModelConfig, data, checkpoint_dir=None, eval_data=None,
              on_backward: Callable | None = None, model: CDCN | None = None) -> tuple[Checkpoint, TrainLog]:
    """Train from scratch (or from ``model``) and return the final checkpoint and the log.

    ``on_backward(model, step)`` runs after each backward pass, before the
    optimizer step; tests use it to inspect gradients.
    """
    configure_threads()
    dataset = PairDataset.coerce(data)
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    mcfg, lcfg = ablated_configs(train, model_config)
    config = {"train": train.to_dict(), "model": mcfg.to_dict(), "loss": asdict(lcfg)}
    rng = np.random.default_rng(train.seed)
    if model is None:
        model = build_model(mcfg, seed=train.seed)
    model.train()
    params = dict(model.named_parameters())
    moments: dict = {}
    train_log = TrainLog()
    steps_per_epoch = max(1, math.ceil(len(dataset) / train.batch_size))
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_good = _snapshot(model, moments, 0, 0, config, rng)
    step = 0
    for epoch in range(train.epochs):
        lr = lr_at_epoch(train, epoch)
        for _ in range(steps_per_epoch):
            batch = sample_patch(dataset, train.patch_size, rng, train.batch_size, scales=mcfg.scales,
                                 flip_prob=train.flip_prob, dtype=mcfg.dtype)
            outputs = model(batch.blurred)
            losses = compute_losses(outputs, batch.sharp_pyramid, lcfg)
            total = losses.total
            if not bool(torch.isfinite(total)):
                if ckpt_dir:
                    save_checkpoint(ckpt_dir / "last_good.ckpt", last_good)
                raise TrainingAborted(f"non-finite loss at step {step + 1}", last_good, train_log)
            for p in params.values():
                p.grad = None
            total.backward()
            step += 1
            if on_backward is not None:
                on_backward(model, step)
            grads = {n: p.grad for n, p in params.items()}
            try:
                adam_step(params, grads, moments, lr, step, train.beta1, train.beta2, train.eps)
            except NonFiniteError as exc:
                if ckpt_dir:
                    save_checkpoint(ckpt_dir / "last_good.ckpt", last_good)
                raise TrainingAborted(str(exc), last_good, train_log) from exc
            for p in params.values():
                p.grad = None
            rec = {"step": step, "epoch": epoch, "lr": lr}
            rec.update(losses.as_floats())
            train_log.records.append(rec)
        if train.eval_every and eval_data is not None and (epoch + 1) % train.eval_every == 0:
            train_log.records[-1]["psnr"] = evaluate(model, eval_data).mean_psnr
            model.train()
        last_good = _snapshot(model, moments, epoch + 1, step, config, rng)
        if ckpt_dir and train.checkpoint_every and (epoch + 1) % train.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"epoch{epoch + 1:05d}.ckpt", last_good)
    final = _snapshot(model, moments, train.epochs, step, config, rng)
    if ckpt_dir:
        save_checkpoint(ckpt_dir / "final.ckpt", final)
        train_log.write(ckpt_dir / "train_log.jsonl")
    return final, train_log


# --- binary checkpoint ------------------------------------------------------
# CDCN | u32 version | u64 payload length | u32 crc32(payload) | payload
# payload: config json, epoch, step, (name, shape, float32 data)*, moments*, rng json


def _put_bytes(buf, data: bytes):
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _put_tensor(buf, t: torch.Tensor):
    arr = t.detach().cpu().to(torch.float32).numpy()
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.astype("<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ValueError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def bytes_(self):
        (n,) = self.unpack("<I")
        return self.take(n)

    def tensor(self):
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return torch.from_numpy(arr.copy())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    _put_bytes(buf, json.dumps(ckpt.config, sort_keys=True).encode())
    buf.write(struct.pack("<II", ckpt.epoch, ckpt.step))
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, t in ckpt.params.items():
        _put_bytes(buf, name.encode())
        _put_tensor(buf, t)
    buf.write(struct.pack("<I", len(ckpt.moments)))
    for name, (m, v) in ckpt.moments.items():
        _put_bytes(buf, name.encode())
        _put_tensor(buf, m)
        _put_tensor(buf, v)
    _put_bytes(buf, json.dumps(ckpt.rng_state, sort_keys=True).encode())
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQI", CHECKPOINT_VERSION, len(payload), zlib.crc32(payload)))
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CDCN checkpoint")
    if len(data) < 20:
        raise ValueError(f"{path}: checkpoint truncated")
    version, length, crc = struct.unpack("<IQI", data[4:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    payload = data[20:]
    if len(payload) != length:
        raise ValueError(f"{path}: integrity error, expected {length} payload bytes, found {len(payload)}")
    if zlib.crc32(payload) != crc:
        raise ValueError(f"{path}: integrity error, checksum mismatch")
    r = _Reader(payload)
    config = json.loads(r.bytes_())
    epoch, step = r.unpack("<II")
    (n,) = r.unpack("<I")
    params = {}
    for _ in range(n):
        name = r.bytes_().decode()
        params[name] = r.tensor()
    (n,) = r.unpack("<I")
    moments = {}
    for _ in range(n):
        name = r.bytes_().decode()
        moments[name] = [r.tensor(), r.tensor()]
    rng_state = json.loads(r.bytes_())
    return Checkpoint(config, epoch, step, params, moments, rng_state)


def load_into(model: CDCN, ckpt: Checkpoint) -> CDCN:
    """Copy checkpoint values into ``model``; the first mismatch is named in the error."""
    own = dict(model.named_parameters())
    for name, p in own.items():
        if name not in ckpt.params:
            raise ValueError(f"parameter {name!r} missing from checkpoint")
        if tuple(ckpt.params[name].shape) != tuple(p.shape):
            raise ValueError(
                f"parameter {name!r} has shape {tuple(ckpt.params[name].shape)} in checkpoint, model expects {tuple(p.shape)}"
            )
    for name in ckpt.params:
        if name not in own:
            raise ValueError(f"unknown parameter {name!r} in checkpoint")
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(ckpt.params[name].to(p.dtype))
    return model
