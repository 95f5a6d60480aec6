"""Central-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch.func import functional_call

from . import ops
from .cdcr import (
    CDCR,
    InverseKernelField,
    apply_inverse_kernels,
    predict_blur_kernels,
    predict_inverse_kernels,
)
from .pmpb import BlurKernelField, reblur, warp

__all__ = ["GradCheckReport", "NonSmoothInputError", "grad_check", "GRAD_SUITE", "run_suite"]


class NonSmoothInputError(ValueError):
    """Raised when an input sits on a point where the op is not differentiable."""


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.op:<24} max rel err {self.max_rel_error:.3e}  (tol {self.tolerance:.0e})"


def grad_check(fn: Callable, inputs: Sequence[torch.Tensor], tolerance: float = 1e-5, step: float = 1e-5,
               name: str | None = None, kink: Callable | None = None, seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of ``fn(*inputs)`` with central differences.

    The output is reduced to a scalar by a fixed random projection. Only
    inputs with ``requires_grad`` are checked. Relative error per element is
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``kink(inputs)`` may flag inputs on a
    non-differentiable point, which raises :class:`NonSmoothInputError`.
    """
    name = name or getattr(fn, "__name__", "op")
    for x in inputs:
        if x.dtype != torch.float64:
            raise TypeError("grad_check needs float64 inputs")
    if kink is not None and kink(inputs):
        raise NonSmoothInputError(f"{name}: input lies on a non-differentiable point")

    with torch.no_grad():
        out = _flatten_output(fn(*inputs))
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def objective(*args):
        return (_flatten_output(fn(*args)) * proj).sum()

    checked = [x for x in inputs if x.requires_grad]
    value = objective(*inputs)
    if not torch.isfinite(value):
        raise FloatingPointError(f"{name}: non-finite output")
    analytic = torch.autograd.grad(value, checked, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for x, g in zip(checked, analytic):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                # difference elementwise before projecting; summing first loses digits to cancellation
                flat[idx] = orig + step
                plus = _flatten_output(fn(*inputs)).clone()  # ops may return their input unchanged
                flat[idx] = orig - step
                minus = _flatten_output(fn(*inputs)).clone()
                flat[idx] = orig
                numeric = (((plus - minus) * proj).sum() / (2 * step)).item()
                a = g.view(-1)[idx].item()
                if not (np.isfinite(numeric) and np.isfinite(a)):
                    raise FloatingPointError(f"{name}: non-finite gradient at element {idx}")
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
    return GradCheckReport(name, worst, tolerance, worst <= tolerance)


def _flatten_output(out):
    if isinstance(out, torch.Tensor):
        return out.reshape(-1)
    return torch.cat([_flatten_output(o) for o in out])


# ---------------------------------------------------------------------------
# Randomized instances for every differentiable op. Each sampler returns
# (fn, inputs) with inputs bounded away from non-smooth points.


def _r(gen, *shape, grad=True, scale=1.0):
    return (torch.randn(shape, generator=gen, dtype=torch.float64) * scale).requires_grad_(grad)


def _off_lattice(gen, *shape, span=2.0):
    """Offsets whose fractional part stays in [0.2, 0.8] (away from bilinear kinks)."""
    whole = torch.randint(-int(span), int(span) + 1, shape, generator=gen).double()
    frac = 0.2 + 0.6 * torch.rand(shape, generator=gen, dtype=torch.float64)
    return (whole + frac).requires_grad_()


def _s_conv(gen):
    cin, cout = int(torch.randint(1, 4, (1,), generator=gen)), int(torch.randint(1, 4, (1,), generator=gen))
    stride = int(torch.randint(1, 3, (1,), generator=gen))
    x = _r(gen, 1, cin, 5, 6)
    return (lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=1)), [x, _r(gen, cout, cin, 3, 3), _r(gen, cout)]


def _s_tconv(gen):
    cin, cout = int(torch.randint(1, 4, (1,), generator=gen)), int(torch.randint(1, 4, (1,), generator=gen))
    return (lambda x, w, b: ops.transposed_conv2d(x, w, b, stride=2)), [
        _r(gen, 1, cin, 3, 3), _r(gen, cin, cout, 4, 4), _r(gen, cout)
    ]


def _s_prelu(gen):
    x = _r(gen, 1, 3, 4, 4, grad=False)
    x = (x.sign() * (x.abs() + 0.1)).requires_grad_()
    return ops.prelu, [x, (torch.rand(3, generator=gen, dtype=torch.float64)).requires_grad_()]


def _s_softmax(gen):
    return (lambda x: ops.channel_softmax(x, (1, 4))), [_r(gen, 1, 5, 3, 3, scale=2.0)]


def _s_resize(gen):
    h, w = int(torch.randint(2, 6, (1,), generator=gen)), int(torch.randint(2, 6, (1,), generator=gen))
    th, tw = int(torch.randint(2, 8, (1,), generator=gen)), int(torch.randint(2, 8, (1,), generator=gen))
    return (lambda x: ops.bilinear_resize(x, th, tw)), [_r(gen, 1, 2, h, w)]


def _s_fft(gen):
    return ops.fft2, [_r(gen, 1, 2, 4, 5)]


def _s_warp(gen):
    img = _r(gen, 1, 2, 6, 6)
    return warp, [img, _off_lattice(gen, 1, 2, 6, 6)]


def _s_reblur(gen):
    n = int(torch.randint(1, 4, (1,), generator=gen))
    img = _r(gen, 1, 2, 5, 5)
    off = _off_lattice(gen, 1, 2 * n, 5, 5)
    w = torch.rand(1, n, 5, 5, generator=gen, dtype=torch.float64).requires_grad_()
    return (lambda s, o, w: reblur(s, BlurKernelField(o, w))), [img, off, w]


def _s_inverse(gen):
    m = int(torch.randint(1, 4, (1,), generator=gen))
    feats = _r(gen, 1, 3, 5, 5)
    off = _off_lattice(gen, 1, 2 * m, 5, 5)
    w = _r(gen, 1, m, 5, 5)
    return (lambda f, o, w: apply_inverse_kernels(f, InverseKernelField(o, w))), [feats, off, w]


def _near_lattice(pos, margin):
    frac = pos - torch.floor(pos)
    return bool(((frac < margin) | (frac > 1 - margin)).any())


def _cdcr_near_kink(block, f_in, margin=1e-3):
    """True when a PReLU input or an inverse sampling position is within ``margin`` of a kink."""
    with torch.no_grad():
        fld = predict_blur_kernels(f_in, block)
        if bool((fld.offsets.abs() < margin).any()):
            return True
        hidden = torch.cat([ops.prelu(fld.offsets, block.prelu1), fld.weights], dim=1)
        hidden = ops.conv2d(hidden, block.conv2.weight, block.conv2.bias, padding=1)
        if bool((hidden.abs() < margin).any()):
            return True
        inv = predict_inverse_kernels(fld, block)
        h, w = f_in.shape[-2:]
        xs = torch.arange(w, dtype=f_in.dtype).view(1, 1, 1, w)
        ys = torch.arange(h, dtype=f_in.dtype).view(1, 1, h, 1)
        px = xs + inv.offsets[:, 0::2]
        py = ys + inv.offsets[:, 1::2]
        return _near_lattice(px, margin) or _near_lattice(py, margin)


def _s_cdcr(gen):
    while True:
        with torch.random.fork_rng():
            torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
            block = CDCR(2, n_points=2, m_points=2, mid_channels=3).double()
        with torch.no_grad():
            block.conv3.bias.add_(torch.randn(block.conv3.bias.shape, generator=gen, dtype=torch.float64))
        f_in = _r(gen, 1, 2, 4, 4)
        if not _cdcr_near_kink(block, f_in):
            break
    names = ("conv1.weight", "conv2.weight", "conv3.weight", "prelu1")
    params = [dict(block.named_parameters())[n].detach().clone().requires_grad_() for n in names]

    def fn(f, *ps):
        feats, fld = functional_call(block, dict(zip(names, ps)), (f,))
        return feats, fld.weights

    return fn, [f_in, *params]


# (name, sampler, tolerance); linear ops get the tighter bound
GRAD_SUITE = [
    ("conv2d", _s_conv, 1e-6),
    ("transposed_conv2d", _s_tconv, 1e-6),
    ("prelu", _s_prelu, 1e-4),
    ("channel_softmax", _s_softmax, 1e-4),
    ("bilinear_resize", _s_resize, 1e-6),
    ("fft2", _s_fft, 1e-6),
    ("warp", _s_warp, 1e-4),
    ("reblur", _s_reblur, 1e-4),
    ("apply_inverse_kernels", _s_inverse, 1e-4),
    ("cdcr_forward", _s_cdcr, 1e-4),
]


def run_suite(instances: int = 20, seed: int = 0, names: Sequence[str] | None = None) -> list[GradCheckReport]:
    """Run every registered op on ``instances`` random inputs; one report per op (worst case)."""
    gen = torch.Generator().manual_seed(seed)
    reports = []
    for name, sampler, tol in GRAD_SUITE:
        if names and name not in names:
            continue
        worst = 0.0
        for _ in range(instances):
            fn, inputs = sampler(gen)
            rep = grad_check(fn, inputs, tolerance=tol, name=name)
            worst = max(worst, rep.max_rel_error)
        reports.append(GradCheckReport(name, worst, tol, worst <= tol))
    return reports
