"""Multi-scale, multi-level, multi-input multi-output encoder-decoder.

Resolution map (``base_i = full / 2**(i-1)`` for scale ``i``):

* encoder/decoder block ``k`` of a level operates at ``base_i / 2**(k-1)``;
* the CDCR block and its kernel field sit at ``base_i / 4``;
* decoder block ``k`` taps its side image before upsampling, so restorations
  ``S[i, k]`` and residuals ``R[i, k]`` live at ``base_i / 2**(3-k)``.

One level network is shared by every scale; the two levels of a scale own
independent parameters.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .cdcr import CDCR
from .ops import bilinear_resize, conv2d, transposed_conv2d
from .pmpb import BlurKernelField

__all__ = [
    "ModelConfig",
    "ScaleIO",
    "ResBlock",
    "EnBlock",
    "DeBlock",
    "LevelNet",
    "CDCN",
    "build_model",
    "build_pyramid",
    "tier_size",
    "audit_resolutions",
    "format_audit",
]

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    scales: int = 3
    levels: int = 2
    blocks: int = 3
    base_channels: int = 32
    resblocks: int = 8
    n_points: int = 3
    m_points: int = 7
    mid_channels: int = 64
    in_channels: int = 3
    precision: str = "float32"
    cdcr: bool = True  # False: CDCN-NoCDCR (blur field kept, inverse path removed)
    mimo: bool = True  # False: CDCN-NoMIMO (single input / single output per scale)

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.levels not in (1, 2):
            raise ValueError("levels must be 1 or 2")
        if self.blocks != 3:
            raise ValueError("the published wiring needs exactly 3 blocks per level")
        if self.n_points < 1 or self.m_points < 1:
            raise ValueError("N and M must be >= 1")
        if min(self.base_channels, self.mid_channels, self.in_channels) < 1 or self.resblocks < 0:
            raise ValueError("channel counts must be positive and resblocks non-negative")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]

    @property
    def divisor(self) -> int:
        return 2 ** (self.scales - 1) * 4

    def widths(self) -> tuple[int, int, int]:
        c = self.base_channels
        return c, 2 * c, 4 * c

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScaleIO:
    """Everything one scale consumes and emits, keyed by block order ``k`` / level ``j``."""

    scale: int
    inputs: dict = field(default_factory=dict)        # k -> B[i, *, k]
    restorations: dict = field(default_factory=dict)  # k -> S[i, 1, k]
    residuals: dict = field(default_factory=dict)     # k -> R[i, 2, k]
    fields: dict = field(default_factory=dict)        # j -> BlurKernelField
    level1_sides: dict = field(default_factory=dict)  # k -> side input consumed by EB[i, 1, k]


def tier_size(full: int, scale: int, tier: int) -> int:
    """Extent of tier ``tier`` (1 = scale base) at ``scale`` for a ``full`` input extent."""
    return full // (2 ** (scale - 1)) // (2 ** (tier - 1))


def build_pyramid(image, scales: int = 3, tiers: int = 3) -> dict:
    """Bilinear downsamples of ``image`` keyed by (scale, tier)."""
    h, w = image.shape[-2:]
    div = 2 ** (scales - 1) * 2 ** (tiers - 1)
    if h % div or w % div:
        raise ValueError(f"extents {h}x{w} must be divisible by {div}")
    return {
        (i, k): bilinear_resize(image, tier_size(h, i, k), tier_size(w, i, k))
        for i in range(1, scales + 1)
        for k in range(1, tiers + 1)
    }


class Conv(nn.Module):
    def __init__(self, cin, cout, stride=1, kernel=3):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(cout, cin, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.weight.shape[-1] // 2)


class UpConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cin, cout, 4, 4))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return transposed_conv2d(x, self.weight, self.bias, stride=2)


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = Conv(channels, channels)
        self.conv2 = Conv(channels, channels)

    def forward(self, x):
        return x + self.conv2(torch.relu(self.conv1(x)))


class Embed(nn.Module):
    """Two-convolution embedding of an image-side input."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = Conv(cin, cout)
        self.conv2 = Conv(cout, cout)

    def forward(self, x):
        return self.conv2(torch.relu(self.conv1(x)))


class EnBlock(nn.Module):
    def __init__(self, k, side_channels, cin, cout, resblocks, with_side=True):
        super().__init__()
        self.k = k
        self.with_side = with_side or k == 1
        if k > 1:
            self.down = Conv(cin, cout, stride=2)
        if self.with_side:
            self.embed = Embed(side_channels, cout)
        if k > 1 and self.with_side:
            self.fuse = Conv(2 * cout, cout)
        self.body = nn.Sequential(*[ResBlock(cout) for _ in range(resblocks)])

    def forward(self, prev, side):
        if self.k == 1:
            x = self.embed(side)
        else:
            x = torch.relu(self.down(prev))
            if self.with_side:
                emb = self.embed(side)
                if emb.shape[-2:] != x.shape[-2:]:
                    raise ValueError(
                        f"EnBlock {self.k}: side input at {tuple(emb.shape[-2:])} but features at {tuple(x.shape[-2:])}"
                    )
                x = torch.relu(self.fuse(torch.cat([x, emb], dim=1)))
        return self.body(x)


class DeBlock(nn.Module):
    def __init__(self, k, cin, width, out_width, resblocks, out_channels=3, with_head=True):
        super().__init__()
        self.k = k
        if k > 1:
            self.fuse = Conv(cin, width)
        self.body = nn.Sequential(*[ResBlock(width) for _ in range(resblocks)])
        self.head = Conv(width, out_channels) if with_head else None
        self.up = UpConv(width, out_width) if k < 3 else None

    def forward(self, x):
        if self.k > 1:
            x = torch.relu(self.fuse(x))
        x = self.body(x)
        side = self.head(x) if self.head is not None else None
        if self.up is not None:
            x = self.up(x)
        return x, side


@dataclass
class LevelOutput:
    images: list
    cdcr_out: torch.Tensor
    field: BlurKernelField
    encoder_out: list


class LevelNet(nn.Module):
    """Three EnBlocks, one CDCR block and three DeBlocks."""

    def __init__(self, config: ModelConfig, side_channels: int):
        super().__init__()
        c1, c2, c3 = config.widths()
        r = config.resblocks
        mimo = config.mimo
        self.encoders = nn.ModuleList(
            [
                EnBlock(1, side_channels, side_channels, c1, r),
                EnBlock(2, side_channels, c1, c2, r, with_side=mimo),
                EnBlock(3, side_channels, c2, c3, r, with_side=mimo),
            ]
        )
        self.cdcr = CDCR(c3, config.n_points, config.m_points, config.mid_channels, inverse=config.cdcr)
        out = config.in_channels
        self.decoders = nn.ModuleList(
            [
                DeBlock(1, c3, c3, c2, r, out, with_head=mimo),
                DeBlock(2, c2 + c1 + c2 + c3, c2, c1, r, out, with_head=mimo),
                DeBlock(3, c1 + c1 + c2 + c3, c1, c1, r, out),
            ]
        )

    def forward(self, sides, cdcr_extra=None) -> LevelOutput:
        e1 = self.encoders[0](None, sides[0])
        e2 = self.encoders[1](e1, sides[1])
        e3 = self.encoders[2](e2, sides[2])
        f_in = e3 if cdcr_extra is None else e3 + cdcr_extra
        feats, field_ = self.cdcr(f_in)

        def at(t, ref):
            return bilinear_resize(t, *ref.shape[-2:])

        d1, img1 = self.decoders[0](feats)
        d2, img2 = self.decoders[1](torch.cat([d1, at(e1, d1), e2, at(e3, d1)], dim=1))
        _, img3 = self.decoders[2](torch.cat([d2, e1, at(e2, d2), at(e3, d2)], dim=1))
        return LevelOutput([img1, img2, img3], feats, field_, [e1, e2, e3])


class CDCN(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.in_channels
        if config.levels == 2:
            self.levels = nn.ModuleDict({"level1": LevelNet(config, c), "level2": LevelNet(config, 2 * c)})
        else:
            self.levels = nn.ModuleDict({"level1": LevelNet(config, 2 * c)})

    def level_parameter_sets(self) -> dict:
        return {name: [p for p in net.parameters()] for name, net in self.levels.items()}

    def forward(self, blurred) -> dict[int, ScaleIO]:
        return model_forward(self, blurred)


def _init_conv(weight, fan_in, gen):
    bound = math.sqrt(3.0 / fan_in)
    with torch.no_grad():
        weight.copy_(torch.rand(weight.shape, generator=gen, dtype=torch.float64).mul_(2 * bound).sub_(bound))


def build_model(config: ModelConfig, seed: int = 0) -> CDCN:
    """Allocate the shared level networks and initialize them deterministically.

    Convolutions draw from U(-sqrt(3/fan_in), sqrt(3/fan_in)); biases start at
    zero; side-output heads and CDCR kernel heads are zeroed so the initial
    network emits zero images and identity-like kernel fields.
    """
    model = CDCN(config)
    gen = torch.Generator().manual_seed(int(seed))
    for name, module in model.named_modules():
        if isinstance(module, Conv):
            fan_in = module.weight.shape[1] * module.weight.shape[2] * module.weight.shape[3]
            _init_conv(module.weight, fan_in, gen)
        elif isinstance(module, UpConv):
            fan_in = module.weight.shape[0] * module.weight.shape[2] * module.weight.shape[3] // 4
            _init_conv(module.weight, fan_in, gen)
        elif isinstance(module, nn.Conv2d):
            fan_in = module.weight.shape[1] * module.weight.shape[2] * module.weight.shape[3]
            _init_conv(module.weight, fan_in, gen)
            with torch.no_grad():
                module.bias.zero_()
    for module in model.modules():
        if isinstance(module, DeBlock) and module.head is not None:
            with torch.no_grad():
                module.head.weight.zero_()
                module.head.bias.zero_()
        elif isinstance(module, CDCR):
            module.reset_heads()
    return model.to(config.dtype)


def _up2(img):
    return bilinear_resize(img, img.shape[-2] * 2, img.shape[-1] * 2)


def model_forward(model: CDCN, blurred) -> dict[int, ScaleIO]:
    cfg = model.config
    if blurred.dim() != 4 or blurred.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(blurred.shape)}")
    h, w = blurred.shape[-2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ValueError(f"input extents {h}x{w} must be divisible by {cfg.divisor}")
    pyr = build_pyramid(blurred, cfg.scales)
    mimo = cfg.mimo
    results: dict[int, ScaleIO] = {}
    coarser = None
    for i in range(cfg.scales, 0, -1):
        io = ScaleIO(scale=i, inputs={k: pyr[i, k] for k in (1, 2, 3)})
        guided = []
        for k in (1, 2, 3):
            if k > 1 and not mimo:
                guided.append(None)
                continue
            b = pyr[i, k]
            guide = b if coarser is None else _up2(coarser.restorations[4 - k])
            guided.append(torch.cat([b, guide], dim=1))

        if cfg.levels == 2:
            down = model.levels["level2"](guided)
            io.fields[2] = down.field
            for k, img in enumerate(down.images, start=1):
                if img is not None:
                    io.residuals[k] = img
            sides = []
            for k in (1, 2, 3):
                if k > 1 and not mimo:
                    sides.append(None)
                    continue
                sides.append(pyr[i, k] + io.residuals[4 - k])
                io.level1_sides[k] = sides[-1]
            up = model.levels["level1"](sides, cdcr_extra=down.cdcr_out)
        else:
            up = model.levels["level1"](guided)
        io.fields[1] = up.field
        for k, img in enumerate(up.images, start=1):
            if img is not None:
                if not torch.isfinite(img).all():
                    raise FloatingPointError(f"non-finite restoration at scale {i}, block {k}")
                io.restorations[k] = img
        results[i] = io
        coarser = io
    return results


def audit_resolutions(config: ModelConfig, height: int = 64, width: int = 64) -> dict:
    """Tabulate operating resolutions of every block and check each fusion pair.

    Purely arithmetic: walks the wiring with extents only. Returns
    ``{"rows": [...], "mismatches": [...]}``; each row is
    ``(site, operand, (h, w), expected (h, w), ok)``.
    """
    rows = []
    mismatches = []

    def check(site, operand, got, want):
        ok = got == want
        rows.append((site, operand, got, want, ok))
        if not ok:
            mismatches.append((site, operand, got, want))

    def half(s):
        return (s[0] // 2, s[1] // 2)

    def dbl(s):
        return (s[0] * 2, s[1] * 2)

    if height % config.divisor or width % config.divisor:
        mismatches.append(("input", "extents", (height, width), f"divisible by {config.divisor}"))
        return {"rows": rows, "mismatches": mismatches}

    levels = (2, 1) if config.levels == 2 else (1,)
    restorations = {}
    for i in range(config.scales, 0, -1):
        base = (tier_size(height, i, 1), tier_size(width, i, 1))
        b = {k: (tier_size(height, i, k), tier_size(width, i, k)) for k in (1, 2, 3)}
        residuals = {}
        for j in levels:
            tag = f"scale{i}/level{j}"
            guided = j == 2 or config.levels == 1
            enc = {}
            for k in (1, 2, 3):
                if k > 1 and not config.mimo:
                    enc[k] = half(enc[k - 1])
                    check(f"{tag}/EB{k}", "stride-2 features", enc[k], b[k])
                    continue
                if guided:
                    if i == config.scales:
                        side = b[k]
                        check(f"{tag}/EB{k}", "self-concat B", side, b[k])
                    else:
                        side = dbl(restorations[i + 1][4 - k])
                        check(f"{tag}/EB{k}", f"S[{i + 1},1,{4 - k}] upsampled", side, b[k])
                else:
                    side = residuals[4 - k]
                    check(f"{tag}/EB{k}", f"R[{i},2,{4 - k}]", side, b[k])
                enc[k] = b[k] if k == 1 else half(enc[k - 1])
                if k > 1:
                    check(f"{tag}/EB{k}", "stride-2 features", enc[k], side)
            cdcr = enc[3]
            check(f"{tag}/CDCR", "kernel field", cdcr, (base[0] // 4, base[1] // 4))
            check(f"{tag}/CDCR", f"B[{i},{j},3] (reblur target)", b[3], cdcr)
            d1_side = cdcr
            d1_out = dbl(cdcr)
            # DB2 fuses DB1 out, EB1 out (down), EB2 out and EB3 out (up)
            check(f"{tag}/DB2", "DB1 out", d1_out, enc[2])
            check(f"{tag}/DB2", "EB1 out resized", half(enc[1]), enc[2])
            check(f"{tag}/DB2", "EB3 out resized", dbl(enc[3]), enc[2])
            d2_side = d1_out
            d2_out = dbl(d1_out)
            check(f"{tag}/DB3", "DB2 out", d2_out, enc[1])
            check(f"{tag}/DB3", "EB2 out resized", dbl(enc[2]), enc[1])
            check(f"{tag}/DB3", "EB3 out resized", dbl(dbl(enc[3])), enc[1])
            outs = {1: d1_side, 2: d2_side, 3: d2_out}
            for k in (1, 2, 3):
                want = (base[0] // 2 ** (3 - k), base[1] // 2 ** (3 - k))
                name = f"{'S' if j == 1 else 'R'}[{i},{j},{k}]"
                check(f"{tag}/DB{k}", f"{name} side image", outs[k], want)
            if j == 2:
                residuals = outs
            else:
                restorations[i] = outs
    return {"rows": rows, "mismatches": mismatches}


def format_audit(report: dict) -> str:
    lines = [f"{'site':<22} {'operand':<32} {'got':>10} {'expected':>10}  status"]
    for site, operand, got, want, ok in report["rows"]:
        lines.append(
            f"{site:<22} {operand:<32} {'x'.join(map(str, got)):>10} {'x'.join(map(str, want)):>10}  "
            f"{'ok' if ok else 'MISMATCH'}"
        )
    lines.append(f"mismatches: {len(report['mismatches'])}")
    return "\n".join(lines) + "\n"
