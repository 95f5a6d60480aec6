"""Command-line entry point: ``cdcn <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import fields as dc_fields
from pathlib import Path

import torch

log = logging.getLogger("cdcn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    """Bad command line or configuration."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; report them as validation errors instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag name -> value type; defaults come from the config dataclasses
_MODEL_FLAGS = {
    "scales": int, "base_channels": int, "resblocks": int, "n_points": int, "m_points": int,
    "mid_channels": int, "precision": str,
}
_TRAIN_FLAGS = {
    "epochs": int, "lr": float, "decay": float, "decay_every": int, "batch_size": int, "patch_size": int,
    "seed": int, "lam": float, "flip_prob": float, "checkpoint_every": int, "eval_every": int,
}
_ABLATIONS = {
    "no_reblur_loss": "no_reblur", "no_cdcr": "no_cdcr", "one_level": "one_level", "no_mimo": "no_mimo",
}


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--config", type=Path, help="JSON file with 'model' and 'train' sections")
    for name, typ in _MODEL_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), type=typ, default=argparse.SUPPRESS)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    for name, typ in _TRAIN_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), type=typ, default=argparse.SUPPRESS)
    a = p.add_argument_group("ablations")
    for flag in _ABLATIONS:
        a.add_argument("--" + flag.replace("_", "-"), action="store_true", default=argparse.SUPPRESS)


def _add_data_flags(p, split="train"):
    p.add_argument("--data", type=Path, required=True, help="dataset root (or a manifest.jsonl)")
    p.add_argument("--layout", choices=("flat-pairs", "gopro", "hide"), default="flat-pairs")
    p.add_argument("--split", default=split)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdcn", description="Blind deblurring with constrained deformable convolutions.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic blurred/sharp/kernel-field dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--family", action="append", choices=("linear", "polyline", "rotation"),
                   help="motion family (repeatable; default linear)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--max-displacement", type=float, default=5.0)
    p.add_argument("--samples", type=int, default=9, help="trajectory time samples")
    p.add_argument("--edge-width", type=float, default=0.75)
    p.add_argument("--shapes", type=int, default=14)
    p.add_argument("--sources", type=Path, nargs="*", help="sharp source images (default: procedural scenes)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    _add_data_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--eval-data", type=Path)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("deblur", help="restore images with a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--overlap", type=int, default=32)
    p.add_argument("images", type=Path, nargs="+")

    p = sub.add_parser("reblur", help="apply a stored kernel field to a sharp image")
    p.add_argument("--sharp", type=Path, required=True)
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="PSNR/SSIM of a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_data_flags(p, split="test")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--overlap", type=int, default=32)

    p = sub.add_parser("visualize-kernels", help="overlay estimated sampling points on an image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--level", type=int, default=2)
    p.add_argument("--upscale", type=int, default=4)

    p = sub.add_parser("audit", help="resolution-map audit of the architecture")
    _add_model_flags(p)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--op", action="append", help="restrict to these ops")
    p.add_argument("--out", type=Path)
    return parser


def resolve_config(args) -> dict:
    """Merge the config file with explicit flags; flags win, with a warning on conflicts."""
    from .network import ModelConfig
    from .training import TrainConfig

    resolved = {"model": ModelConfig().to_dict(), "train": TrainConfig().to_dict()}
    if getattr(args, "config", None) is not None:
        path = args.config
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from exc
        for section in loaded:
            if section not in resolved:
                raise UsageError(f"config file {path}: unknown section {section!r}")
            for key, value in loaded[section].items():
                if key not in resolved[section]:
                    raise UsageError(f"config file {path}: unknown field {section}.{key}")
                resolved[section][key] = value
        file_values = loaded
    else:
        file_values = {}
    given = vars(args)

    def override(section, key, value):
        old = file_values.get(section, {}).get(key)
        if old is not None and old != value:
            warnings.warn(f"flag overrides config file: {section}.{key} {old!r} -> {value!r}", stacklevel=3)
        resolved[section][key] = value

    for name in _MODEL_FLAGS:
        if name in given:
            override("model", name, given[name])
    for name in _TRAIN_FLAGS:
        if name in given:
            override("train", name, given[name])
    for flag, key in _ABLATIONS.items():
        if given.get(flag):
            override("train", key, True)
    return resolved


def _configs(resolved):
    from .network import ModelConfig
    from .training import TrainConfig

    names = {f.name for f in dc_fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in resolved["model"].items() if k in names}), TrainConfig(**resolved["train"])


def _write_config(out: Path, command: str, resolved: dict):
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, **resolved}
    (out / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _require_file(path: Path, what="input"):
    if not path.is_file():
        raise FileNotFoundError(f"{what} {path} does not exist")


def _dataset(args):
    from .data import DatasetManifest, PairDataset, load_pair_dataset

    path = args.data
    if path.is_file():
        return PairDataset(manifest=DatasetManifest.load(path))
    if (path / "manifest.jsonl").is_file() and args.layout == "flat-pairs":
        return PairDataset(manifest=DatasetManifest.load(path / "manifest.jsonl"))
    return PairDataset(manifest=load_pair_dataset(path, args.layout, args.split))


def _load_model(path: Path):
    from .training import load_checkpoint

    _require_file(path, "checkpoint")
    return load_checkpoint(path).build().eval()


def cmd_simulate(args):
    from .data import generate_synthetic_dataset

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    for src in args.sources or []:
        _require_file(src, "source image")
    families = tuple(args.family or ["linear"])
    resolved = {"simulate": {"count": args.count, "families": list(families), "size": args.size,
                             "max_displacement": args.max_displacement, "samples": args.samples,
                             "edge_width": args.edge_width, "shapes": args.shapes, "seed": args.seed,
                             "sources": [str(s) for s in args.sources or []]}}
    _write_config(args.out, "simulate", resolved)
    manifest = generate_synthetic_dataset(args.count, args.out, families, args.size, args.max_displacement,
                                          args.samples, args.seed, [str(s) for s in args.sources or []] or None,
                                          args.edge_width, args.shapes)
    print(f"wrote {len(manifest)} pairs to {args.out}")


def cmd_train(args):
    from .training import TrainingAborted, save_checkpoint, train_run

    resolved = resolve_config(args)
    model_cfg, train_cfg = _configs(resolved)
    data = _dataset(args)
    if len(data) == 0:
        raise UsageError(f"no training pairs under {args.data}")
    eval_data = None
    if args.eval_data is not None:
        ns = argparse.Namespace(data=args.eval_data, layout=args.layout, split="test")
        eval_data = _dataset(ns)
    _write_config(args.out, "train", resolved)
    try:
        ckpt, train_log = train_run(train_cfg, model_cfg, data, checkpoint_dir=args.out, eval_data=eval_data)
    except TrainingAborted as exc:
        if exc.checkpoint is not None:
            save_checkpoint(args.out / "last_good.ckpt", exc.checkpoint)
        if exc.train_log is not None:
            exc.train_log.write(args.out / "train_log.jsonl")
        raise
    last = train_log.records[-1]["total"] if train_log.records else float("nan")
    print(f"trained {ckpt.step} steps; final loss {last:.6f}; checkpoint {args.out / 'final.ckpt'}")


def cmd_deblur(args):
    from .data import read_image, write_image
    from .metrics import restore_image

    for img in args.images:
        _require_file(img)
    model = _load_model(args.checkpoint)
    _write_config(args.out, "deblur", {"deblur": {"checkpoint": str(args.checkpoint), "tile": args.tile,
                                                  "overlap": args.overlap, "images": [str(i) for i in args.images]}})
    for img in args.images:
        restored = restore_image(model, read_image(img), args.tile, args.overlap).clamp(0, 1)
        dest = args.out / (img.stem + "_deblurred.png")
        write_image(dest, restored[0])
        print(dest)


def cmd_reblur(args):
    from .data import read_image, write_image
    from .pmpb import field_from_taps, load_true_field, reblur

    _require_file(args.sharp, "sharp image")
    _require_file(args.field, "kernel field")
    sharp = read_image(args.sharp)
    taps = load_true_field(args.field)
    if taps.shape[:2] != tuple(sharp.shape[-2:]):
        raise UsageError(f"field {taps.shape[:2]} does not match image {tuple(sharp.shape[-2:])}")
    blurred = reblur(sharp[None], field_from_taps(taps))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_image(args.out, blurred[0].clamp(0, 1))
    (args.out.parent / (args.out.stem + "_config.json")).write_text(
        json.dumps({"command": "reblur", "sharp": str(args.sharp), "field": str(args.field)}, indent=2) + "\n")
    print(args.out)


def cmd_evaluate(args):
    from .metrics import evaluate

    model = _load_model(args.checkpoint)
    data = _dataset(args)
    _write_config(args.out, "evaluate", {"evaluate": {"checkpoint": str(args.checkpoint), "data": str(args.data),
                                                      "layout": args.layout, "split": args.split}})
    report = evaluate(model, data, model_id=str(args.checkpoint), tile=args.tile, overlap=args.overlap)
    (args.out / "report.txt").write_text(report.table())
    (args.out / "report.jsonl").write_text(report.to_jsonl())
    print(report.table(), end="")


def cmd_visualize(args):
    from .data import read_image
    from .metrics import export_kernel_overlay

    _require_file(args.image)
    model = _load_model(args.checkpoint)
    cfg = model.config
    if not 1 <= args.scale <= cfg.scales or not 1 <= args.level <= cfg.levels:
        raise UsageError(f"site (scale {args.scale}, level {args.level}) outside the model's "
                         f"{cfg.scales} scales x {cfg.levels} levels")
    image = read_image(args.image)
    h, w = image.shape[-2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise UsageError(f"image {h}x{w} must be a multiple of {cfg.divisor}")
    with torch.no_grad():
        out = model(image[None].to(cfg.dtype))
    fld = out[args.scale].fields[args.level]
    shown = out[args.scale].inputs[1][0].double()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    points = export_kernel_overlay(shown, fld, args.stride, args.out, args.upscale)
    print(f"{len(points)} markers -> {args.out}")


def cmd_audit(args):
    from .network import audit_resolutions, format_audit

    resolved = resolve_config(args)
    model_cfg, _ = _configs(resolved)
    report = audit_resolutions(model_cfg, args.size, args.size)
    text = format_audit(report)
    if args.out is not None:
        _write_config(args.out, "audit", {"model": resolved["model"]})
        (args.out / "audit.txt").write_text(text)
    print(text, end="")
    return EXIT_OK if not report["mismatches"] else EXIT_RUNTIME


def cmd_gradcheck(args):
    from .gradcheck import GRAD_SUITE, run_suite

    known = {name for name, _, _ in GRAD_SUITE}
    for op in args.op or []:
        if op not in known:
            raise UsageError(f"unknown op {op!r}; choose from {sorted(known)}")
    reports = run_suite(args.instances, args.seed, args.op)
    text = "".join(r.line() + "\n" for r in reports)
    if args.out is not None:
        _write_config(args.out, "gradcheck", {"gradcheck": {"instances": args.instances, "seed": args.seed,
                                                            "ops": args.op}})
        (args.out / "gradcheck.txt").write_text(text)
    print(text, end="")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_RUNTIME


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "deblur": cmd_deblur,
    "reblur": cmd_reblur,
    "evaluate": cmd_evaluate,
    "visualize-kernels": cmd_visualize,
    "audit": cmd_audit,
    "gradcheck": cmd_gradcheck,
}


def run_cli(argv=None) -> int:
    from .training import configure_threads

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.simplefilter("always", UserWarning)
    configure_threads()
    try:
        code = COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime failure
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
