"""Command-line front end: ``fafnet prepare|train|fuse|evaluate|diagnose|gradcheck``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import DatasetConfig, discover_pairs, load_manifest, prepare_dataset, read_image, synthetic_pairs, write_image
from .errors import FafnetError
from .losses import HfsConfig
from .metrics import aggregate, diagnostics, format_reports, reports_csv, write_pgm, write_ppm
from .model import ModelConfig, load_checkpoint
from .train import TrainConfig, bicubic_fuser, evaluate, fuse, train_manifest

_MODEL_KEYS = {"bands", "channels", "cb_depth", "wavelet", "patch_size"}
_HFS_KEYS = {"hfs_hidden": "hidden", "hfs_dim": "dim"}


def read_config(path) -> dict[str, str]:
    """Parse a UTF-8 ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def build_configs(settings: dict[str, str]) -> tuple[TrainConfig, ModelConfig]:
    """Turn flat string settings into training and model configs; unknown keys are errors."""
    desk = settings.pop("desk", "false").lower() in ("1", "true", "yes", "on")
    base_t = TrainConfig.desk() if desk else TrainConfig()
    base_m = ModelConfig()
    t_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    t_kw, m_kw, h_kw = {}, {}, {}
    for key, value in settings.items():
        if key in t_fields:
            t_kw[key] = _coerce(value, getattr(base_t, key))
        elif key in _MODEL_KEYS:
            m_kw[key] = _coerce(value, getattr(base_m, key))
        elif key in _HFS_KEYS:
            h_kw[_HFS_KEYS[key]] = int(value)
        else:
            raise ValueError(f"unknown setting {key!r}")
    tcfg = dataclasses.replace(base_t, **t_kw)
    mcfg = base_m.with_(seed=tcfg.seed, hfs=HfsConfig(lam=tcfg.lam, **h_kw), **m_kw)
    return tcfg, mcfg


def cmd_prepare(args) -> int:
    cfg = DatasetConfig(
        ratio=args.ratio, sigma=args.sigma, stride=args.stride, bit_depth=args.bit_depth, seed=args.seed,
        ms_patch=args.patch // args.ratio, pan_patch=args.patch,
    )
    if args.synthetic:
        pairs = synthetic_pairs(args.synthetic, args.pan_size, args.bands, args.seed, args.bit_depth)
    else:
        if args.input_dir is None:
            raise ValueError("prepare needs --input-dir or --synthetic N")
        pairs = discover_pairs(args.input_dir, args.bit_depth)
    manifest = prepare_dataset(pairs, args.output_dir, cfg)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(pairs)} pairs to {args.output_dir} {counts}")
    return 0


def cmd_train(args) -> int:
    settings = read_config(args.config) if args.config else {}
    for key in ("lr", "batch", "epochs", "beta", "variant", "seed", "channels", "checkpoint_every"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = str(value)
    if args.desk:
        settings["desk"] = "true"
    if args.augment:
        settings["augment"] = "true"
    tcfg, mcfg = build_configs(settings)
    manifest = load_manifest(args.manifest)
    resume = load_checkpoint(args.resume) if args.resume else None
    bands = manifest.load(manifest.pairs[0], "ms").shape[2]
    mcfg = mcfg.with_(bands=bands, patch_size=manifest.config.pan_patch)
    result = train_manifest(tcfg, manifest, mcfg, args.out_dir, resume=resume)
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} steps; last {json.dumps(last)}; checkpoint {result.checkpoint}")
    if result.best_checkpoint is not None:
        print(f"lowest validation MAE at epoch {result.best_epoch + 1}: {result.best_checkpoint}")
    return 0


def cmd_fuse(args) -> int:
    ms, pan = read_image(args.ms), read_image(args.pan)
    out = fuse(args.checkpoint, ms, pan)
    write_image(args.output, out)
    print(f"wrote {args.output} {out.shape}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.baseline == "bicubic":
        reports = evaluate(None, manifest, args.mode, args.split, fuser=bicubic_fuser)
    elif args.checkpoint:
        reports = evaluate(args.checkpoint, manifest, args.mode, args.split)
    else:
        raise ValueError("evaluate needs --checkpoint or --baseline bicubic")
    print(format_reports(reports))
    if args.csv:
        Path(args.csv).write_text(reports_csv(reports), encoding="utf-8")
    if args.json:
        Path(args.json).write_text(json.dumps({k: list(v) for k, v in aggregate(reports).items()}), encoding="utf-8")
    return 0


def cmd_diagnose(args) -> int:
    fused, ref = read_image(args.fused), read_image(args.reference)
    spec, aem = diagnostics(fused, ref, args.vmax)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "spectrum.pgm", spec)
    write_ppm(out / "aem.ppm", aem)
    print(f"wrote {out / 'spectrum.pgm'} and {out / 'aem.ppm'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(n_coords=args.coords, seed=args.seed)
    ok = True
    for name, report in results.items():
        passed = report.passed(args.tol)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: max rel error {report.max_rel_error:.2e} over {report.n_checked}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fafnet", description="Frequency-aware pansharpening toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="simulate reduced-resolution pairs and write a manifest")
    p.add_argument("--input-dir")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--patch", type=int, default=64, help="PAN patch size")
    p.add_argument("--bit-depth", type=int, default=11)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synthetic", type=int, default=0, metavar="N", help="generate N procedural scenes")
    p.add_argument("--pan-size", type=int, default=512)
    p.add_argument("--bands", type=int, default=4)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on a prepared manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--desk", action="store_true", help="desk-scale defaults")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--variant", choices=("baseline", "fixed_haar", "no_hfs"))
    p.add_argument("--seed", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--augment", action="store_true", help="random dihedral flips and rotations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="pansharpen one MS/PAN pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ms", required=True)
    p.add_argument("--pan", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="score a checkpoint or baseline on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=("bicubic",))
    p.add_argument("--mode", choices=("reduced", "full"), default="reduced")
    p.add_argument("--split", default="test")
    p.add_argument("--csv")
    p.add_argument("--json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="write FFT spectrum and absolute-error maps")
    p.add_argument("--fused", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--vmax", type=float)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--coords", type=int, default=40)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FafnetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
