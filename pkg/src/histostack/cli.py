"""Command-line interface.

Every subcommand ends by printing a single JSON object to stdout (the exit
summary) so wrapping scripts can parse results without scraping logs.
Errors print a JSON object with status "error" and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from histostack import __version__
from histostack.brs import partition_stack, select_brs, write_brs_csv
from histostack.cam import read_cam_csv
from histostack.features import edgeness_map, entropy, write_feature_pgm
from histostack.imageio import read_image, write_image
from histostack.pipeline import (
    RunConfig,
    StackManifest,
    run_evaluate,
    run_reconstruct,
)
from histostack.phantom import PhantomSpec, generate, save_ground_truth, write_stack
from histostack.register import register_affine, register_lags, register_rigid
from histostack.standardize import (
    ScaleConfig,
    load_scale,
    save_scale,
    standardize_image,
    train_scale,
)
from histostack.transform import (
    Affine2D,
    format_affine,
    parse_affine,
    write_field,
)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _load_stack(manifest_path):
    manifest = StackManifest.load(manifest_path)
    return manifest, [read_image(p) for p in manifest.paths()]


def _cmd_train_std(args) -> dict:
    if args.manifest:
        _, images = _load_stack(args.manifest)
    else:
        images = [read_image(p) for p in args.images]
    config = ScaleConfig(args.s1, args.s2, args.pc1, args.pc2)
    scale = train_scale(images, config)
    save_scale(args.out, scale)
    return {
        "out": str(args.out),
        "images": len(images),
        "mu_s": scale.mu_s,
        "s1": scale.s1,
        "s2": scale.s2,
    }


def _cmd_standardize(args) -> dict:
    scale = load_scale(args.scale)
    if args.manifest:
        if not args.out_dir:
            raise ValueError("--manifest requires --out-dir")
        manifest, images = _load_stack(args.manifest)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for (_, src), img in zip(manifest.entries, images):
            dst = out_dir / (src.stem + ".pgm")
            write_image(dst, standardize_image(img, scale))
            paths.append(dst)
        StackManifest.write(out_dir / "manifest.txt", paths)
        return {"out_dir": str(out_dir), "images": len(paths)}
    if not args.input or not args.output:
        raise ValueError("need input and output paths (or --manifest/--out-dir)")
    img = standardize_image(read_image(args.input), scale)
    write_image(args.output, img)
    return {"output": str(args.output), "max_gray": img.max_gray}


def _cmd_features(args) -> dict:
    img = read_image(args.input)
    fm = edgeness_map(img, args.r_f)
    summary = {"input": str(args.input), "entropy_bits": entropy(img), "r_f": args.r_f}
    if args.out:
        write_feature_pgm(args.out, fm)
        summary["out"] = str(args.out)
    return summary


def _cmd_select_brs(args) -> dict:
    manifest, images = _load_stack(args.manifest)
    cfg = RunConfig().with_overrides(brs_mode=args.brs_mode)
    scale = None
    if args.scale:
        scale = load_scale(args.scale)
        images = [standardize_image(img, scale) for img in images]
    report = select_brs(images, cfg.registration_config(scale), cfg.brs_mode)
    if args.out:
        write_brs_csv(args.out, [report], partition_stack(len(images), len(images)))
    return {
        "chosen": report.chosen,
        "max_entropy_slice": report.j_star,
        "mode": report.mode,
        "out": str(args.out) if args.out else None,
    }


def _cmd_register_pair(args) -> dict:
    source = read_image(args.source)
    target = read_image(args.target)
    scale = load_scale(args.scale) if args.scale else None
    cfg = RunConfig().with_overrides(
        pyramid_levels=args.pyramid_levels,
        lags_block_size=args.block_size,
    ).registration_config(scale)
    if args.mode == "lags":
        init = Affine2D.identity()
        if args.init:
            with open(args.init) as fh:
                init = parse_affine(fh.read())
        result = register_lags(source, target, init, cfg)
        write_field(args.out, result.transform)
    else:
        registrar = register_rigid if args.mode == "rigid" else register_affine
        result = registrar(source, target, cfg)
        with open(args.out, "w") as fh:
            fh.write(format_affine(result.transform) + "\n")
    return {
        "mode": args.mode,
        "out": str(args.out),
        "final_mse": result.final_mse,
        "iterations": result.iterations_used,
        "converged": result.converged,
    }


def _cmd_reconstruct(args) -> dict:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = dict(
        output_dir=args.out,
        mode=args.mode,
        brs_mode=args.brs_mode,
        subvolume_size=args.subvolume_size,
        jobs=args.jobs,
    )
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _coerce_config_value(key.strip(), value.strip())
    cfg = cfg.with_overrides(**overrides)
    manifest = StackManifest.load(args.manifest)
    out = run_reconstruct(manifest, cfg)
    return {
        "out": str(out),
        "mode": cfg.mode,
        "slices": len(manifest),
        "aligned_manifest": str(out / "aligned" / "manifest.txt"),
    }


def _coerce_config_value(key: str, value: str):
    default = getattr(RunConfig, key, None)
    if default is None and key not in RunConfig.__dataclass_fields__:
        raise ValueError(f"unknown config key {key!r}")
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def _cmd_evaluate_cam(args) -> dict:
    cfg = RunConfig().with_overrides(
        output_dir=args.out,
        jobs=args.jobs,
        cam_window=args.window,
        cam_search_radius=args.search_radius,
        cam_grid_spacing=args.grid_spacing,
        cam_tau=args.tau,
    )
    manifest = StackManifest.load(args.manifest)
    baseline = read_cam_csv(args.baseline) if args.baseline else None
    result = run_evaluate(manifest, cfg, baseline)
    return {
        "out": str(Path(args.out) / "cam.csv"),
        "mean": result.mean,
        "std": result.std,
        "slices": len(manifest),
    }


def _cmd_phantom(args) -> dict:
    distortions = []
    for item in args.distort or []:
        parts = item.split(":")
        if len(parts) != 3:
            raise ValueError(f"--distort expects slice:kind:magnitude, got {item!r}")
        distortions.append((int(parts[0]), parts[1], float(parts[2])))
    spec = PhantomSpec(
        width=args.width,
        height=args.height,
        slice_count=args.slices,
        seed=args.seed,
        ellipse_count=args.ellipses,
        drift=args.drift,
        max_rotation_deg=args.max_rotation,
        max_translation=args.max_translation,
        scale_range=(args.scale_min, args.scale_max),
        max_shear=args.max_shear,
        elastic_amplitude=args.elastic_amplitude,
        elastic_period=args.elastic_period,
        gain_range=(args.gain_min, args.gain_max),
        bias_range=(args.bias_min, args.bias_max),
        distortions=tuple(distortions),
    )
    images, truth = generate(spec)
    manifest = write_stack(args.out, images)
    if not args.no_ground_truth:
        save_ground_truth(args.out, truth)
    return {
        "out": str(args.out),
        "manifest": manifest,
        "slices": len(images),
        "seed": args.seed,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histostack",
        description="Reconstruct a smooth 3D volume from serial section images.",
    )
    parser.add_argument("--version", action="version", version=f"histostack {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-std", help="train an intensity standardization scale")
    p.add_argument("images", nargs="*", help="training image files")
    p.add_argument("--manifest", help="stack manifest to train from")
    p.add_argument("--out", required=True, help="output scale file")
    p.add_argument("--s1", type=int, default=1, help="standard scale minimum (default 1)")
    p.add_argument("--s2", type=int, default=4095, help="standard scale maximum (default 4095)")
    p.add_argument("--pc1", type=float, default=0.0, help="lower percentile (default 0)")
    p.add_argument("--pc2", type=float, default=99.8, help="upper percentile (default 99.8)")
    p.set_defaults(func=_cmd_train_std)

    p = sub.add_parser("standardize", help="map images onto a trained standard scale")
    p.add_argument("input", nargs="?", help="input image")
    p.add_argument("output", nargs="?", help="output image")
    p.add_argument("--scale", required=True, help="trained scale file")
    p.add_argument("--manifest", help="standardize a whole stack instead")
    p.add_argument("--out-dir", help="output directory for --manifest")
    p.set_defaults(func=_cmd_standardize)

    p = sub.add_parser("features", help="edgeness map and entropy of an image")
    p.add_argument("input")
    p.add_argument("--out", help="output edgeness PGM (with .scale sidecar)")
    p.add_argument("--r-f", type=float, default=3.0, help="edgeness disk radius (default 3)")
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("select-brs", help="select the best reference slice of a stack")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scale", help="standardize inputs with this scale first")
    p.add_argument("--brs-mode", choices=("scored", "max_entropy"), default="scored")
    p.add_argument("--out", help="write the selection evidence CSV here")
    p.set_defaults(func=_cmd_select_brs)

    p = sub.add_parser("register-pair", help="register one slice to another")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--mode", choices=("rigid", "affine", "lags"), default="affine")
    p.add_argument("--out", required=True, help="output transform file (.laf for lags)")
    p.add_argument("--init", help="affine init file for lags mode")
    p.add_argument("--scale", help="re-standardize warps with this scale")
    p.add_argument("--pyramid-levels", type=int, default=None)
    p.add_argument("--block-size", type=int, default=None, help="lags block size")
    p.set_defaults(func=_cmd_register_pair)

    p = sub.add_parser("reconstruct", help="run the full reconstruction pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--mode", choices=("rigid", "affine", "lags"), default=None)
    p.add_argument("--brs-mode", choices=("scored", "max_entropy"), default=None)
    p.add_argument("--subvolume-size", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("evaluate-cam", help="alignment-smoothness evaluation of a stack")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--baseline", help="cam.csv of a baseline run to compare against")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--window", type=int, default=None, help="match window (default 21)")
    p.add_argument("--search-radius", type=int, default=None)
    p.add_argument("--grid-spacing", type=int, default=None)
    p.add_argument("--tau", type=float, default=None, help="confidence threshold")
    p.set_defaults(func=_cmd_evaluate_cam)

    p = sub.add_parser("phantom", help="generate a synthetic stack with ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slices", type=int, default=10)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--ellipses", type=int, default=3)
    p.add_argument("--drift", type=float, default=0.10)
    p.add_argument("--max-rotation", type=float, default=0.0, help="degrees")
    p.add_argument("--max-translation", type=float, default=0.0, help="pixels")
    p.add_argument("--scale-min", type=float, default=1.0)
    p.add_argument("--scale-max", type=float, default=1.0)
    p.add_argument("--max-shear", type=float, default=0.0)
    p.add_argument("--elastic-amplitude", type=float, default=0.0, help="pixels")
    p.add_argument("--elastic-period", type=float, default=96.0, help="pixels")
    p.add_argument("--gain-min", type=float, default=1.0)
    p.add_argument("--gain-max", type=float, default=1.0)
    p.add_argument("--bias-min", type=float, default=0.0)
    p.add_argument("--bias-max", type=float, default=0.0)
    p.add_argument(
        "--distort",
        action="append",
        metavar="SLICE:KIND:MAGNITUDE",
        help="inject tear/hole/noise on a slice (repeatable)",
    )
    p.add_argument("--no-ground-truth", action="store_true")
    p.set_defaults(func=_cmd_phantom)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _emit({"command": args.command, "status": "error", "error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return 1
    summary.update({"command": args.command, "status": "ok"})
    _emit(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
