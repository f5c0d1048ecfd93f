"""Command-line entry point: extruflow pattern|measure|identify|optimize|simulate|plot."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .dynamics import WidthProfile
from .gcode import GCodeError, format_toolpath, parse_gcode
from .pipeline import (ConfigError, ProjectConfig, identify, measure_pattern, optimize_toolpath,
                       simulate_toolpath)
from .sysid import (PatternGeometry, generate_corner_pattern, generate_extrusion_pattern, load_model,
                    parse_annotations, save_model)

log = logging.getLogger("extruflow")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _dump_json(data, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _config(args) -> ProjectConfig:
    if args.config is None:
        return ProjectConfig()
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    return ProjectConfig.load(path)


def _read_gcode(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"G-code file {p} not found")
    return parse_gcode(p.read_text())


def _read_model(path):
    if path is None:
        raise UsageError("--model is required")
    if not Path(path).is_file():
        raise UsageError(f"model file {path} not found")
    return load_model(path)


def _read_profiles(paths) -> dict[int, WidthProfile]:
    out = {}
    for i, p in enumerate(paths, start=1):
        if not Path(p).is_file():
            raise UsageError(f"profile {p} not found")
        out[i] = WidthProfile.from_csv(Path(p))
    return out


def _profile_runs(groups, pattern, flag: str) -> list[dict[int, WidthProfile]]:
    n = len(parse_annotations(pattern))
    for group in groups:
        if len(group) != n:
            raise UsageError(f"{flag} takes one CSV per pattern line: expected {n}, got {len(group)}")
    return [_read_profiles(group) for group in groups]


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return Path(args.out)


def cmd_pattern(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    if args.kind == "extrusion":
        tp = generate_extrusion_pattern(cfg.xi_low, cfg.xi_high, cfg.target_speed, PatternGeometry())
    else:
        ext, corner, _ = _read_model(args.model)
        zeta = cfg.w_nominal / ext.alpha
        tp = generate_corner_pattern(zeta, cfg.target_speed,
                                     expected_d_tr=corner.d_tr if corner is not None else None)
    out.write_text(format_toolpath(tp))
    print(f"wrote {args.kind} pattern to {out}")
    return EXIT_OK


def cmd_measure(args) -> int:
    from .vision import load_corner_file, load_image, measure_image, save_image
    from .vision.pipeline import VisionConfig

    cfg = _config(args)
    vcfg = VisionConfig.from_dict(cfg.vision)
    if not vcfg.rois:
        raise UsageError("config lists no ROIs under vision.rois")
    src = Path(args.image)
    if not src.is_file():
        raise UsageError(f"image {src} not found")
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    image = load_image(src)
    corners = load_corner_file(args.corners, vcfg.rows, vcfg.cols) if args.corners else None
    result = measure_image(image, vcfg, corners, blurry=args.blurry, method=args.method)
    summary = {"pixel_scale_mm": result.homography.pixel_scale, "homography_rms_px": result.homography.rms,
               "warnings": list(result.homography.warnings), "rois": {}}
    for name, m in sorted(result.rois.items()):
        m.profile.to_csv(out / f"{name}.csv")
        summary["rois"][name] = {"method": m.method, "blurry": m.blurry, "threshold": m.threshold,
                                 "mean_width_mm": float(np.mean(m.profile.w)), "warnings": m.warnings}
        print(f"{name}: {m.method}, mean width {np.mean(m.profile.w):.4f} mm, {len(m.profile)} samples")
    save_image(result.rectified, out / "rectified.png")
    _dump_json(summary, out / "measure.json")
    return EXIT_OK


def cmd_identify(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    if not args.profiles:
        raise UsageError("give the extrusion pattern profiles with --profiles")
    pattern = _read_gcode(args.pattern)
    runs = _profile_runs(args.profiles, pattern, "--profiles")
    corner_runs = corner_pattern = None
    if args.corner_profiles:
        if args.corner_pattern is None:
            raise UsageError("--corner-profiles needs --corner-pattern")
        corner_pattern = _read_gcode(args.corner_pattern)
        corner_runs = _profile_runs(args.corner_profiles, corner_pattern, "--corner-profiles")
    result = identify(runs, pattern, cfg, corner_runs, corner_pattern)
    save_model(out, result.extrusion, result.corner, result.provenance)
    sys.stdout.write(result.to_text())
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    tp = _read_gcode(args.input)
    ext, corner, _ = _read_model(args.model)
    text, report = optimize_toolpath(tp, ext, corner, cfg)
    out.write_text(text)
    _dump_json(report.to_dict(), out.with_name(out.name + ".json"))
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    tp = _read_gcode(args.input)
    ext, corner, _ = _read_model(args.model)
    if args.measure:
        cfg.noise_std = cfg.noise_std if args.noise is None else args.noise
        profiles = measure_pattern(tp, ext, corner, cfg, seed=args.seed)
        out.mkdir(parents=True, exist_ok=True)
        for idx, prof in sorted(profiles.items()):
            prof.to_csv(out / f"line{idx}.csv")
        print(f"wrote {len(profiles)} profiles to {out}")
        return EXIT_OK
    target = _read_gcode(args.target) if args.target else None
    report = simulate_toolpath(tp, ext, corner, cfg, target)
    metrics = report.metrics()
    metrics["warnings"] = report.warnings
    xs, ws, offset = [], [], 0.0
    for reg in report.regions:
        xs.append(reg.profile.x + offset)
        ws.append(reg.profile.w)
        offset = xs[-1][-1] + cfg.step  # regions laid end to end with a gap
    if xs:
        WidthProfile(np.concatenate(xs), np.concatenate(ws)).to_csv(out)
    else:
        out.write_text("x_mm,w_mm\n")
    _dump_json(metrics, out.with_name(out.name + ".json"))
    for key in sorted(metrics):
        if key != "warnings":
            print(f"{key}: {metrics[key]}")
    for w in report.warnings:
        print(f"warning: {w}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_profiles

    out = _require_out(args)
    profiles = []
    for p in args.profiles:
        if not Path(p).is_file():
            raise UsageError(f"profile {p} not found")
        profiles.append(WidthProfile.from_csv(Path(p)))
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.profiles]
    if len(labels) != len(profiles):
        raise UsageError("one label per profile is required")
    img, _ = plot_profiles(profiles, labels)
    img.save(out, format="PNG")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="project configuration JSON")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int, default=0, help="random seed for simulated measurement")

    parser = argparse.ArgumentParser(prog="extruflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pattern", parents=[common], help="write a calibration pattern")
    p.add_argument("kind", choices=["extrusion", "corner"])
    p.add_argument("--model", help="model file (corner pattern needs alpha)")
    p.set_defaults(func=cmd_pattern)

    p = sub.add_parser("measure", parents=[common], help="width profiles from a photo")
    p.add_argument("image")
    p.add_argument("--corners", help="CSV of board corners in pixels, bypasses detection")
    p.add_argument("--blurry", choices=["on", "off", "auto"], default="auto")
    p.add_argument("--method", choices=["kmeans", "gmm"], help="force one segmentation method")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("identify", parents=[common], help="fit model parameters")
    p.add_argument("--pattern", required=True, help="extrusion pattern G-code")
    p.add_argument("--profiles", nargs="+", action="append",
                   help="one CSV per pattern line, in line order; repeat for more prints")
    p.add_argument("--corner-pattern", help="corner pattern G-code")
    p.add_argument("--corner-profiles", nargs="+", action="append")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("optimize", parents=[common], help="rewrite G-code with optimal extrusion")
    p.add_argument("input")
    p.add_argument("--model")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("simulate", parents=[common], help="simulate bead widths")
    p.add_argument("input")
    p.add_argument("--model")
    p.add_argument("--target", help="source G-code whose ratios define the intended widths")
    p.add_argument("--measure", action="store_true",
                   help="treat input as a calibration pattern and write noisy per-line profiles")
    p.add_argument("--noise", type=float, help="measurement noise std in mm (overrides config)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plot", parents=[common], help="overlay width profiles as PNG")
    p.add_argument("profiles", nargs="+")
    p.add_argument("--labels", help="comma-separated legend labels")
    p.set_defaults(func=cmd_plot)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("EXTRUFLOW_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    from .vision.checkerboard import DetectionError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"extruflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DetectionError as exc:
        # no usable board in the photo: the user has to supply corners
        print(f"extruflow: detection error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GCodeError, ValueError, RuntimeError, OSError) as exc:
        print(f"extruflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
