"""Command-line surface.

Subcommands: synth, fit, render, detect-peaks, eval-nme, ced, bench,
export-obj.  Every command accepts --bundle, --seed, and --config (a
key=value text file overriding fit/loss/camera settings).  Exit codes:
0 success, 2 validation failure, 3 fit divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import detect, evaluate, imgio, morphable, raster
from .assets import BundleError, load_bundle, save_bundle, synth_bundle
from .camera import Intrinsics
from .fitter import (
    FitConfig, FitDivergedError, NoFacesFoundError, Scene,
    fit_multiface, load_scene, save_scene, trace_to_csv,
)
from .losses import LossWeights

EXIT_VALIDATION = 2
EXIT_DIVERGED = 3


def parse_config_text(text: str) -> dict:
    """key = value lines; '#' comments; values parsed as bool/int/float/str."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip().strip('"').strip("'")
        low = value.lower()
        if low in ("true", "false"):
            parsed = low == "true"
        else:
            try:
                parsed = int(value)
            except ValueError:
                try:
                    parsed = float(value)
                except ValueError:
                    parsed = value
        out[key] = parsed
    return out


def load_configs(path: str | None) -> tuple[FitConfig, LossWeights, dict]:
    """Split a flat config dict into FitConfig / LossWeights / extras.

    Keys may be bare (stage2_iters=400) or prefixed (fit.stage2_iters=400,
    loss.lambda_pix=50).
    """
    cfg = FitConfig()
    weights = LossWeights()
    extras = {}
    if not path:
        return cfg, weights, extras
    flat = parse_config_text(Path(path).read_text())
    for key, value in flat.items():
        name = key.split(".", 1)[1] if "." in key else key
        scope = key.split(".", 1)[0] if "." in key else None
        if (scope in (None, "fit")) and hasattr(cfg, name):
            setattr(cfg, name, value)
        elif (scope in (None, "loss")) and hasattr(weights, name):
            setattr(weights, name, value)
        else:
            extras[key] = value
    return cfg, weights, extras


def _load_bundle_arg(args):
    return load_bundle(args.bundle)


def _intrinsics(w: int, h: int, extras: dict) -> Intrinsics:
    focal = extras.get("camera.focal_224", extras.get("focal_224"))
    if focal is not None:
        return Intrinsics.for_frame(w, h, float(focal))
    return Intrinsics.for_frame(w, h)


def _write_image(path: str, rgb: np.ndarray) -> None:
    if path.endswith(".png"):
        imgio.write_png(path, rgb)
    else:
        imgio.write_ppm(path, rgb)


def cmd_synth(args) -> int:
    bundle = _load_bundle_arg(args)
    _, _, extras = load_configs(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth = evaluate.synth_scene(args.seed, args.faces, (args.width, args.height), bundle)
    _write_image(str(out / f"image.{args.format}"), synth.image)
    imgio.write_mask(out / "skin.pgm", synth.skin_mask)
    for k in range(len(synth.scene.faces)):
        imgio.write_landmarks(out / f"landmarks_{k:02d}.txt", synth.landmarks[k])
    with open(out / "centers.txt", "w") as fh:
        for cx, cy in synth.centers:
            fh.write(f"{cx:.4f} {cy:.4f}\n")
    save_scene(out / "scene_gt.txt", synth.scene)
    hm = detect.build_gt_heatmap(synth.centers, (args.width, args.height))
    # a near-binary score map stands in for an externally predicted heatmap
    soft = np.clip(hm.grid, 0.02, 0.98)
    detect.save_heatmap(out / "heatmap.pgm", detect.Heatmap(soft, hm.stride))
    print(f"wrote {len(synth.scene.faces)}-face scene to {out}")
    return 0


def cmd_fit(args) -> int:
    bundle = _load_bundle_arg(args)
    cfg, weights, extras = load_configs(args.config)
    image = imgio.read_image(args.image)
    h, w = image.shape[:2]
    intr = _intrinsics(w, h, extras)
    skin = imgio.read_mask(args.skin) if args.skin else None

    if args.heatmap:
        source = detect.load_heatmap(args.heatmap)
    elif args.centers:
        source = [tuple(map(float, ln.split()[:2]))
                  for ln in Path(args.centers).read_text().splitlines() if ln.strip()]
    else:
        print("fit: need --heatmap or --centers", file=sys.stderr)
        return EXIT_VALIDATION

    landmarks = None
    if args.landmarks:
        pts = [imgio.read_landmarks(p)[0] for p in args.landmarks]
        landmarks = np.stack(pts)

    try:
        result = fit_multiface(image, source, landmarks, skin, bundle, intr, cfg, weights)
    except NoFacesFoundError as exc:
        print(f"fit: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FitDivergedError as exc:
        print(f"fit: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_scene(args.out, result.scene)
    if args.trace:
        Path(args.trace).write_text(trace_to_csv(result.stage1_trace + result.stage2_trace))
    print(
        f"fit {len(result.scene.faces)} face(s): total={result.breakdown.total:.6g} "
        f"pix={result.breakdown.pix:.6g} lan={result.breakdown.lan:.6g}"
    )
    return 0


def cmd_render(args) -> int:
    bundle = _load_bundle_arg(args)
    scene = load_scene(args.scene, bundle)
    out = raster.render_scene(scene, bundle, threads=args.threads)
    _write_image(args.out, out.rgb)
    if args.depth:
        imgio.write_depth_debug(args.depth, out.depth)
    if args.mask:
        imgio.write_mask(args.mask, out.mask)
    print(f"rendered {len(scene.faces)} face(s) to {args.out}")
    return 0


def cmd_detect_peaks(args) -> int:
    hm = detect.load_heatmap(args.heatmap)
    peaks = detect.extract_peaks(hm, args.threshold, args.max_faces)
    centers = detect.peaks_to_face_centers(peaks, hm.stride)
    print("row,col,score,c_x,c_y")
    for ((row, col), score), (cx, cy) in zip(peaks, centers):
        print(f"{row},{col},{score:.6f},{cx:.1f},{cy:.1f}")
    return 0


def cmd_eval_nme(args) -> int:
    bundle = _load_bundle_arg(args)
    fitted = load_scene(args.scene, bundle)
    gt_scene = load_scene(args.gt_scene, bundle) if args.gt_scene else None
    if args.gt_landmarks:
        gt_lms = np.stack([imgio.read_landmarks(p)[0] for p in args.gt_landmarks])
    elif gt_scene is not None:
        gt_lms = np.stack(
            [
                raster.shade_and_project(fp, bundle, gt_scene.intr)[0].verts[bundle.landmark_indices]
                for fp in gt_scene.faces
            ]
        )
    else:
        print("eval-nme: need --gt-landmarks or --gt-scene", file=sys.stderr)
        return EXIT_VALIDATION
    records = evaluate.evaluate_scene(fitted, gt_lms, bundle, gt_scene)
    lines = ["face,nme68,nme_dense,yaw_bucket"]
    for k, rec in enumerate(records):
        dense = "" if rec.nme_dense is None else f"{rec.nme_dense:.6f}"
        lines.append(f"{k},{rec.nme68:.6f},{dense},{rec.yaw_bucket}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_ced(args) -> int:
    errors = [
        float(tok)
        for ln in Path(args.errors).read_text().splitlines()
        for tok in ln.replace(",", " ").split()
        if tok
    ]
    if not errors:
        print("ced: no errors found in input", file=sys.stderr)
        return EXIT_VALIDATION
    hi = args.max_threshold if args.max_threshold else max(errors)
    grid = np.linspace(0.0, hi, args.steps)
    curve = evaluate.ced_curve(errors, grid)
    text = "threshold,fraction\n" + "\n".join(f"{t:.6f},{f:.6f}" for t, f in curve) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_bench(args) -> int:
    bundle = _load_bundle_arg(args)
    sizes = [int(tok) for tok in args.sizes.split(",")]
    rows = evaluate.bench_shared_decoder(
        sizes, bundle, (args.width, args.height), runs=args.runs, seed=args.seed
    )
    text = evaluate.bench_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_export_obj(args) -> int:
    bundle = _load_bundle_arg(args)
    scene = load_scene(args.scene, bundle)
    decoded = [morphable.decode(fp, bundle, scene.intr) for fp in scene.faces]
    morphable.export_obj(args.out, decoded, bundle, space=args.space)
    print(f"exported {len(decoded)} face(s) to {args.out}")
    return 0


def cmd_make_bundle(args) -> int:
    bundle = synth_bundle(args.seed, args.vertices)
    save_bundle(bundle, args.out)
    print(f"wrote synthetic bundle N={bundle.vertex_count} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facescene", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--bundle", help="MF3D bundle file", default=None)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key=value config file", default=None)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--faces", type=int, default=1)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", parents=[common], help="fit faces to an image")
    p.add_argument("--image", required=True)
    p.add_argument("--heatmap", default=None, help="16-bit PGM center heatmap")
    p.add_argument("--centers", default=None, help="text file of c_x c_y per face")
    p.add_argument("--landmarks", nargs="*", default=None, help="per-face landmark files")
    p.add_argument("--skin", default=None, help="skin mask image")
    p.add_argument("--out", required=True, help="output scene file")
    p.add_argument("--trace", default=None, help="loss trace CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", parents=[common], help="render a scene file")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help=".ppm or .png")
    p.add_argument("--depth", default=None, help="write depth debug PGM")
    p.add_argument("--mask", default=None, help="write coverage mask PGM")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("detect-peaks", parents=[common], help="extract heatmap peaks")
    p.add_argument("--heatmap", required=True)
    p.add_argument("--threshold", type=float, default=detect.DEFAULT_THRESHOLD)
    p.add_argument("--max-faces", type=int, default=32)
    p.set_defaults(func=cmd_detect_peaks)

    p = sub.add_parser("eval-nme", parents=[common], help="sparse/dense NME records")
    p.add_argument("--scene", required=True, help="fitted scene file")
    p.add_argument("--gt-scene", default=None)
    p.add_argument("--gt-landmarks", nargs="*", default=None)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_eval_nme)

    p = sub.add_parser("ced", parents=[common], help="cumulative error distribution")
    p.add_argument("--errors", required=True, help="file of NME values")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--max-threshold", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ced)

    p = sub.add_parser("bench", parents=[common], help="joint vs per-face cost")
    p.add_argument("--sizes", default="1,2,5,10")
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-obj", parents=[common], help="scene to Wavefront OBJ")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--space", choices=("camera", "model"), default="camera")
    p.set_defaults(func=cmd_export_obj)

    p = sub.add_parser("make-bundle", parents=[common], help="write a synthetic MF3D bundle")
    p.add_argument("--vertices", type=int, default=242)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_bundle)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (BundleError, FileNotFoundError, ValueError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FitDivergedError as exc:
        print(f"{args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
