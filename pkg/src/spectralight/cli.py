"""Command-line entry point wiring all stages of the probe pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio, hybrid, pipeline, simulator, spectra, spotdetect, spotmatch
from .simulator import MAX_FIBERS
from .spotmatch import MatchConfig


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--scene", choices=["plane", "cylinder", "heightfield"], default="plane")
    p.add_argument("--spots", type=int, default=171)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise-sigma", type=float, default=0.0, help="pixel noise sigma (intensity units)")
    p.add_argument("--dropout", type=float, default=0.0, help="spot dropout fraction")
    p.add_argument("--out-dir", type=Path, default=Path("out"))


def _add_match_flags(p: argparse.ArgumentParser):
    p.add_argument("--detector", choices=["fcn", "baseline"], default="baseline")
    p.add_argument("--model", type=Path, default=None, help="FCN checkpoint (.npz)")
    p.add_argument("--epipolar-band", type=float,
                   default=MatchConfig().epipolar_band_halfwidth)
    p.add_argument("--threshold", type=float, default=None,
                   help="descriptor distance threshold (default: auto-calibrated)")


def _check_common(args):
    if not (1 <= args.spots <= MAX_FIBERS):
        raise StageError("config", f"--spots must be in [1, {MAX_FIBERS}]")
    if not (0.0 <= args.dropout <= 1.0):
        raise StageError("config", "--dropout must be in [0, 1]")
    if args.noise_sigma < 0:
        raise StageError("config", "--noise-sigma must be non-negative")


def _noise(args) -> simulator.NoiseModel:
    return simulator.NoiseModel(pixel_noise_sigma=args.noise_sigma,
                                spot_dropout_fraction=args.dropout,
                                spectral_noise_sigma=args.noise_sigma)


def _match_config(args) -> MatchConfig:
    return MatchConfig(distance_threshold=args.threshold,
                       epipolar_band_halfwidth=args.epipolar_band)


def _load_model(args):
    if args.detector == "fcn":
        if args.model is None:
            raise StageError("config", "--detector fcn requires --model")
        return spotdetect.load_checkpoint(args.model)
    return None


def _write_manifest(out_dir: Path, args, outputs):
    manifest = {
        "command": sys.argv[1] if len(sys.argv) > 1 else "",
        "args": {k: str(v) for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _setup(args, colored=False):
    return pipeline.make_setup(args.scene, n_spots=args.spots, seed=args.seed, colored=colored)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args):
    _check_common(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    setup = _setup(args)
    outputs = []
    for k in range(args.frames):
        frame = simulator.render_frame(setup.pattern, setup.scene, setup.bundle,
                                       noise=_noise(args), seed=args.seed + k,
                                       spot_sigma=setup.spot_sigma)
        png = args.out_dir / f"frame_{k:03d}.png"
        pfm = args.out_dir / f"frame_{k:03d}.pfm"
        truth = args.out_dir / f"truth_{k:03d}.json"
        fileio.write_png(png, frame.image)
        fileio.write_pfm(pfm, frame.image)
        truth.write_text(frame.truth_to_json())
        outputs += [png, pfm, truth]
    calib = args.out_dir / "calibration.json"
    calib.write_text(setup.bundle.to_json())
    refpng = args.out_dir / "reference.png"
    fileio.write_png(refpng, setup.reference_image)
    outputs += [calib, refpng]
    outputs.append(_write_manifest(args.out_dir, args, outputs))
    print(f"wrote {len(outputs)} files to {args.out_dir}")


def cmd_train(args):
    _check_common(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    dataset = simulator.make_training_set(n_base=args.base_images,
                                          augmentations=args.augmentations,
                                          seed=args.seed)
    model = spotdetect.FCNModel(base_dim=args.base_dim, seed=args.seed)
    config = spotdetect.TrainConfig(coarse_iters=args.coarse_iters, fine_iters=args.fine_iters,
                                    seed=args.seed, base_dim=args.base_dim)
    try:
        model, curve = spotdetect.train_fcn(model, dataset, config)
    except spotdetect.TrainingDiverged as exc:
        raise StageError("train", str(exc))
    ckpt = args.out_dir / "checkpoint.npz"
    log = args.out_dir / "training_log.csv"
    spotdetect.save_checkpoint(ckpt, model)
    spotdetect.save_loss_curve(log, curve)
    _write_manifest(args.out_dir, args, [ckpt, log])
    print(f"trained {len(curve)} iterations; final loss {curve[-1][1]:.4f}")


def _frame_image(args, setup, k=0):
    if args.image is not None:
        path = str(args.image)
        return fileio.read_pfm(path) if path.endswith(".pfm") else fileio.read_png(path)
    frame = simulator.render_frame(setup.pattern, setup.scene, setup.bundle,
                                   noise=_noise(args), seed=args.seed + k,
                                   spot_sigma=setup.spot_sigma)
    return frame.image


def cmd_detect(args):
    _check_common(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    setup = _setup(args)
    image = _frame_image(args, setup)
    det = pipeline.detect(image, detector=args.detector, model=_load_model(args))
    out = args.out_dir / "detections.csv"
    with open(out, "w") as f:
        f.write("x,y,score,r,g,b\n")
        for c, s, rgb in zip(det.centers, det.scores, det.rgb):
            f.write(f"{c[0]:.4f},{c[1]:.4f},{s:.6g},{rgb[0]:.4f},{rgb[1]:.4f},{rgb[2]:.4f}\n")
    _write_manifest(args.out_dir, args, [out])
    print(f"{len(det)} spots detected -> {out}")


def cmd_match(args):
    _check_common(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    setup = _setup(args)
    image = _frame_image(args, setup)
    detections, matches = pipeline.match_frame(image, setup, config=_match_config(args),
                                               detector=args.detector, model=_load_model(args))
    out = args.out_dir / "matches.csv"
    matches.to_csv(out)
    _write_manifest(args.out_dir, args, [out])
    print(f"{len(matches.active())} active matches -> {out}")


def cmd_reconstruct(args):
    _check_common(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    setup = _setup(args)
    image = _frame_image(args, setup)
    detections, matches = pipeline.match_frame(image, setup, config=_match_config(args),
                                               detector=args.detector, model=_load_model(args))
    surface = hybrid.reconstruct(matches, detections, setup.reference_spots, setup.bundle)
    if surface.empty:
        raise StageError("reconstruct", "no matches to triangulate")
    frame = hybrid.HybridFrame(surface=surface)
    ply = args.out_dir / "surface.ply"
    csvp = args.out_dir / "surface.csv"
    hybrid.export_ply(frame, ply)
    hybrid.export_csv(frame, csvp)
    _write_manifest(args.out_dir, args, [ply, csvp])
    print(f"{len(surface.points)} points ({surface.dropped} dropped) -> {ply}")


def cmd_spectra(args):
    _check_common(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    setup = _setup(args, colored=True)
    refl, sto2, rgb, fiber_map = pipeline.hyperspectral_products(setup, noise=_noise(args),
                                                                 seed=args.seed)
    outputs = []
    for band in sorted(refl):
        p = args.out_dir / f"spectrum_band_{band:03d}.csv"
        refl[band].to_csv(p)
        outputs.append(p)
    report = args.out_dir / "sto2_report.csv"
    spectra.sto2_report_csv(report, sto2)
    outputs.append(report)
    _write_manifest(args.out_dir, args, outputs)
    print(f"{len(refl)} spectra, {sum(r.accepted for r in sto2.values())} accepted StO2 fits -> {args.out_dir}")


def cmd_pipeline(args):
    _check_common(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    setup = _setup(args, colored=not args.skip_spectra)
    try:
        frame, detections, matches, hf, timer = pipeline.run_hybrid_frame(
            setup, noise=_noise(args), seed=args.seed, config=_match_config(args),
            detector=args.detector, model=_load_model(args),
            with_spectra=not args.skip_spectra,
        )
    except Exception as exc:  # surface stage context
        raise StageError("pipeline", str(exc))
    if hf.surface.empty:
        raise StageError("reconstruct", "empty surface; nothing to export")
    ply = args.out_dir / "hybrid.ply"
    csvp = args.out_dir / "hybrid.csv"
    timing = args.out_dir / "timing.txt"
    hybrid.export_ply(hf, ply)
    hybrid.export_csv(hf, csvp)
    timing.write_text(timer.report() + "\n")
    _write_manifest(args.out_dir, args, [ply, csvp, timing])
    print(timer.report())
    print(f"{len(hf.surface.points)} surface points -> {ply}")


def cmd_evaluate(args):
    _check_common(args)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    setup = _setup(args)
    model = _load_model(args)
    rows = []
    for k in range(args.frames):
        frame = simulator.render_frame(setup.pattern, setup.scene, setup.bundle,
                                       noise=_noise(args), seed=args.seed + k,
                                       spot_sigma=setup.spot_sigma)
        detections, matches = pipeline.match_frame(frame.image, setup,
                                                   config=_match_config(args),
                                                   detector=args.detector, model=model)
        truth_map, annotated = spotmatch.truth_correspondences(detections.centers, frame)
        rows.append(spotmatch.evaluate_matching(matches, truth_map, annotated))
    report = args.out_dir / "evaluation.json"
    report.write_text(spotmatch.evaluation_report_json(rows))
    _write_manifest(args.out_dir, args, [report])
    doc = json.loads(report.read_text())
    print(f"frames={doc['frames']} "
          f"sensitivity={doc['sensitivity']['mean']:.3f}±{doc['sensitivity']['sd']:.3f} "
          f"precision={doc['precision']['mean']:.3f}±{doc['precision']['sd']:.3f}")
    if any(r["degenerate"] for r in rows):
        print("warning: degenerate frames (empty predictions or no annotations)", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectralight",
                                     description="Structured-light + hyperspectral probe pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render synthetic frames with ground truth")
    _add_common(p)
    p.add_argument("--frames", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the FCN spot detector on synthetic data")
    _add_common(p)
    p.add_argument("--base-images", type=int, default=17)
    p.add_argument("--augmentations", type=int, default=8)
    p.add_argument("--base-dim", type=int, default=8)
    p.add_argument("--coarse-iters", type=int, default=300)
    p.add_argument("--fine-iters", type=int, default=150)
    p.set_defaults(func=cmd_train)

    for name, fn, help_text in [
        ("detect", cmd_detect, "detect spots in a frame"),
        ("match", cmd_match, "match detected spots to the reference image"),
        ("reconstruct", cmd_reconstruct, "triangulate matched spots"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        _add_match_flags(p)
        p.add_argument("--image", type=Path, default=None,
                       help="input frame (PNG or PFM); default: render one")
        p.set_defaults(func=fn)

    p = sub.add_parser("spectra", help="simulate + process a hyperspectral exposure")
    _add_common(p)
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("pipeline", help="end-to-end hybrid reconstruction")
    _add_common(p)
    _add_match_flags(p)
    p.add_argument("--skip-spectra", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("evaluate", help="Table-style matching validation over frames")
    _add_common(p)
    _add_match_flags(p)
    p.add_argument("--frames", type=int, default=10)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"[{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
