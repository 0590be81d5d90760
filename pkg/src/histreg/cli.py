"""Command-line front end: register, evaluate, sweep, info.

Exit codes: 0 ok, 2 input error, 3 registration failure (best-so-far
artifacts are still written), 4 internal invariant violation. The
``HISTREG_THREADS`` environment variable provides the default for
``--threads``.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import HistregError, InvalidInputError, StageFailedError
from .image import Image, Pyramid, load_pyramid, load_raster, save_png, to_gray_inverted
from .evaluation import (LandmarkSet, compute_metrics, load_landmarks_csv,
                         report_csv_header, report_csv_row, report_to_json,
                         resolution_sweep, write_tre_tsv)
from .pipeline import PipelineConfig, register, stage_levels, _as_pyramid, _prealign_levels
from .transforms import DisplacementGrid, load_field, save_field, save_field_text

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_STAGE = 3
EXIT_INTERNAL = 4


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n")
    os.replace(tmp, path)


def _load_input(path_str: str, spacing: float):
    """An input is either a raster file or a pyramid directory with a manifest."""
    path = Path(path_str)
    if path.is_dir():
        return load_pyramid(path)
    raster = load_raster(path)
    return to_gray_inverted(raster, spacing=spacing), raster


def _normalize_raster(raster: np.ndarray) -> np.ndarray:
    if np.issubdtype(raster.dtype, np.integer):
        return raster.astype(np.float64) / np.iinfo(raster.dtype).max
    return np.clip(raster.astype(np.float64), 0.0, 1.0)


def _warp_raster(raster: np.ndarray, reference: Image, grid: DisplacementGrid) -> np.ndarray:
    """Resample the original template through y: out(x) = template(y(x)).

    Channels are sampled via the inverted-intensity trick so the black
    background extension of Image turns into the white background of the
    original stain space.
    """
    arr = _normalize_raster(raster)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    centers = reference.pixel_centers()
    warped_pts = grid.apply(centers)
    out = np.empty((reference.height, reference.width, arr.shape[2]))
    for c in range(arr.shape[2]):
        inv = Image(1.0 - arr[:, :, c], spacing=reference.spacing, origin=reference.origin)
        out[:, :, c] = (1.0 - inv.sample(warped_pts)).reshape(reference.height,
                                                              reference.width)
    return out[:, :, 0] if out.shape[2] == 1 else out


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InvalidInputError(f"no such config file: {path}")
        try:
            cfg = PipelineConfig.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"malformed config {path}: {exc}") from exc
    overrides = {}
    if getattr(args, "finest_resolution", None) is not None:
        overrides["finest_resolution"] = args.finest_resolution
    if getattr(args, "alpha", None) is not None:
        overrides["alpha"] = args.alpha
    if getattr(args, "epsilon", None) is not None:
        overrides["ngf_epsilon"] = args.epsilon
    if getattr(args, "rotations", None) is not None:
        overrides["n_rotations"] = args.rotations
    if getattr(args, "grid_nodes", None) is not None:
        try:
            m1, m2 = (int(v) for v in args.grid_nodes.lower().split("x"))
        except ValueError:
            raise InvalidInputError(
                f"--grid-nodes expects M1xM2, got {args.grid_nodes!r}") from None
        overrides["grid_nodes"] = (m1, m2)
    threads = getattr(args, "threads", None)
    if threads is None and os.environ.get("HISTREG_THREADS"):
        try:
            threads = int(os.environ["HISTREG_THREADS"])
        except ValueError:
            raise InvalidInputError(
                f"HISTREG_THREADS must be an integer, got {os.environ['HISTREG_THREADS']!r}"
            ) from None
    if threads is not None:
        overrides["threads"] = threads
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    return cfg.updated(**overrides) if overrides else cfg


def _ladder_info(result) -> dict:
    return {name: [{"level": lv.level, "spacing": lv.spacing,
                    "shape": list(lv.shape), "seconds": round(lv.seconds, 6)}
                   for lv in stage.levels]
            for name, stage in result.stages.items()}


def cmd_register(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "histreg", "version": __version__, "command": "register",
        "started": _now(),
        "inputs": {"reference": args.reference, "template": args.template,
                   "spacing": args.spacing},
        "status": "running", "artifacts": {},
    }
    manifest_path = out_dir / "manifest.json"

    def finish(status, exit_code):
        manifest["status"] = status
        manifest["exit_code"] = exit_code
        manifest["finished"] = _now()
        _write_json_atomic(manifest_path, manifest)
        return exit_code

    try:
        cfg = _config_from_args(args)
        manifest["config"] = cfg.to_dict()
        ref = _load_input(args.reference, args.spacing)
        tmpl = _load_input(args.template, args.spacing)
    except (HistregError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return finish("input_error", EXIT_INPUT)

    ref_img = ref.base if isinstance(ref, Pyramid) else ref[0]
    tmpl_raster = None if isinstance(tmpl, Pyramid) else tmpl[1]
    ref_input = ref if isinstance(ref, Pyramid) else ref[0]
    tmpl_input = tmpl if isinstance(tmpl, Pyramid) else tmpl[0]

    exit_code = EXIT_OK
    try:
        result = register(ref_input, tmpl_input, cfg)
    except StageFailedError as exc:
        print(f"registration failure: {exc}", file=sys.stderr)
        result = getattr(exc, "partial_result", None)
        if result is None:
            return finish("stage_failed", EXIT_STAGE)
        exit_code = EXIT_STAGE
    except HistregError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return finish("input_error", EXIT_INPUT)

    field_path = out_dir / "deformation.field"
    save_field(field_path, result.deformable)
    save_field_text(out_dir / "deformation.txt", result.deformable)
    transform_path = out_dir / "transform.json"
    _write_json_atomic(transform_path, {
        "rigid": {"phi": result.rigid.phi, "t1": result.rigid.t1, "t2": result.rigid.t2},
        "affine": {k: getattr(result.affine, k)
                   for k in ("a11", "a12", "a21", "a22", "b1", "b2")},
        "prealign": {"initial_angle": result.prealign.initial_angle,
                     "initial_value": result.prealign.initial_value,
                     "final_value": result.prealign.final_value},
    })
    artifacts = {"field": str(field_path), "field_text": str(out_dir / "deformation.txt"),
                 "transform": str(transform_path)}
    if tmpl_raster is not None:
        warped_path = out_dir / "warped.png"
        save_png(warped_path, _warp_raster(tmpl_raster, ref_img, result.deformable))
        artifacts["warped"] = str(warped_path)
    manifest["artifacts"] = artifacts
    manifest["level_ladder"] = _ladder_info(result)
    manifest["timings"] = dict(result.stage_seconds(), total=result.seconds)
    status = "ok" if exit_code == EXIT_OK else "stage_failed"
    print(f"registered {args.template} onto {args.reference} "
          f"in {result.seconds:.1f} s -> {out_dir}")
    return finish(status, exit_code)


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = load_field(args.field)
    ref_lms = load_landmarks_csv(args.reference_landmarks)
    tmpl_lms = load_landmarks_csv(args.template_landmarks)
    if len(ref_lms) != len(tmpl_lms):
        raise InvalidInputError(
            f"landmark counts differ: {len(ref_lms)} reference vs {len(tmpl_lms)} template")
    report = compute_metrics(ref_lms, tmpl_lms, grid, direction=args.direction,
                             pair_id=f"{ref_lms.image_id}:{tmpl_lms.image_id}")
    (out_dir / "metrics.json").write_text(report_to_json(report) + "\n")
    (out_dir / "metrics.csv").write_text(
        report_csv_header() + "\n" + report_csv_row(report) + "\n")
    write_tre_tsv(out_dir / "tre.tsv", report)
    print(f"MTRE {report.mtre:.6g} over {report.n_landmarks} landmarks "
          f"({report.n_excluded} excluded), {report.fold_count} folds -> {out_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _config_from_args(args)
    try:
        resolutions = [float(v) for v in args.resolutions.split(",") if v.strip()]
    except ValueError:
        raise InvalidInputError(
            f"--resolutions expects comma-separated numbers, got {args.resolutions!r}") from None
    if not resolutions:
        raise InvalidInputError("--resolutions is empty")
    ref = _load_input(args.reference, args.spacing)
    tmpl = _load_input(args.template, args.spacing)
    ref_input = ref if isinstance(ref, Pyramid) else ref[0]
    tmpl_input = tmpl if isinstance(tmpl, Pyramid) else tmpl[0]
    ref_lms = load_landmarks_csv(args.reference_landmarks)
    tmpl_lms = load_landmarks_csv(args.template_landmarks)

    csv_path = out_dir / "sweep.csv"
    csv_path.write_text(report_csv_header() + "\n")

    def persist(entry):
        # append-per-item so an interrupted sweep keeps its completed rows
        if entry.metrics is not None:
            with open(csv_path, "a") as fh:
                fh.write(report_csv_row(entry.metrics) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            (out_dir / f"metrics_res{entry.resolution:g}.json").write_text(
                report_to_json(entry.metrics) + "\n")
            print(f"resolution {entry.resolution:g}: MTRE {entry.metrics.mtre:.6g}")
        else:
            print(f"resolution {entry.resolution:g}: FAILED ({entry.error})",
                  file=sys.stderr)

    entries = resolution_sweep(ref_input, tmpl_input, ref_lms, tmpl_lms, resolutions,
                               cfg, direction=args.direction, on_entry=persist)
    summary = [{"resolution": e.resolution, "error": e.error,
                "mtre": None if e.metrics is None else e.metrics.mtre}
               for e in entries]
    _write_json_atomic(out_dir / "sweep.json", {
        "tool": "histreg", "version": __version__, "command": "sweep",
        "config": cfg.to_dict(), "entries": summary, "finished": _now()})
    return EXIT_OK


def cmd_info(args) -> int:
    cfg = _config_from_args(args)
    loaded = _load_input(args.reference, args.spacing)
    pyr = loaded if isinstance(loaded, Pyramid) else _as_pyramid(loaded[0], cfg)
    print(f"{args.reference}: {len(pyr)} pyramid levels")
    for ell, img in enumerate(pyr.levels):
        print(f"  level {ell}: {img.width} x {img.height} px, spacing {img.spacing:g}")
    print(f"prealign levels (coarse->fine): {_prealign_levels(pyr, cfg)}")
    print(f"affine levels   (coarse->fine): {stage_levels(pyr, cfg, cfg.affine_levels)}")
    print(f"deformable lvls (coarse->fine): {stage_levels(pyr, cfg, cfg.deformable_levels)}")
    return EXIT_OK


def _add_config_flags(parser):
    parser.add_argument("--config", help="JSON config file with pipeline parameters")
    parser.add_argument("--finest-resolution", type=float, dest="finest_resolution",
                        help="finest registration resolution (physical units/px)")
    parser.add_argument("--alpha", type=float, help="curvature regularization weight")
    parser.add_argument("--epsilon", type=float, help="NGF edge parameter")
    parser.add_argument("--grid-nodes", dest="grid_nodes",
                        help="control grid nodes as M1xM2 (x by y)")
    parser.add_argument("--rotations", type=int, help="number of candidate rotations")
    parser.add_argument("--deterministic", action="store_true",
                        help="force reproducible single-threaded reductions")
    parser.add_argument("--threads", type=int,
                        help="worker thread cap (default: HISTREG_THREADS or all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histreg",
        description="Variational registration of large 2D images with NGF distance, "
                    "rotation pre-alignment, affine and curvature-regularized "
                    "deformable stages, and landmark evaluation.")
    parser.add_argument("--version", action="version", version=f"histreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_reg = sub.add_parser("register", help="run the 3-step registration pipeline")
    p_reg.add_argument("--reference", required=True, help="reference image or pyramid dir")
    p_reg.add_argument("--template", required=True, help="template image or pyramid dir")
    p_reg.add_argument("--spacing", type=float, default=1.0,
                       help="pixel spacing of plain image files (units/px)")
    p_reg.add_argument("--out-dir", dest="out_dir", default=".")
    _add_config_flags(p_reg)
    p_reg.set_defaults(fn=cmd_register)

    p_eval = sub.add_parser("evaluate", help="landmark metrics for a deformation field")
    p_eval.add_argument("--field", required=True, help="binary deformation field")
    p_eval.add_argument("--reference-landmarks", required=True, dest="reference_landmarks")
    p_eval.add_argument("--template-landmarks", required=True, dest="template_landmarks")
    p_eval.add_argument("--direction", default="inverse", choices=["inverse", "forward"],
                        help="which landmarks are mapped through the transform")
    p_eval.add_argument("--out-dir", dest="out_dir", default=".")
    p_eval.set_defaults(fn=cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="register at several resolutions and compare")
    p_sweep.add_argument("--reference", required=True)
    p_sweep.add_argument("--template", required=True)
    p_sweep.add_argument("--spacing", type=float, default=1.0)
    p_sweep.add_argument("--reference-landmarks", required=True, dest="reference_landmarks")
    p_sweep.add_argument("--template-landmarks", required=True, dest="template_landmarks")
    p_sweep.add_argument("--resolutions", required=True,
                         help="comma-separated finest resolutions (units/px)")
    p_sweep.add_argument("--direction", default="inverse", choices=["inverse", "forward"])
    p_sweep.add_argument("--out-dir", dest="out_dir", default=".")
    _add_config_flags(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_info = sub.add_parser("info", help="print the pyramid and level ladder of an input")
    p_info.add_argument("--reference", required=True)
    p_info.add_argument("--spacing", type=float, default=1.0)
    _add_config_flags(p_info)
    p_info.set_defaults(fn=cmd_info)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageFailedError as exc:
        print(f"registration failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (HistregError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - anything else is an internal bug
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
