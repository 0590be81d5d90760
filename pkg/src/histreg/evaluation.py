"""Landmark-based accuracy metrics, fold detection, and resolution sweeps.

TRE is the Euclidean distance between corresponding landmarks after
registration; MTRE is its median (midpoint convention for even counts).
By default the template landmarks are mapped into the reference domain
through the numeric inverse of the computed transform and compared against
the reference landmarks; the direction is configurable.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .pipeline import PipelineConfig, register
from .transforms import DisplacementGrid, Transform

__all__ = [
    "LandmarkSet",
    "MetricsReport",
    "SweepEntry",
    "tre",
    "mtre",
    "transform_landmarks",
    "count_folds",
    "compute_metrics",
    "resolution_sweep",
    "load_landmarks_csv",
    "save_landmarks_csv",
    "report_to_json",
    "report_csv_header",
    "report_csv_row",
    "write_tre_tsv",
]


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered 2D landmark coordinates in physical units, tied to one image."""

    points: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
            raise InvalidInputError("landmarks must be a nonempty (N, 2) array")
        if not np.isfinite(pts).all():
            raise InvalidInputError("landmarks must be finite")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def tre(reference: LandmarkSet, warped: LandmarkSet) -> np.ndarray:
    """Per-landmark Euclidean distances between two matched sets."""
    if len(reference) != len(warped):
        raise InvalidInputError(
            f"landmark counts differ: {len(reference)} vs {len(warped)}")
    diff = reference.points - warped.points
    return np.hypot(diff[:, 0], diff[:, 1])


def mtre(values) -> float:
    """Median TRE; even counts use the midpoint of the central pair."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("mtre of an empty list is undefined")
    return float(np.median(arr))


def _invert_point(transform: Transform, target: np.ndarray, tol: float,
                  max_iterations: int = 50):
    """Solve y(x) = target by damped Newton from x0 = target."""
    x = target.copy()
    fx = transform.apply(x) - target
    err = float(np.hypot(fx[0], fx[1]))
    for _ in range(max_iterations):
        if err <= tol:
            return x, True
        if isinstance(transform, DisplacementGrid):
            jac = transform.spatial_jacobian(x[None, :])[0]
        elif hasattr(transform, "matrix"):
            jac = transform.matrix
        else:
            raise InvalidInputError(f"cannot invert transform type {type(transform)!r}")
        try:
            step = np.linalg.solve(jac, fx)
        except np.linalg.LinAlgError:
            return x, False
        scale = 1.0
        while scale >= 2.0 ** -20:
            x_new = x - scale * step
            f_new = transform.apply(x_new) - target
            e_new = float(np.hypot(f_new[0], f_new[1]))
            if e_new < err:
                x, fx, err = x_new, f_new, e_new
                break
            scale *= 0.5
        else:
            return x, False
    return x, err <= tol


def transform_landmarks(lms: LandmarkSet, transform: Transform,
                        direction: str = "forward", tol: float | None = None):
    """Map landmarks through a transform.

    direction "forward" applies y; "inverse" (alias "inverse-numeric")
    solves y(x) = p per landmark by damped Newton from x0 = p. Returns
    (LandmarkSet, valid mask); non-convergent inverse solves are flagged
    False and keep their input coordinate.

    tol defaults to 1e-6 times the transform's natural length scale (grid
    node spacing for displacement grids, 1 physical unit otherwise).
    """
    if direction == "forward":
        return (LandmarkSet(transform.apply(lms.points), image_id=lms.image_id),
                np.ones(len(lms), dtype=bool))
    if direction not in ("inverse", "inverse-numeric"):
        raise InvalidInputError(f"unknown direction {direction!r}")
    if tol is None:
        scale = min(transform.spacing) if isinstance(transform, DisplacementGrid) else 1.0
        tol = 1e-6 * scale
    out = np.empty_like(lms.points)
    valid = np.empty(len(lms), dtype=bool)
    for k, p in enumerate(lms.points):
        out[k], valid[k] = _invert_point(transform, p, tol)
    return LandmarkSet(out, image_id=lms.image_id), valid


def count_folds(grid: DisplacementGrid) -> int:
    """Number of grid cells whose deformed orientation flips.

    The Jacobian determinant of the bilinear deformation at each cell corner
    equals the cross product of the deformed edge vectors meeting there
    (finite differences of deformed node positions); a cell with any
    non-positive corner determinant counts as one fold.
    """
    pos = grid.node_positions() + grid.u
    ex = np.diff(pos, axis=1)  # (rows, cols-1, 2): along +x
    ey = np.diff(pos, axis=0)  # (rows-1, cols, 2): along +y

    def cross(a, b):
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

    # corner determinants per cell: edge vectors adjacent to each corner
    d00 = cross(ex[:-1, :, :], ey[:, :-1, :])
    d01 = cross(ex[:-1, :, :], ey[:, 1:, :])
    d10 = cross(ex[1:, :, :], ey[:, :-1, :])
    d11 = cross(ex[1:, :, :], ey[:, 1:, :])
    folded = (d00 <= 0) | (d01 <= 0) | (d10 <= 0) | (d11 <= 0)
    return int(np.count_nonzero(folded))


@dataclass
class MetricsReport:
    """Accuracy summary for one registered pair at one resolution.

    Whiskers follow the box-plot convention: 1.5 interquartile ranges
    beyond the quartiles.
    """

    tre_values: np.ndarray
    mtre: float
    mean: float
    q1: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    fold_count: int
    n_landmarks: int
    n_excluded: int
    resolution: float | None = None
    timings: dict[str, float] = field(default_factory=dict)
    pair_id: str = ""

    @classmethod
    def from_tre(cls, tre_values, fold_count=0, n_excluded=0, resolution=None,
                 timings=None, pair_id=""):
        arr = np.asarray(tre_values, dtype=np.float64)
        if arr.size == 0:
            raise InvalidInputError("cannot build a metrics report without landmarks")
        q1, med, q3 = (float(v) for v in np.percentile(arr, [25, 50, 75]))
        iqr = q3 - q1
        return cls(tre_values=arr, mtre=med, mean=float(arr.mean()), q1=q1, q3=q3,
                   whisker_lo=q1 - 1.5 * iqr, whisker_hi=q3 + 1.5 * iqr,
                   fold_count=int(fold_count), n_landmarks=int(arr.size),
                   n_excluded=int(n_excluded), resolution=resolution,
                   timings=dict(timings or {}), pair_id=pair_id)


def compute_metrics(reference_lms: LandmarkSet, template_lms: LandmarkSet,
                    transform: Transform, direction: str = "inverse",
                    fold_grid: DisplacementGrid | None = None,
                    resolution: float | None = None,
                    timings: dict | None = None, pair_id: str = "") -> MetricsReport:
    """TRE statistics of a landmark pair under a computed transform.

    With the default "inverse" direction the template landmarks are pulled
    back into the reference domain; "forward" pushes the reference landmarks
    into the template domain instead. Landmarks whose inverse solve fails
    are excluded from the statistics and counted in ``n_excluded``.
    """
    if len(reference_lms) != len(template_lms):
        raise InvalidInputError(
            f"landmark counts differ: {len(reference_lms)} vs {len(template_lms)}")
    if direction == "forward":
        mapped, valid = transform_landmarks(reference_lms, transform, "forward")
        errors = tre(mapped, template_lms)
    else:
        mapped, valid = transform_landmarks(template_lms, transform, direction)
        errors = tre(reference_lms, mapped)
    if not valid.all():
        errors = errors[valid]
    if errors.size == 0:
        raise InvalidInputError("no landmark survived the inverse mapping")
    folds = count_folds(fold_grid) if fold_grid is not None else (
        count_folds(transform) if isinstance(transform, DisplacementGrid) else 0)
    return MetricsReport.from_tre(errors, fold_count=folds,
                                  n_excluded=int((~valid).sum()),
                                  resolution=resolution, timings=timings, pair_id=pair_id)


@dataclass
class SweepEntry:
    resolution: float
    metrics: MetricsReport | None = None
    error: str = ""


def resolution_sweep(reference, template, reference_lms: LandmarkSet,
                     template_lms: LandmarkSet, resolutions,
                     cfg: PipelineConfig = PipelineConfig(),
                     direction: str = "inverse",
                     on_entry=None) -> list[SweepEntry]:
    """Run the full pipeline once per finest resolution and collect metrics.

    Failures of individual resolutions are recorded in the entry's ``error``
    and the sweep continues. ``on_entry`` (if given) is called with each
    completed :class:`SweepEntry`, enabling append-per-item persistence.
    """
    entries = []
    for res in resolutions:
        entry = SweepEntry(resolution=float(res))
        try:
            run_cfg = cfg.updated(finest_resolution=float(res))
            result = register(reference, template, run_cfg)
            timings = dict(result.stage_seconds(), total=result.seconds)
            entry.metrics = compute_metrics(
                reference_lms, template_lms, result.deformable, direction=direction,
                resolution=float(res), timings=timings)
        except Exception as exc:  # per-resolution failures are data, not fatal
            entry.error = f"{type(exc).__name__}: {exc}"
        entries.append(entry)
        if on_entry is not None:
            on_entry(entry)
    return entries


# ---------------------------------------------------------------------------
# File formats.

def load_landmarks_csv(path) -> LandmarkSet:
    """Landmark CSV: header naming x and y columns, one landmark per row."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"no such landmark file: {path}")
    points = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty landmark file") from None
        cols = [c.strip().lower() for c in header]
        if "x" not in cols or "y" not in cols:
            raise InvalidInputError(f"{path}: line 1: header must name x and y columns")
        ix, iy = cols.index("x"), cols.index("y")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                points.append((float(row[ix]), float(row[iy])))
            except (ValueError, IndexError):
                raise InvalidInputError(f"{path}: line {lineno}: malformed row {row!r}") from None
    if not points:
        raise InvalidInputError(f"{path}: no landmarks found")
    return LandmarkSet(np.array(points), image_id=path.stem)


def save_landmarks_csv(path, lms: LandmarkSet) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y"])
        for x, y in lms.points:
            writer.writerow([f"{x:.17g}", f"{y:.17g}"])


def report_to_json(report: MetricsReport) -> str:
    payload = {
        "pair_id": report.pair_id,
        "resolution": report.resolution,
        "n_landmarks": report.n_landmarks,
        "n_excluded": report.n_excluded,
        "mtre": report.mtre,
        "mean": report.mean,
        "q1": report.q1,
        "q3": report.q3,
        "whisker_lo": report.whisker_lo,
        "whisker_hi": report.whisker_hi,
        "fold_count": report.fold_count,
        "timings": report.timings,
        "tre": [float(v) for v in report.tre_values],
    }
    return json.dumps(payload, indent=2)


_CSV_FIELDS = ["pair_id", "resolution", "n_landmarks", "n_excluded", "mtre", "mean",
               "q1", "q3", "whisker_lo", "whisker_hi", "fold_count",
               "prealign_s", "affine_s", "deformable_s", "total_s"]


def report_csv_header() -> str:
    return ",".join(_CSV_FIELDS)


def report_csv_row(report: MetricsReport) -> str:
    t = report.timings
    values = [report.pair_id,
              "" if report.resolution is None else f"{report.resolution:.17g}",
              report.n_landmarks, report.n_excluded,
              f"{report.mtre:.17g}", f"{report.mean:.17g}", f"{report.q1:.17g}",
              f"{report.q3:.17g}", f"{report.whisker_lo:.17g}",
              f"{report.whisker_hi:.17g}", report.fold_count,
              f"{t.get('prealign', float('nan')):.6g}",
              f"{t.get('affine', float('nan')):.6g}",
              f"{t.get('deformable', float('nan')):.6g}",
              f"{t.get('total', float('nan')):.6g}"]
    return ",".join(str(v) for v in values)


def write_tre_tsv(path, report: MetricsReport) -> None:
    """Plot-ready TSV of the TRE distribution: index, value per line."""
    lines = ["# k\ttre"]
    for k, v in enumerate(report.tre_values):
        lines.append(f"{k}\t{v:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")
