"""The 3-step registration pipeline.

Step 1 (rotation pre-alignment): candidate rotations at equidistant angles,
each seeded by the center-of-mass offset and refined by rigid NGF
registration; the candidate with the smallest refined distance wins.
Step 2: multilevel affine NGF registration from the winning rigid transform.
Step 3: multilevel deformable registration of a displacement grid minimizing
NGF + alpha * curvature, initialized by embedding the affine result.

All stages run coarse-to-fine on an image pyramid; affine parameters live in
physical coordinates so they transfer between levels unchanged, and the
control grid is the same at every deformable level.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .curvature import curv_value, curv_value_grad
from .errors import DegenerateInputError, InvalidInputError, StageFailedError
from .image import Image, Pyramid, build_pyramid, max_levels, to_gray_inverted
from .ngf import NgfConfig, NgfDistance
from .optimizer import GnEval, OptTrace, StopRules, gauss_newton, lbfgs
from .transforms import (Affine, DisplacementGrid, Rigid, affine_to_grid,
                         rigid_to_affine)

__all__ = [
    "PipelineConfig",
    "LevelReport",
    "StageReport",
    "PrealignCandidate",
    "PrealignResult",
    "RegistrationResult",
    "center_of_mass",
    "prealign",
    "register_affine",
    "register_deformable",
    "register",
]


@dataclass(frozen=True)
class PipelineConfig:
    """Pipeline parameters; the defaults are the published pipeline values.

    Resolutions are in physical units per pixel. finest_resolution=None
    registers down to the base of the pyramid; affine/deformable level
    counts default to a doubling ladder from finest_resolution up to
    coarsest_resolution (at micron scale: 3 levels at 248 up to 11 at 1).
    """

    n_rotations: int = 32
    prealign_levels: int = 4
    prealign_resolution: float = 200.0
    affine_levels: int | None = None
    deformable_levels: int | None = None
    finest_resolution: float | None = None
    coarsest_resolution: float = 992.0
    ngf_epsilon: float = 0.1
    alpha: float = 0.1
    grid_nodes: tuple[int, int] = (257, 257)
    prealign_rules: StopRules = field(default_factory=StopRules)
    affine_rules: StopRules = field(default_factory=StopRules)
    deformable_rules: StopRules = field(default_factory=StopRules)
    lbfgs_memory: int = 10
    threads: int | None = None
    deterministic: bool = False

    def __post_init__(self):
        if self.n_rotations < 2:
            raise InvalidInputError("n_rotations must be >= 2")
        for name in ("prealign_levels", "affine_levels", "deformable_levels"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        for name in ("prealign_resolution", "finest_resolution", "coarsest_resolution",
                     "ngf_epsilon", "alpha"):
            v = getattr(self, name)
            if v is not None and not (np.isfinite(v) and v > 0):
                raise InvalidInputError(f"{name} must be positive, got {v}")
        nodes = tuple(int(n) for n in self.grid_nodes)
        if len(nodes) != 2 or min(nodes) < 3:
            raise InvalidInputError("grid_nodes must be two counts >= 3")
        object.__setattr__(self, "grid_nodes", nodes)
        if self.lbfgs_memory < 1:
            raise InvalidInputError("lbfgs_memory must be >= 1")
        if self.threads is not None and self.threads < 1:
            raise InvalidInputError("threads must be >= 1")

    def to_dict(self) -> dict:
        def rules(r):
            return {"max_iterations": r.max_iterations, "grad_tol": r.grad_tol,
                    "step_tol": r.step_tol, "obj_tol": r.obj_tol}

        return {
            "n_rotations": self.n_rotations,
            "prealign_levels": self.prealign_levels,
            "prealign_resolution": self.prealign_resolution,
            "affine_levels": self.affine_levels,
            "deformable_levels": self.deformable_levels,
            "finest_resolution": self.finest_resolution,
            "coarsest_resolution": self.coarsest_resolution,
            "ngf_epsilon": self.ngf_epsilon,
            "alpha": self.alpha,
            "grid_nodes": list(self.grid_nodes),
            "prealign_rules": rules(self.prealign_rules),
            "affine_rules": rules(self.affine_rules),
            "deformable_rules": rules(self.deformable_rules),
            "lbfgs_memory": self.lbfgs_memory,
            "threads": self.threads,
            "deterministic": self.deterministic,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = set(cls().to_dict())
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for name in ("prealign_rules", "affine_rules", "deformable_rules"):
            if name in kwargs and kwargs[name] is not None:
                kwargs[name] = StopRules(**kwargs[name])
        if "grid_nodes" in kwargs and kwargs["grid_nodes"] is not None:
            kwargs["grid_nodes"] = tuple(kwargs["grid_nodes"])
        return cls(**kwargs)

    def updated(self, **overrides) -> "PipelineConfig":
        return replace(self, **overrides)


@dataclass
class LevelReport:
    """One optimization level of one stage."""

    level: int
    spacing: float
    shape: tuple[int, int]
    seconds: float
    trace: OptTrace
    initial_value: float
    final_value: float
    initial_distance: float
    final_distance: float


@dataclass
class StageReport:
    name: str
    levels: list[LevelReport] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class PrealignCandidate:
    angle: float
    initial_value: float
    final_value: float
    refined: Rigid


@dataclass
class PrealignResult:
    """Winning rigid transform plus the full candidate table."""

    params: Rigid
    initial_angle: float
    initial_value: float
    final_value: float
    candidates: list[PrealignCandidate]
    report: StageReport


@dataclass
class RegistrationResult:
    rigid: Rigid
    affine: Affine
    deformable: DisplacementGrid
    prealign: PrealignResult
    stages: dict[str, StageReport]
    seconds: float

    def stage_seconds(self) -> dict[str, float]:
        return {name: stage.seconds for name, stage in self.stages.items()}


# ---------------------------------------------------------------------------
# Level selection.

def level_for_resolution(pyramid: Pyramid, resolution: float | None) -> int:
    """Coarsest-or-equal level for a target resolution (units/px).

    Picks the first level whose spacing reaches the target, so a target
    coarser than the whole pyramid falls back to the coarsest level and a
    target finer than the base returns level 0.
    """
    if resolution is None:
        return 0
    for ell, img in enumerate(pyramid.levels):
        if img.spacing >= resolution * (1.0 - 1e-9):
            return ell
    return len(pyramid) - 1


def _derived_level_count(finest_spacing: float, coarsest_resolution: float) -> int:
    if coarsest_resolution <= finest_spacing:
        return 1
    return 1 + max(0, round(math.log2(coarsest_resolution / finest_spacing)))


def stage_levels(pyramid: Pyramid, cfg: PipelineConfig, n_levels: int | None) -> list[int]:
    """Level indices for one stage, coarse to fine."""
    finest = level_for_resolution(pyramid, cfg.finest_resolution)
    n = n_levels if n_levels is not None else _derived_level_count(
        pyramid[finest].spacing, cfg.coarsest_resolution)
    coarsest = min(finest + n - 1, len(pyramid) - 1)
    return list(range(coarsest, finest - 1, -1))


def _prealign_levels(pyramid: Pyramid, cfg: PipelineConfig) -> list[int]:
    finest = level_for_resolution(pyramid, cfg.prealign_resolution)
    coarsest = min(finest + cfg.prealign_levels - 1, len(pyramid) - 1)
    return list(range(coarsest, finest - 1, -1))


def _required_depth(base_spacing: float, cfg: PipelineConfig) -> int:
    """Pyramid depth covering every stage's coarsest level."""
    def level_of(res):
        if res is None or res <= base_spacing:
            return 0
        return math.ceil(math.log2(res / base_spacing) - 1e-9)

    ara = level_of(cfg.prealign_resolution) + cfg.prealign_levels - 1
    finest = level_of(cfg.finest_resolution)
    n_aff = cfg.affine_levels if cfg.affine_levels is not None else _derived_level_count(
        base_spacing * 2.0 ** finest, cfg.coarsest_resolution)
    n_def = cfg.deformable_levels if cfg.deformable_levels is not None else n_aff
    return max(ara, finest + n_aff - 1, finest + n_def - 1) + 1


def _check_compatible(ref: Pyramid, tmpl: Pyramid) -> None:
    if abs(ref.base.spacing - tmpl.base.spacing) > 1e-9 * ref.base.spacing:
        raise InvalidInputError("reference and template pyramids have different base spacing")


# ---------------------------------------------------------------------------
# Objective wrappers shared by the stages.

class _ParamObjective:
    """NGF as a function of rigid or affine parameter vectors."""

    def __init__(self, dist: NgfDistance, kind: type):
        self._dist = dist
        self._kind = kind

    def transform(self, x):
        return self._kind.from_params(x)

    def value(self, x):
        return self._dist.value(self.transform(x))

    def value_grad(self, x):
        res = self._dist.value_grad(self.transform(x))
        return res.value, res.gradient

    def gn_eval(self, x):
        res = self._dist.value_grad(self.transform(x), with_jacobian=True)
        return GnEval(value=res.value, gradient=res.gradient, residuals=res.residuals,
                      jacobian=res.jacobian, weights=res.gn_weight)


class _DeformableObjective:
    """NGF + alpha * curvature as a function of the flat node-displacement vector.

    The curvature term regularizes the deformable increment u - u_base
    (u_base is the embedded affine initializer), not the total displacement:
    a plain affine carries large mirror-boundary Laplacians that would
    otherwise push the grid boundary into folds, and the regularizer is
    meant to penalize the nonlinearity added on top of the affine stage.
    """

    def __init__(self, dist: NgfDistance, proto: DisplacementGrid, alpha: float,
                 base_u: np.ndarray | None = None):
        self._dist = dist
        self._proto = proto
        self._base = proto.u.copy() if base_u is None else base_u
        self.alpha = alpha

    def grid(self, x) -> DisplacementGrid:
        return self._proto.with_params(x)

    def _increment(self, grid: DisplacementGrid) -> DisplacementGrid:
        return DisplacementGrid(grid.u - self._base, grid.origin, grid.spacing)

    def value(self, x):
        g = self.grid(x)
        return self._dist.value(g) + self.alpha * curv_value(self._increment(g))

    def value_grad(self, x):
        g = self.grid(x)
        res = self._dist.value_grad(g)
        cv, cg = curv_value_grad(self._increment(g))
        return res.value + self.alpha * cv, res.gradient + self.alpha * cg.ravel()


# ---------------------------------------------------------------------------
# Operations.

def center_of_mass(img: Image) -> np.ndarray:
    """Intensity-weighted centroid of the pixel centers, physical (x, y)."""
    total = float(img.data.sum())
    if total <= 0.0:
        raise DegenerateInputError("center of mass of an all-zero image is undefined")
    ox, oy = img.origin
    col_mass = img.data.sum(axis=0)
    row_mass = img.data.sum(axis=1)
    x = float(col_mass @ (ox + img.spacing * np.arange(img.width))) / total
    y = float(row_mass @ (oy + img.spacing * np.arange(img.height))) / total
    return np.array([x, y])


def _as_pyramid(img, cfg: PipelineConfig, depth: int | None = None) -> Pyramid:
    if isinstance(img, Pyramid):
        return img
    if isinstance(img, Image):
        base = img
    else:
        base = to_gray_inverted(img)
    needed = depth if depth is not None else _required_depth(base.spacing, cfg)
    return build_pyramid(base, min(needed, max_levels(base.width, base.height, min_size=2)))


def _rotation_angles(n_rotations: int) -> np.ndarray:
    # Equidistant angles 2*pi*k/(n-1), k = 0..n-1: the interval endpoint is
    # sampled twice (0 and 2*pi give the same candidate); kept as specified.
    return 2.0 * np.pi * np.arange(n_rotations) / (n_rotations - 1)


def _wrap_angle(phi: float) -> float:
    return float(np.arctan2(np.sin(phi), np.cos(phi)))


def prealign(reference, template, cfg: PipelineConfig = PipelineConfig()) -> PrealignResult:
    """Automatic rotation alignment: exhaustive candidate rotations, refined rigidly.

    Every candidate k starts from the rotation angle phi_k about the
    reference center of mass with the mass centers matched, i.e. rigid
    parameters (phi_k, t_k) with t_k = com_T - Rot(phi_k) com_R, and is
    refined by multilevel Gauss-Newton on the NGF distance at the
    pre-alignment resolution. The candidate with the smallest refined
    distance wins; ties fall to the smallest rotation magnitude.
    """
    t0 = time.perf_counter()
    ref_pyr = _as_pyramid(reference, cfg)
    tmpl_pyr = _as_pyramid(template, cfg)
    _check_compatible(ref_pyr, tmpl_pyr)
    levels = _prealign_levels(ref_pyr, cfg)
    finest = levels[-1]

    com_r = center_of_mass(ref_pyr[finest])
    com_t = center_of_mass(tmpl_pyr[finest])

    dists = {ell: NgfDistance(ref_pyr[ell], tmpl_pyr[ell], NgfConfig(cfg.ngf_epsilon))
             for ell in levels}

    def run_candidate(phi: float) -> PrealignCandidate:
        c, s = np.cos(phi), np.sin(phi)
        rot_com = np.array([c * com_r[0] - s * com_r[1], s * com_r[0] + c * com_r[1]])
        t_init = com_t - rot_com
        params = np.array([phi, t_init[0], t_init[1]])
        initial_value = dists[finest].value(Rigid.from_params(params))
        for ell in levels:
            obj = _ParamObjective(dists[ell], Rigid)
            params, _ = gauss_newton(obj, params, cfg.prealign_rules)
        final_value = dists[finest].value(Rigid.from_params(params))
        return PrealignCandidate(angle=phi, initial_value=initial_value,
                                 final_value=final_value, refined=Rigid.from_params(params))

    angles = _rotation_angles(cfg.n_rotations)
    workers = 1 if cfg.deterministic else (cfg.threads or os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            candidates = list(pool.map(run_candidate, angles))
    else:
        candidates = [run_candidate(phi) for phi in angles]

    best = min(range(len(candidates)),
               key=lambda k: (candidates[k].final_value, abs(_wrap_angle(angles[k])), k))
    winner = candidates[best]
    report = StageReport(name="prealign", seconds=time.perf_counter() - t0)
    return PrealignResult(params=winner.refined, initial_angle=winner.angle,
                          initial_value=winner.initial_value, final_value=winner.final_value,
                          candidates=candidates, report=report)


def _run_stage(name, levels, ref_pyr, tmpl_pyr, cfg, optimize, distance_of):
    """Shared coarse-to-fine driver; `optimize` runs one level and returns
    (params, trace), `distance_of` evaluates the plain distance at a level."""
    report = StageReport(name=name)
    t_stage = time.perf_counter()
    any_progress = False
    for ell in levels:
        t_level = time.perf_counter()
        dist = NgfDistance(ref_pyr[ell], tmpl_pyr[ell], NgfConfig(cfg.ngf_epsilon))
        initial_distance = distance_of(dist, before=True)
        trace = optimize(dist, ell)
        final_distance = distance_of(dist, before=False)
        img = ref_pyr[ell]
        report.levels.append(LevelReport(
            level=ell, spacing=img.spacing, shape=(img.height, img.width),
            seconds=time.perf_counter() - t_level, trace=trace,
            initial_value=trace.objectives[0], final_value=trace.objectives[-1],
            initial_distance=initial_distance, final_distance=final_distance))
        if trace.reason != "line_search_failed" or trace.n_iterations > 0:
            any_progress = True
    report.seconds = time.perf_counter() - t_stage
    return report, any_progress


def register_affine(ref_pyr: Pyramid, tmpl_pyr: Pyramid, init: Rigid | Affine,
                    cfg: PipelineConfig = PipelineConfig()):
    """Multilevel affine NGF registration. Returns (Affine, StageReport)."""
    _check_compatible(ref_pyr, tmpl_pyr)
    levels = stage_levels(ref_pyr, cfg, cfg.affine_levels)
    state = {"affine": init if isinstance(init, Affine) else rigid_to_affine(init)}

    def optimize(dist, ell):
        obj = _ParamObjective(dist, Affine)
        params, trace = gauss_newton(obj, state["affine"].params(), cfg.affine_rules)
        state["affine"] = Affine.from_params(params)
        return trace

    def distance_of(dist, before):
        return dist.value(state["affine"])

    report, any_progress = _run_stage("affine", levels, ref_pyr, tmpl_pyr, cfg,
                                      optimize, distance_of)
    if not any_progress:
        raise StageFailedError("affine registration failed at every level",
                               best_transform=state["affine"])
    return state["affine"], report


def register_deformable(ref_pyr: Pyramid, tmpl_pyr: Pyramid, init: Affine,
                        cfg: PipelineConfig = PipelineConfig()):
    """Multilevel deformable registration. Returns (DisplacementGrid, StageReport).

    The affine initializer is embedded into the control grid (exact, since
    bilinear interpolation reproduces affine fields); the grid geometry stays
    fixed across levels, so moving to a finer image needs no prolongation.
    """
    _check_compatible(ref_pyr, tmpl_pyr)
    levels = stage_levels(ref_pyr, cfg, cfg.deformable_levels)
    base = ref_pyr.base
    state = {"grid": affine_to_grid(init, base.hull, cfg.grid_nodes)}
    affine_u = state["grid"].u.copy()

    def optimize(dist, ell):
        obj = _DeformableObjective(dist, state["grid"], cfg.alpha, base_u=affine_u)
        params, trace = lbfgs(obj, state["grid"].params(), memory=cfg.lbfgs_memory,
                              rules=cfg.deformable_rules)
        state["grid"] = state["grid"].with_params(params)
        return trace

    def distance_of(dist, before):
        return dist.value(state["grid"])

    report, any_progress = _run_stage("deformable", levels, ref_pyr, tmpl_pyr, cfg,
                                      optimize, distance_of)
    if not any_progress:
        raise StageFailedError("deformable registration failed at every level",
                               best_transform=state["grid"])
    return state["grid"], report


def register(reference, template, cfg: PipelineConfig = PipelineConfig()) -> RegistrationResult:
    """Full pipeline: grayscale conversion, pyramids, and the three stages.

    `reference` / `template` may be raw rasters (HxW or HxWxC arrays),
    prepared Images, or Pyramids. On a stage failure the raised
    :class:`StageFailedError` carries the best transforms found so far in
    its ``partial_result``.
    """
    t0 = time.perf_counter()
    ref_pyr = _as_pyramid(reference, cfg)
    tmpl_pyr = _as_pyramid(template, cfg)
    depth = min(len(ref_pyr), len(tmpl_pyr))
    ref_pyr = Pyramid(ref_pyr.levels[:depth])
    tmpl_pyr = Pyramid(tmpl_pyr.levels[:depth])

    pre = prealign(ref_pyr, tmpl_pyr, cfg)
    stages = {"prealign": pre.report}
    rigid = pre.params
    affine = rigid_to_affine(rigid)
    grid = affine_to_grid(affine, ref_pyr.base.hull, cfg.grid_nodes)
    try:
        affine, affine_report = register_affine(ref_pyr, tmpl_pyr, rigid, cfg)
        stages["affine"] = affine_report
        grid = affine_to_grid(affine, ref_pyr.base.hull, cfg.grid_nodes)
        grid, deformable_report = register_deformable(ref_pyr, tmpl_pyr, affine, cfg)
        stages["deformable"] = deformable_report
    except StageFailedError as exc:
        if isinstance(exc.best_transform, Affine):
            affine = exc.best_transform
            grid = affine_to_grid(affine, ref_pyr.base.hull, cfg.grid_nodes)
        elif isinstance(exc.best_transform, DisplacementGrid):
            grid = exc.best_transform
        exc.partial_result = RegistrationResult(
            rigid=rigid, affine=affine, deformable=grid, prealign=pre,
            stages=stages, seconds=time.perf_counter() - t0)
        raise
    return RegistrationResult(rigid=rigid, affine=affine, deformable=grid,
                              prealign=pre, stages=stages,
                              seconds=time.perf_counter() - t0)
