"""histreg: variational registration for large 2D histology-style images.

The pipeline aligns a template image onto a reference image in three steps
(rotation pre-alignment, affine, curvature-regularized deformable), all
driven by the Normalized Gradient Fields distance on an image pyramid, and
ships a landmark-based evaluation harness (TRE/MTRE, fold detection,
resolution sweeps).
"""

__version__ = "0.1.0"

from .errors import (DegenerateInputError, HistregError, InvalidInputError,
                     StageFailedError)
from .image import (Image, Pyramid, build_pyramid, load_image, load_pyramid,
                    load_raster, save_png, to_gray_inverted)
from .transforms import (Affine, DisplacementGrid, Rigid, affine_to_grid, embed,
                         identity_grid, load_field, resample_grid, rigid_to_affine,
                         save_field, save_field_text)
from .ngf import DistanceResult, NgfConfig, NgfDistance, ngf_grad, ngf_value
from .curvature import CurvConfig, curv_grad, curv_value, curv_value_grad
from .optimizer import GnEval, LeastSquares, OptTrace, StopRules, gauss_newton, lbfgs
from .pipeline import (PipelineConfig, PrealignResult, RegistrationResult,
                       center_of_mass, prealign, register, register_affine,
                       register_deformable)
from .evaluation import (LandmarkSet, MetricsReport, compute_metrics, count_folds,
                         load_landmarks_csv, mtre, resolution_sweep,
                         save_landmarks_csv, transform_landmarks, tre)

__all__ = [
    "__version__",
    "HistregError", "InvalidInputError", "DegenerateInputError", "StageFailedError",
    "Image", "Pyramid", "to_gray_inverted", "build_pyramid",
    "load_raster", "load_image", "load_pyramid", "save_png",
    "Rigid", "Affine", "DisplacementGrid", "rigid_to_affine", "affine_to_grid",
    "resample_grid", "identity_grid", "embed",
    "save_field", "load_field", "save_field_text",
    "NgfConfig", "NgfDistance", "DistanceResult", "ngf_value", "ngf_grad",
    "CurvConfig", "curv_value", "curv_grad", "curv_value_grad",
    "StopRules", "OptTrace", "GnEval", "LeastSquares", "gauss_newton", "lbfgs",
    "PipelineConfig", "RegistrationResult", "PrealignResult",
    "center_of_mass", "prealign", "register", "register_affine", "register_deformable",
    "LandmarkSet", "MetricsReport", "tre", "mtre", "transform_landmarks",
    "count_folds", "compute_metrics", "resolution_sweep",
    "load_landmarks_csv", "save_landmarks_csv",
]
