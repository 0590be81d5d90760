"""Normalized Gradient Fields distance and its derivative w.r.t. transform parameters.

The distance sums, over the pixel centers x_i of the reference image,

    (h^2 / 2) * sum_i  1 - ( <gW_i, gR_i>_eps / (|gW_i|_eps * |gR_i|_eps) )^2

with gR_i the reference gradient at x_i, gW_i the gradient of the *warped*
template at x_i, i.e. gW = Dy(x)^T * (grad T)(y(x)) by the chain rule,
<a, b>_eps = a.b + eps^2 and |a|_eps = sqrt(a.a + eps^2). Comparing the
warped template's gradient (rather than the template gradient at the
deformed point alone) makes the measure vanish at perfect alignment for
arbitrary rotations: edges rotate with the content, so their directions
only match after mapping through the transform Jacobian.

The epsilon augmentation bounds every summand to [0, 1] (Cauchy-Schwarz on
the epsilon-extended vectors), so 0 <= value <= h^2*N/2. Pixels mapped
outside the template see the zero background extension (gradient (0, 0)),
contributing 1 - eps^2/|gR|_eps^2 without any masking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .image import Image
from .transforms import Affine, DisplacementGrid, Rigid, Transform

__all__ = ["NgfConfig", "DistanceResult", "NgfDistance", "ngf_value", "ngf_grad"]


@dataclass(frozen=True)
class NgfConfig:
    """Edge parameter eps: gradients of magnitude well below eps count as noise."""

    epsilon: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon > 0):
            raise InvalidInputError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class DistanceResult:
    """Distance value plus optional derivative data.

    gradient: d(value)/d(params) as a flat vector (rigid: 3, affine: 6,
      grid: u.size in u.ravel() order).
    residuals: the normalized inner products r_i; the loss is
      gn_weight/2 * sum(1 - r_i^2).
    jacobian: dr_i/dparams, only filled for rigid/affine when requested;
      together with gn_weight it feeds the Gauss-Newton model
      H ~= gn_weight * J^T J.
    """

    value: float
    gradient: Optional[np.ndarray] = None
    residuals: Optional[np.ndarray] = None
    jacobian: Optional[np.ndarray] = None
    gn_weight: float = 0.0


class NgfDistance:
    """NGF distance bound to one (reference, template, config) triple.

    Precomputes the reference-side gradients once; evaluating different
    transforms against the same pair is then cheap. For displacement grids
    the interpolation stencil at the pixel centers is cached per grid
    geometry, since the optimizer re-evaluates the same geometry many times.
    """

    def __init__(self, reference: Image, template: Image, cfg: NgfConfig = NgfConfig()):
        self.reference = reference
        self.template = template
        self.cfg = cfg
        self._x = reference.pixel_centers()
        g_r = reference.gradient_field(self._x)
        eps2 = cfg.epsilon ** 2
        self._g_r = g_r
        self._q_r = g_r[:, 0] ** 2 + g_r[:, 1] ** 2 + eps2
        self._sqrt_q_r = np.sqrt(self._q_r)
        self._area = reference.spacing ** 2
        self._grid_key = None
        self._grid_cache = None

    @property
    def n_pixels(self) -> int:
        return self._x.shape[0]

    @property
    def max_value(self) -> float:
        """Upper bound h^2 * N / 2 of the distance."""
        return 0.5 * self._area * self.n_pixels

    # -- transform plumbing ----------------------------------------------

    def _grid_stencil(self, grid: DisplacementGrid):
        """Interpolation stencil of the pixel centers on the control grid:
        corner node indices, weights, and weight derivatives (zeroed in the
        clamped directions outside the grid domain)."""
        key = (grid.origin, grid.spacing, grid.u.shape)
        if key != self._grid_key:
            pts = self._x
            i0, j0, wx, wy = grid.interp_weights(pts)
            x0, y0, x1, y1 = grid.domain
            in_x = ((pts[:, 0] >= x0) & (pts[:, 0] <= x1)) / grid.spacing[0]
            in_y = ((pts[:, 1] >= y0) & (pts[:, 1] <= y1)) / grid.spacing[1]
            cols = grid.n_cols
            idx = (i0 * cols + j0, i0 * cols + j0 + 1,
                   (i0 + 1) * cols + j0, (i0 + 1) * cols + j0 + 1)
            w = ((1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy)
            dwx = (-(1 - wy) * in_x, (1 - wy) * in_x, -wy * in_x, wy * in_x)
            dwy = (-(1 - wx) * in_y, -wx * in_y, (1 - wx) * in_y, wx * in_y)
            self._grid_key = key
            self._grid_cache = (idx, w, dwx, dwy)
        return self._grid_cache

    def _grid_eval(self, grid: DisplacementGrid):
        """Deformed points plus du/dx and du/dy at the pixel centers."""
        idx, w, dwx, dwy = self._grid_stencil(grid)
        nodes = grid.u.reshape(-1, 2)
        disp = np.zeros_like(self._x)
        dudx = np.zeros_like(self._x)
        dudy = np.zeros_like(self._x)
        for k in range(4):
            gathered = nodes[idx[k]]
            disp += w[k][:, None] * gathered
            dudx += dwx[k][:, None] * gathered
            dudy += dwy[k][:, None] * gathered
        return self._x + disp, dudx, dudy

    def _warped_gradient(self, transform: Transform, g_t: np.ndarray, dudx, dudy):
        """gW = Dy(x)^T (grad T)(y(x)) for each pixel."""
        if isinstance(transform, (Rigid, Affine)):
            return g_t @ transform.matrix
        g_w = np.empty_like(g_t)
        g_w[:, 0] = (1.0 + dudx[:, 0]) * g_t[:, 0] + dudx[:, 1] * g_t[:, 1]
        g_w[:, 1] = dudy[:, 0] * g_t[:, 0] + (1.0 + dudy[:, 1]) * g_t[:, 1]
        return g_w

    # -- evaluation --------------------------------------------------------

    def _terms(self, g_w):
        eps2 = self.cfg.epsilon ** 2
        q_w = g_w[:, 0] ** 2 + g_w[:, 1] ** 2 + eps2
        num = g_w[:, 0] * self._g_r[:, 0] + g_w[:, 1] * self._g_r[:, 1] + eps2
        return q_w, num

    def value(self, transform: Transform) -> float:
        if isinstance(transform, DisplacementGrid):
            y, dudx, dudy = self._grid_eval(transform)
        else:
            y, dudx, dudy = transform.apply(self._x), None, None
        g_t = self.template.gradient_field(y)
        g_w = self._warped_gradient(transform, g_t, dudx, dudy)
        q_w, num = self._terms(g_w)
        # r^2 formed without square roots so identical aligned images give 0 exactly
        r2 = (num * num) / (q_w * self._q_r)
        return 0.5 * self._area * float(np.sum(1.0 - r2))

    def value_grad(self, transform: Transform, with_jacobian: bool = False) -> DistanceResult:
        if isinstance(transform, DisplacementGrid):
            y, dudx, dudy = self._grid_eval(transform)
        else:
            y, dudx, dudy = transform.apply(self._x), None, None
        g_t, h_t = self.template.gradient_field_jacobian(y)
        g_w = self._warped_gradient(transform, g_t, dudx, dudy)
        q_w, num = self._terms(g_w)
        denom = np.sqrt(q_w) * self._sqrt_q_r
        r = num / denom
        value = 0.5 * self._area * float(np.sum(1.0 - r * r))

        # dr/dgW, then its two transport paths: through the deformed position
        # (w_pos = (Dy v)^T dgT/dy) and through the Jacobian entries of y
        v = (self._g_r - (num / q_w)[:, None] * g_w) / denom[:, None]
        if isinstance(transform, (Rigid, Affine)):
            dy_v = v @ transform.matrix.T
        else:
            dy_v = np.empty_like(v)
            dy_v[:, 0] = (1.0 + dudx[:, 0]) * v[:, 0] + dudy[:, 0] * v[:, 1]
            dy_v[:, 1] = dudx[:, 1] * v[:, 0] + (1.0 + dudy[:, 1]) * v[:, 1]
        w_pos = np.einsum("nc,nce->ne", dy_v, h_t)

        if isinstance(transform, DisplacementGrid):
            grad = self._grid_gradient(transform, r, g_t, v, w_pos)
            return DistanceResult(value=value, gradient=grad, residuals=r,
                                  gn_weight=self._area)

        if isinstance(transform, Rigid):
            r_jac = self._rigid_residual_jacobian(transform, g_t, v, w_pos)
        elif isinstance(transform, Affine):
            r_jac = self._affine_residual_jacobian(g_t, v, w_pos)
        else:
            raise InvalidInputError(f"unsupported transform type {type(transform)!r}")
        grad = -self._area * (r_jac.T @ r)
        return DistanceResult(value=value, gradient=grad, residuals=r,
                              jacobian=r_jac if with_jacobian else None,
                              gn_weight=self._area)

    def _rigid_residual_jacobian(self, transform, g_t, v, w_pos):
        x = self._x
        c, s = np.cos(transform.phi), np.sin(transform.phi)
        # dy/dphi = Rot'(phi) x; the Jacobian of y also rotates: dDy/dphi = Rot'
        dy_dphi_x = -s * x[:, 0] - c * x[:, 1]
        dy_dphi_y = c * x[:, 0] - s * x[:, 1]
        rotp_v_x = -s * v[:, 0] - c * v[:, 1]
        rotp_v_y = c * v[:, 0] - s * v[:, 1]
        jac = np.empty((x.shape[0], 3))
        jac[:, 0] = (rotp_v_x * g_t[:, 0] + rotp_v_y * g_t[:, 1]
                     + w_pos[:, 0] * dy_dphi_x + w_pos[:, 1] * dy_dphi_y)
        jac[:, 1] = w_pos[:, 0]
        jac[:, 2] = w_pos[:, 1]
        return jac

    def _affine_residual_jacobian(self, g_t, v, w_pos):
        x = self._x
        jac = np.empty((x.shape[0], 6))
        jac[:, 0] = v[:, 0] * g_t[:, 0] + w_pos[:, 0] * x[:, 0]  # a11
        jac[:, 1] = v[:, 1] * g_t[:, 0] + w_pos[:, 0] * x[:, 1]  # a12
        jac[:, 2] = v[:, 0] * g_t[:, 1] + w_pos[:, 1] * x[:, 0]  # a21
        jac[:, 3] = v[:, 1] * g_t[:, 1] + w_pos[:, 1] * x[:, 1]  # a22
        jac[:, 4] = w_pos[:, 0]
        jac[:, 5] = w_pos[:, 1]
        return jac

    def _grid_gradient(self, grid, r, g_t, v, w_pos):
        idx, w, dwx, dwy = self._grid_stencil(grid)
        coef = (-self._area) * r
        n_nodes = grid.n_rows * grid.n_cols
        grad = np.zeros((n_nodes, 2))
        for k in range(4):
            # position path (bilinear weight) + Jacobian path (weight gradient)
            pos = coef * w[k]
            vdw = coef * (v[:, 0] * dwx[k] + v[:, 1] * dwy[k])
            grad[:, 0] += np.bincount(idx[k], weights=pos * w_pos[:, 0] + vdw * g_t[:, 0],
                                      minlength=n_nodes)
            grad[:, 1] += np.bincount(idx[k], weights=pos * w_pos[:, 1] + vdw * g_t[:, 1],
                                      minlength=n_nodes)
        return grad.ravel()


def ngf_value(reference: Image, template: Image, transform: Transform,
              cfg: NgfConfig = NgfConfig()) -> DistanceResult:
    """Distance value only."""
    return DistanceResult(value=NgfDistance(reference, template, cfg).value(transform))


def ngf_grad(reference: Image, template: Image, transform: Transform,
             cfg: NgfConfig = NgfConfig(), with_jacobian: bool = False) -> DistanceResult:
    """Distance with gradient, residuals, and (optionally) the residual Jacobian."""
    return NgfDistance(reference, template, cfg).value_grad(transform, with_jacobian)
