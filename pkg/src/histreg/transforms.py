"""Rigid, affine, and grid-based displacement transforms.

All transforms map physical (x, y) points of the reference domain into the
template domain. Each kind supports vectorized evaluation on (N, 2) arrays,
packing to/from a flat parameter vector for the optimizers, and embedding
into the next richer parameterization for stage hand-off.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .image import _check_points

__all__ = [
    "Rigid",
    "Affine",
    "DisplacementGrid",
    "apply_transform",
    "rigid_to_affine",
    "affine_to_grid",
    "resample_grid",
    "identity_grid",
    "save_field",
    "load_field",
    "save_field_text",
]

_FIELD_MAGIC = b"HRGRID01"


def _finite(*values) -> bool:
    return all(np.isfinite(v) for v in values)


@dataclass(frozen=True)
class Rigid:
    """Rotation by phi about the physical origin followed by translation (t1, t2)."""

    phi: float = 0.0
    t1: float = 0.0
    t2: float = 0.0

    def __post_init__(self):
        if not _finite(self.phi, self.t1, self.t2):
            raise InvalidInputError("rigid parameters must be finite")

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.phi), np.sin(self.phi)
        return np.array([[c, -s], [s, c]])

    def apply(self, points):
        pts = _check_points(points)
        out = pts @ self.matrix.T + np.array([self.t1, self.t2])
        return out

    def params(self) -> np.ndarray:
        return np.array([self.phi, self.t1, self.t2])

    @classmethod
    def from_params(cls, p) -> "Rigid":
        return cls(float(p[0]), float(p[1]), float(p[2]))

    def param_jacobian(self, points) -> np.ndarray:
        """dy/dparams at each point, shape (N, 2, 3); params are (phi, t1, t2)."""
        pts = np.atleast_2d(_check_points(points))
        c, s = np.cos(self.phi), np.sin(self.phi)
        n = pts.shape[0]
        jac = np.zeros((n, 2, 3))
        jac[:, 0, 0] = -s * pts[:, 0] - c * pts[:, 1]
        jac[:, 1, 0] = c * pts[:, 0] - s * pts[:, 1]
        jac[:, 0, 1] = 1.0
        jac[:, 1, 2] = 1.0
        return jac


@dataclass(frozen=True)
class Affine:
    """y = A x + b with A = [[a11, a12], [a21, a22]], b = (b1, b2)."""

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    b1: float = 0.0
    b2: float = 0.0

    def __post_init__(self):
        if not _finite(self.a11, self.a12, self.a21, self.a22, self.b1, self.b2):
            raise InvalidInputError("affine parameters must be finite")
        if self.det == 0.0:
            warnings.warn("affine matrix is singular; transform is not invertible",
                          stacklevel=2)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.b1, self.b2])

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def apply(self, points):
        pts = _check_points(points)
        return pts @ self.matrix.T + self.offset

    def params(self) -> np.ndarray:
        return np.array([self.a11, self.a12, self.a21, self.a22, self.b1, self.b2])

    @classmethod
    def from_params(cls, p) -> "Affine":
        return cls(*(float(v) for v in p))

    @classmethod
    def identity(cls) -> "Affine":
        return cls()

    def param_jacobian(self, points) -> np.ndarray:
        """dy/dparams, shape (N, 2, 6); params are (a11, a12, a21, a22, b1, b2)."""
        pts = np.atleast_2d(_check_points(points))
        n = pts.shape[0]
        jac = np.zeros((n, 2, 6))
        jac[:, 0, 0] = pts[:, 0]
        jac[:, 0, 1] = pts[:, 1]
        jac[:, 1, 2] = pts[:, 0]
        jac[:, 1, 3] = pts[:, 1]
        jac[:, 0, 4] = 1.0
        jac[:, 1, 5] = 1.0
        return jac


class DisplacementGrid:
    """y(x) = x + u(x): displacement carried by a uniform control-node grid.

    u is stored as an (n_rows, n_cols, 2) array; node (i, j) sits at
    ``origin + (j*hx, i*hy)`` and holds the displacement (u1, u2) there.
    Between nodes u is interpolated bilinearly; outside the grid it clamps
    to the nearest edge value, so the deformation stays bounded.
    """

    def __init__(self, u: np.ndarray, origin, spacing):
        u = np.asarray(u, dtype=np.float64)
        if u.ndim != 3 or u.shape[2] != 2 or u.shape[0] < 2 or u.shape[1] < 2:
            raise InvalidInputError("u must have shape (rows >= 2, cols >= 2, 2)")
        if not np.isfinite(u).all():
            raise InvalidInputError("displacements must be finite")
        hx, hy = float(spacing[0]), float(spacing[1])
        if not (hx > 0 and hy > 0):
            raise InvalidInputError("grid spacing must be positive")
        self.u = u.copy()
        self.u.flags.writeable = False
        self.origin = (float(origin[0]), float(origin[1]))
        self.spacing = (hx, hy)

    @property
    def n_rows(self) -> int:
        return self.u.shape[0]

    @property
    def n_cols(self) -> int:
        return self.u.shape[1]

    @property
    def n_params(self) -> int:
        return self.u.size

    @property
    def domain(self) -> tuple[float, float, float, float]:
        """Rectangle (x0, y0, x1, y1) spanned by the node positions."""
        x0, y0 = self.origin
        return (x0, y0, x0 + (self.n_cols - 1) * self.spacing[0],
                y0 + (self.n_rows - 1) * self.spacing[1])

    def node_positions(self) -> np.ndarray:
        """Physical node positions, shape (n_rows, n_cols, 2)."""
        x0, y0 = self.origin
        xs = x0 + self.spacing[0] * np.arange(self.n_cols)
        ys = y0 + self.spacing[1] * np.arange(self.n_rows)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def params(self) -> np.ndarray:
        return self.u.ravel().copy()

    def with_params(self, p) -> "DisplacementGrid":
        return DisplacementGrid(np.asarray(p, dtype=np.float64).reshape(self.u.shape),
                                self.origin, self.spacing)

    def interp_weights(self, points):
        """Bilinear node weights for each point (clamped to the grid).

        Returns (i0, j0, wx, wy) where the four surrounding nodes
        (i0, j0)..(i0+1, j0+1) receive weights (1-wx)(1-wy), wx(1-wy),
        (1-wx)wy, wx*wy. Out-of-grid points clamp, which realizes the
        constant edge extrapolation.
        """
        pts = np.atleast_2d(_check_points(points))
        lx = np.clip((pts[:, 0] - self.origin[0]) / self.spacing[0], 0.0, self.n_cols - 1)
        ly = np.clip((pts[:, 1] - self.origin[1]) / self.spacing[1], 0.0, self.n_rows - 1)
        j0 = np.clip(np.floor(lx), 0, self.n_cols - 2).astype(np.intp)
        i0 = np.clip(np.floor(ly), 0, self.n_rows - 2).astype(np.intp)
        return i0, j0, lx - j0, ly - i0

    def displacement(self, points) -> np.ndarray:
        pts = _check_points(points)
        flat = np.atleast_2d(pts)
        i0, j0, wx, wy = self.interp_weights(flat)
        u = self.u
        w00 = ((1 - wx) * (1 - wy))[:, None]
        w01 = (wx * (1 - wy))[:, None]
        w10 = ((1 - wx) * wy)[:, None]
        w11 = (wx * wy)[:, None]
        out = (w00 * u[i0, j0] + w01 * u[i0, j0 + 1]
               + w10 * u[i0 + 1, j0] + w11 * u[i0 + 1, j0 + 1])
        return out.reshape(pts.shape)

    def apply(self, points):
        pts = _check_points(points)
        return pts + self.displacement(pts)

    def spatial_jacobian(self, points) -> np.ndarray:
        """dy/dx = I + du/dx at each point, shape (N, 2, 2).

        du/dx of the bilinear interpolant; zero in the clamped directions
        outside the grid.
        """
        pts = np.atleast_2d(_check_points(points))
        i0, j0, wx, wy = self.interp_weights(pts)
        inside_x = ((pts[:, 0] >= self.domain[0]) & (pts[:, 0] <= self.domain[2]))
        inside_y = ((pts[:, 1] >= self.domain[1]) & (pts[:, 1] <= self.domain[3]))
        u = self.u
        u00, u01 = u[i0, j0], u[i0, j0 + 1]
        u10, u11 = u[i0 + 1, j0], u[i0 + 1, j0 + 1]
        dudx = ((1 - wy)[:, None] * (u01 - u00) + wy[:, None] * (u11 - u10)) / self.spacing[0]
        dudy = ((1 - wx)[:, None] * (u10 - u00) + wx[:, None] * (u11 - u01)) / self.spacing[1]
        dudx *= inside_x[:, None]
        dudy *= inside_y[:, None]
        jac = np.empty((pts.shape[0], 2, 2))
        jac[:, 0, 0] = 1.0 + dudx[:, 0]
        jac[:, 1, 0] = dudx[:, 1]
        jac[:, 0, 1] = dudy[:, 0]
        jac[:, 1, 1] = 1.0 + dudy[:, 1]
        return jac

    def __eq__(self, other):
        return (isinstance(other, DisplacementGrid)
                and self.origin == other.origin and self.spacing == other.spacing
                and self.u.shape == other.u.shape and np.array_equal(self.u, other.u))

    def __repr__(self):
        return (f"DisplacementGrid({self.n_rows}x{self.n_cols} nodes, "
                f"origin={self.origin}, spacing={self.spacing})")


Transform = Rigid | Affine | DisplacementGrid


def apply_transform(transform: Transform, points):
    """Evaluate any transform kind at physical points."""
    return transform.apply(points)


def rigid_to_affine(rigid: Rigid) -> Affine:
    """Embed a rigid transform as the equivalent affine."""
    c, s = np.cos(rigid.phi), np.sin(rigid.phi)
    return Affine(c, -s, s, c, rigid.t1, rigid.t2)


def identity_grid(domain, nodes) -> DisplacementGrid:
    """All-zero displacement grid with `nodes` = (n_cols, n_rows) over `domain`.

    domain: rectangle (x0, y0, x1, y1) the nodes span exactly.
    """
    n_cols, n_rows = int(nodes[0]), int(nodes[1])
    if n_cols < 2 or n_rows < 2:
        raise InvalidInputError("grid needs at least 2x2 nodes")
    x0, y0, x1, y1 = (float(v) for v in domain)
    if not (x1 > x0 and y1 > y0):
        raise InvalidInputError(f"degenerate grid domain {domain}")
    hx = (x1 - x0) / (n_cols - 1)
    hy = (y1 - y0) / (n_rows - 1)
    return DisplacementGrid(np.zeros((n_rows, n_cols, 2)), (x0, y0), (hx, hy))


def affine_to_grid(affine: Affine, domain, nodes) -> DisplacementGrid:
    """Embed an affine transform by sampling u(x) = A x + b - x at the nodes.

    Bilinear interpolation reproduces affine fields exactly, so applying the
    result matches the affine everywhere inside the grid.
    """
    grid = identity_grid(domain, nodes)
    pos = grid.node_positions().reshape(-1, 2)
    u = (affine.apply(pos) - pos).reshape(grid.n_rows, grid.n_cols, 2)
    return DisplacementGrid(u, grid.origin, grid.spacing)


def resample_grid(grid: DisplacementGrid, nodes) -> DisplacementGrid:
    """Resample a displacement grid onto a new node count over the same domain."""
    target = identity_grid(grid.domain, nodes)
    pos = target.node_positions().reshape(-1, 2)
    u = grid.displacement(pos).reshape(target.n_rows, target.n_cols, 2)
    return DisplacementGrid(u, target.origin, target.spacing)


def embed(transform: Transform, domain=None, nodes=None) -> Transform:
    """Promote a transform one stage up: rigid -> affine -> displacement grid.

    Grids are resampled onto `nodes` over their own domain. `domain` and
    `nodes` are required when the target is a grid.
    """
    if isinstance(transform, Rigid):
        return rigid_to_affine(transform)
    if isinstance(transform, Affine):
        if domain is None or nodes is None:
            raise InvalidInputError("embedding an affine into a grid needs domain and nodes")
        return affine_to_grid(transform, domain, nodes)
    if isinstance(transform, DisplacementGrid):
        if nodes is None:
            raise InvalidInputError("resampling a grid needs a target node count")
        return resample_grid(transform, nodes)
    raise InvalidInputError(f"unknown transform type {type(transform)!r}")


# ---------------------------------------------------------------------------
# Displacement field serialization.
#
# Binary layout (little-endian):
#   8s   magic "HRGRID01"
#   u4   m1 (nodes along x), u4 m2 (nodes along y)
#   4*f8 domain rectangle x0, y0, x1, y1 (node extremes)
#   2*f8 node spacing hx, hy
#   m1*m2*f8 u1 (x-displacement), row-major, then the same for u2

_HEADER = struct.Struct("<8sII6d")


def save_field(path, grid: DisplacementGrid) -> None:
    x0, y0, x1, y1 = grid.domain
    header = _HEADER.pack(_FIELD_MAGIC, grid.n_cols, grid.n_rows,
                          x0, y0, x1, y1, grid.spacing[0], grid.spacing[1])
    with open(Path(path), "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.u[:, :, 0]).astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(grid.u[:, :, 1]).astype("<f8").tobytes())


def load_field(path) -> DisplacementGrid:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"no such field file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"field file too short: {path}")
    magic, m1, m2, x0, y0, x1, y1, hx, hy = _HEADER.unpack_from(raw)
    if magic != _FIELD_MAGIC:
        raise InvalidInputError(f"not a displacement field file (bad magic): {path}")
    count = m1 * m2
    expected = _HEADER.size + 2 * count * 8
    if len(raw) != expected:
        raise InvalidInputError(
            f"field file size mismatch: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", count=2 * count, offset=_HEADER.size)
    u = np.stack([data[:count].reshape(m2, m1), data[count:].reshape(m2, m1)], axis=-1)
    grid = DisplacementGrid(u, (x0, y0), (hx, hy))
    if not (np.allclose(grid.domain[2], x1) and np.allclose(grid.domain[3], y1)):
        raise InvalidInputError(f"field header domain/spacing disagree: {path}")
    return grid


def save_field_text(path, grid: DisplacementGrid) -> None:
    """Human-readable dump: one `i j x y u1 u2` line per node."""
    lines = [
        "# histreg displacement grid",
        f"# nodes {grid.n_cols} x {grid.n_rows} (x by y)",
        "# domain %.17g %.17g %.17g %.17g" % grid.domain,
        "# spacing %.17g %.17g" % grid.spacing,
        "# i j x y u1 u2",
    ]
    pos = grid.node_positions()
    for i in range(grid.n_rows):
        for j in range(grid.n_cols):
            lines.append("%d %d %.17g %.17g %.17g %.17g"
                         % (i, j, pos[i, j, 0], pos[i, j, 1], grid.u[i, j, 0], grid.u[i, j, 1]))
    Path(path).write_text("\n".join(lines) + "\n")
