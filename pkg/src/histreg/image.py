"""Images, resolution pyramids, and bilinear sampling in physical coordinates.

An :class:`Image` is a single-channel raster with uniform, isotropic pixel
spacing. All geometry is expressed in physical units: pixel (i, j) of the
data array (row i, column j) has its center at ``origin + (j*spacing,
i*spacing)``, and points are ``(x, y)`` pairs everywhere in this package.

Intensity outside the convex hull of the pixel centers is defined as 0,
matching the black background produced by :func:`to_gray_inverted`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "Image",
    "Pyramid",
    "to_gray_inverted",
    "build_pyramid",
    "sample",
    "gradient",
    "load_raster",
    "load_image",
    "load_pyramid",
    "save_png",
]


@dataclass(frozen=True)
class Image:
    """Single-channel 2D raster with uniform pixel spacing.

    data: float64 array of shape (height, width), intensities in [0, 1].
    spacing: physical size of one pixel (same in x and y), > 0.
    origin: physical coordinate (x, y) of the center of pixel (0, 0).
    """

    data: np.ndarray
    spacing: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.size == 0:
            raise InvalidInputError("image data must be a nonempty 2D array")
        if not np.isfinite(data).all():
            raise InvalidInputError("image intensities must be finite")
        if not (np.isfinite(self.spacing) and self.spacing > 0):
            raise InvalidInputError(f"spacing must be positive, got {self.spacing}")
        ox, oy = self.origin
        if not (np.isfinite(ox) and np.isfinite(oy)):
            raise InvalidInputError("origin must be finite")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "origin", (float(ox), float(oy)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.data.size

    @property
    def hull(self) -> tuple[float, float, float, float]:
        """Bounding rectangle (x0, y0, x1, y1) of the pixel centers."""
        ox, oy = self.origin
        return (ox, oy, ox + (self.width - 1) * self.spacing, oy + (self.height - 1) * self.spacing)

    def pixel_centers(self) -> np.ndarray:
        """Physical coordinates of every pixel center, shape (N, 2), row-major order."""
        ox, oy = self.origin
        xs = ox + self.spacing * np.arange(self.width)
        ys = oy + self.spacing * np.arange(self.height)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def _locate(self, points: np.ndarray):
        """Cell lookup for bilinear interpolation.

        Returns (i0, j0, fx, fy, inside). Cells are addressed by their
        lower-left pixel index; indices clamp to the last interior cell so
        points exactly on the far hull edge use the adjacent cell (fx or fy
        then equals 1). fx, fy are zeroed outside the hull.
        """
        pts = np.asarray(points, dtype=np.float64)
        ox, oy = self.origin
        lx = (pts[..., 0] - ox) / self.spacing
        ly = (pts[..., 1] - oy) / self.spacing
        inside = (lx >= 0.0) & (lx <= self.width - 1) & (ly >= 0.0) & (ly <= self.height - 1)
        j0 = np.clip(np.floor(lx), 0, max(self.width - 2, 0)).astype(np.intp)
        i0 = np.clip(np.floor(ly), 0, max(self.height - 2, 0)).astype(np.intp)
        fx = np.where(inside, lx - j0, 0.0)
        fy = np.where(inside, ly - i0, 0.0)
        return i0, j0, fx, fy, inside

    def sample(self, points) -> np.ndarray | float:
        """Bilinear interpolation at physical points; 0 outside the pixel-center hull.

        points: array-like of shape (..., 2). Returns matching shape (scalar
        for a single point).
        """
        pts = _check_points(points)
        i0, j0, fx, fy, inside = self._locate(pts)
        j1 = np.minimum(j0 + 1, self.width - 1)
        i1 = np.minimum(i0 + 1, self.height - 1)
        d = self.data
        v = ((1 - fx) * (1 - fy) * d[i0, j0] + fx * (1 - fy) * d[i0, j1]
             + (1 - fx) * fy * d[i1, j0] + fx * fy * d[i1, j1])
        v = np.where(inside, v, 0.0)
        return float(v) if pts.ndim == 1 else v

    def gradient(self, points) -> np.ndarray:
        """Spatial derivative of the bilinear interpolant, shape (..., 2).

        Piecewise constant per cell in each direction; (0, 0) outside the
        hull. On cell boundaries the cell chosen by :meth:`_locate` applies.
        """
        pts = _check_points(points)
        i0, j0, fx, fy, inside = self._locate(pts)
        j1 = np.minimum(j0 + 1, self.width - 1)
        i1 = np.minimum(i0 + 1, self.height - 1)
        d = self.data
        d00, d01, d10, d11 = d[i0, j0], d[i0, j1], d[i1, j0], d[i1, j1]
        gx = ((1 - fy) * (d01 - d00) + fy * (d11 - d10)) / self.spacing
        gy = ((1 - fx) * (d10 - d00) + fx * (d11 - d01)) / self.spacing
        g = np.stack([np.where(inside, gx, 0.0), np.where(inside, gy, 0.0)], axis=-1)
        return g

    def _gradient_images(self):
        """Central-difference gradient rasters (one-sided at the borders),
        lazily cached. Interpolating these instead of differentiating the
        interpolant keeps the gradient continuous in position, which the
        distance measure needs for line searches to work."""
        cached = self.__dict__.get("_grad_images")
        if cached is None:
            gy, gx = np.gradient(self.data, self.spacing)
            gx.flags.writeable = False
            gy.flags.writeable = False
            cached = (gx, gy)
            object.__setattr__(self, "_grad_images", cached)
        return cached

    def gradient_field(self, points) -> np.ndarray:
        """Bilinear interpolation of central-difference gradients, shape (..., 2).

        Continuous everywhere inside the hull; (0, 0) outside.
        """
        pts = _check_points(points)
        i0, j0, fx, fy, inside = self._locate(pts)
        j1 = np.minimum(j0 + 1, self.width - 1)
        i1 = np.minimum(i0 + 1, self.height - 1)
        out = np.empty(pts.shape)
        for c, comp in enumerate(self._gradient_images()):
            v = ((1 - fx) * (1 - fy) * comp[i0, j0] + fx * (1 - fy) * comp[i0, j1]
                 + (1 - fx) * fy * comp[i1, j0] + fx * fy * comp[i1, j1])
            out[..., c] = np.where(inside, v, 0.0)
        return out

    def gradient_field_jacobian(self, points):
        """Interpolated gradient plus its spatial derivative.

        Returns (g (..., 2), jac (..., 2, 2)) with jac[..., c, d] =
        d g_c / d x_d; the derivative of each interpolated gradient component
        is piecewise constant per cell, like :meth:`gradient`.
        """
        pts = _check_points(points)
        i0, j0, fx, fy, inside = self._locate(pts)
        j1 = np.minimum(j0 + 1, self.width - 1)
        i1 = np.minimum(i0 + 1, self.height - 1)
        g = np.empty(pts.shape)
        jac = np.empty(pts.shape[:-1] + (2, 2))
        for c, comp in enumerate(self._gradient_images()):
            d00, d01 = comp[i0, j0], comp[i0, j1]
            d10, d11 = comp[i1, j0], comp[i1, j1]
            v = (1 - fx) * (1 - fy) * d00 + fx * (1 - fy) * d01 \
                + (1 - fx) * fy * d10 + fx * fy * d11
            dx = ((1 - fy) * (d01 - d00) + fy * (d11 - d10)) / self.spacing
            dy = ((1 - fx) * (d10 - d00) + fx * (d11 - d01)) / self.spacing
            g[..., c] = np.where(inside, v, 0.0)
            jac[..., c, 0] = np.where(inside, dx, 0.0)
            jac[..., c, 1] = np.where(inside, dy, 0.0)
        return g, jac


@dataclass(frozen=True)
class Pyramid:
    """Resolution pyramid, level 0 finest; spacing doubles per level."""

    levels: tuple[Image, ...]

    def __post_init__(self):
        if not self.levels:
            raise InvalidInputError("pyramid needs at least one level")
        base = self.levels[0]
        for ell, img in enumerate(self.levels):
            expect = base.spacing * 2.0 ** ell
            if img.spacing != expect:
                raise InvalidInputError(
                    f"level {ell} spacing {img.spacing} != base*2^{ell} ({expect})")
            if ell and (img.width > self.levels[ell - 1].width
                        or img.height > self.levels[ell - 1].height):
                raise InvalidInputError(f"level {ell} is larger than level {ell - 1}")
        object.__setattr__(self, "levels", tuple(self.levels))

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, ell: int) -> Image:
        return self.levels[ell]

    @property
    def base(self) -> Image:
        return self.levels[0]

    def spacings(self) -> list[float]:
        return [img.spacing for img in self.levels]


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 2:
        raise InvalidInputError(f"points must have a trailing dimension of 2, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise InvalidInputError("points must be finite")
    return pts


def to_gray_inverted(raster, spacing: float = 1.0, origin=(0.0, 0.0)) -> Image:
    """Convert a raster to inverted grayscale so the background is black.

    Multi-channel input is reduced with Rec.601 luminance weights; integer
    dtypes are normalized by their max representable value, floats are
    assumed to be in [0, 1] already. Output intensity = 1 - luminance.
    """
    arr = np.asarray(raster)
    if arr.size == 0 or arr.ndim not in (2, 3):
        raise InvalidInputError("raster must be a nonempty 2D or 3D (H, W, C) array")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64) / np.iinfo(arr.dtype).max
    else:
        arr = np.clip(arr.astype(np.float64), 0.0, 1.0)
    if arr.ndim == 3:
        if arr.shape[2] == 1:
            lum = arr[:, :, 0]
        else:
            # RGB(A): alpha is ignored; integer weights keep gray exactly gray
            lum = (299 * arr[:, :, 0] + 587 * arr[:, :, 1] + 114 * arr[:, :, 2]) / 1000
    else:
        lum = arr
    return Image(1.0 - lum, spacing=spacing, origin=origin)


def _pool2x2(data: np.ndarray) -> np.ndarray:
    """2x2 mean pooling; odd trailing rows/columns average the pixels present."""
    h, w = data.shape
    sums = np.add.reduceat(np.add.reduceat(data, np.arange(0, h, 2), axis=0),
                           np.arange(0, w, 2), axis=1)
    rows = np.minimum(np.arange(0, h, 2) + 2, h) - np.arange(0, h, 2)
    cols = np.minimum(np.arange(0, w, 2) + 2, w) - np.arange(0, w, 2)
    return sums / np.outer(rows, cols)


def max_levels(width: int, height: int, min_size: int = 1) -> int:
    """Largest pyramid depth keeping every level at >= min_size pixels per axis.

    With min_size=1 this is the depth at which pooling stops shrinking the
    image (the coarsest buildable level); registration callers use min_size=2
    to stay on levels where gradients exist.
    """
    n = 1
    w, h = width, height
    while (w > 1 or h > 1) and -(-w // 2) >= min_size and -(-h // 2) >= min_size:
        w, h = -(-w // 2), -(-h // 2)
        n += 1
    return n


def build_pyramid(img: Image, n_levels: int) -> Pyramid:
    """Mean-pooling pyramid with ceiling-halved dimensions per level.

    The physical position of content is preserved: level l+1's origin shifts
    by half of level l's spacing so each pooled pixel sits at the centroid of
    its 2x2 block.
    """
    if n_levels < 1:
        raise InvalidInputError("n_levels must be >= 1")
    if n_levels > max_levels(img.width, img.height):
        raise InvalidInputError(
            f"{n_levels} levels is too deep for a {img.width}x{img.height} image")
    levels = [img]
    for _ in range(n_levels - 1):
        prev = levels[-1]
        ox, oy = prev.origin
        half = prev.spacing / 2.0
        levels.append(Image(_pool2x2(prev.data), spacing=prev.spacing * 2.0,
                            origin=(ox + half, oy + half)))
    return Pyramid(tuple(levels))


def sample(img: Image, p) -> float:
    """Intensity of the bilinear interpolant at physical point p."""
    return img.sample(p)


def gradient(img: Image, p) -> np.ndarray:
    """Spatial gradient of the bilinear interpolant at physical point p."""
    return img.gradient(p)


# ---------------------------------------------------------------------------
# File I/O: PNG / single-level TIFF rasters and pre-built pyramid directories.

def load_raster(path) -> np.ndarray:
    """Read a PNG or single-level TIFF file as a numpy array."""
    from PIL import Image as PILImage

    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"no such image file: {path}")
    with PILImage.open(path) as im:
        if getattr(im, "n_frames", 1) > 1:
            raise InvalidInputError(f"multi-page TIFF is not supported: {path}")
        return np.asarray(im)


def load_image(path, spacing: float = 1.0, origin=(0.0, 0.0)) -> Image:
    """Load a raster file and convert it with :func:`to_gray_inverted`."""
    return to_gray_inverted(load_raster(path), spacing=spacing, origin=origin)


def load_pyramid(directory) -> Pyramid:
    """Load a pre-built pyramid directory.

    Layout: ``manifest.json`` with keys ``spacing`` (level 0, physical
    units/px) and ``levels`` (count), plus ``level_<l>.png`` files. Level
    files may be color; each is converted with :func:`to_gray_inverted`.
    Levels are assumed to follow the 2x2 mean-pooling alignment, so origins
    shift by half of the previous level's spacing.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise InvalidInputError(f"pyramid manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        spacing0 = float(manifest["spacing"])
        n_levels = int(manifest["levels"])
    except (ValueError, KeyError, TypeError) as exc:
        raise InvalidInputError(f"malformed pyramid manifest {manifest_path}: {exc}") from exc
    if n_levels < 1 or spacing0 <= 0:
        raise InvalidInputError("pyramid manifest must have levels >= 1 and spacing > 0")
    levels = []
    origin = (0.0, 0.0)
    spacing = spacing0
    for ell in range(n_levels):
        levels.append(to_gray_inverted(load_raster(directory / f"level_{ell}.png"),
                                       spacing=spacing, origin=origin))
        origin = (origin[0] + spacing / 2.0, origin[1] + spacing / 2.0)
        spacing *= 2.0
    return Pyramid(tuple(levels))


def save_png(path, data: np.ndarray) -> None:
    """Write a [0, 1] float array (grayscale or HxWx3) as an 8-bit PNG."""
    from PIL import Image as PILImage

    arr = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    arr8 = np.round(arr * 255.0).astype(np.uint8)
    PILImage.fromarray(arr8).save(Path(path))
