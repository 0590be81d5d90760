"""Synthetic fixtures: textured images, analytic warps, probe landmarks.

Templates are generated by resampling the reference through a mapping g that
takes template coordinates to reference coordinates: T(z) = R(g(z)). The
true registration transform (reference -> template) is then g^-1, and exact
landmark pairs are available without inverting anything: pick template
points t_k and set r_k = g(t_k).
"""

import numpy as np
from scipy.ndimage import gaussian_filter

from histreg import Image


def textured_image(size=512, spacing=1.0, seed=0, smooth=None, margin=0.18):
    """Smooth random texture on an irregular soft-edged island, black background.

    The island outline is deliberately asymmetric (wobbled radius) so that
    rotations are identifiable even at resolutions where the inner texture
    has been pooled away, like a real tissue section's outline. The black
    margin keeps content inside the frame under rotation and matches the
    inverted-background convention of the pipeline.
    """
    if smooth is None:
        smooth = max(2.0, size / 40.0)
    rng = np.random.default_rng(seed)
    tex = gaussian_filter(rng.standard_normal((size, size)), smooth)
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    rr = np.hypot(xx - c, yy - c)
    ang = np.arctan2(yy - c, xx - c)
    wobble = 1.0 + 0.20 * np.sin(2 * ang + 0.9) + 0.12 * np.cos(3 * ang - 0.4) \
        + 0.07 * np.sin(5 * ang + 2.1)
    radius = (0.5 - margin) * size * wobble
    taper = 0.025 * size
    mask = np.clip((radius - rr) / taper, 0.0, 1.0)
    return Image(mask * (0.3 + 0.7 * tex), spacing=spacing)


def resample(reference: Image, mapping) -> Image:
    """Template image T with T(z) = reference(mapping(z)) on the same raster."""
    pts = reference.pixel_centers()
    vals = reference.sample(mapping(pts))
    return Image(vals.reshape(reference.height, reference.width),
                 spacing=reference.spacing, origin=reference.origin)


def rotation_about(center, theta):
    c, s = np.cos(theta), np.sin(theta)
    center = np.asarray(center, dtype=np.float64)

    def apply(pts):
        d = np.atleast_2d(pts) - center
        out = np.column_stack([c * d[:, 0] - s * d[:, 1],
                               s * d[:, 0] + c * d[:, 1]]) + center
        return out.reshape(np.shape(pts))

    return apply


def affine_map(matrix, offset):
    matrix = np.asarray(matrix, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)

    def apply(pts):
        return np.atleast_2d(pts) @ matrix.T + offset

    return apply


def bump_map(center, amplitude, sigma):
    """Gaussian bump displacement: z + a * exp(-|z - c|^2 / (2 sigma^2))."""
    center = np.asarray(center, dtype=np.float64)
    amplitude = np.asarray(amplitude, dtype=np.float64)

    def apply(pts):
        p = np.atleast_2d(pts)
        r2 = np.sum((p - center) ** 2, axis=1)
        return p + amplitude * np.exp(-r2 / (2.0 * sigma ** 2))[:, None]

    return apply


def compose(*maps):
    """compose(f, g)(z) = f(g(z))."""

    def apply(pts):
        out = np.atleast_2d(pts)
        for fn in reversed(maps):
            out = fn(out)
        return out

    return apply


def probe_grid(x0, y0, x1, y1, n=5) -> np.ndarray:
    """n x n landmark grid spanning the rectangle, shape (n*n, 2)."""
    xs = np.linspace(x0, x1, n)
    ys = np.linspace(y0, y1, n)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])
