"""Deterministic pixel transforms on normalized images.

Images are float64 numpy arrays of shape (height, width, channels) with
values in [0, 1] and 1 or 3 channels. Every function returns a new array
and leaves its input alone.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

HORIZONTAL = "horizontal"
VERTICAL = "vertical"

# sample coordinates this close to an integer are snapped onto the grid, so
# exact-grid mappings (identity, 90/180 degree turns) reproduce pixels exactly
_GRID_SNAP = 1e-9


def check_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] not in (1, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an image of shape (H, W, 1|3), got {img.shape}")
    return img


def rescale(raw: np.ndarray) -> np.ndarray:
    """8-bit pixels to [0, 1] floats, ``v / 255``; 2-D input gains a channel axis."""
    raw = np.asarray(raw)
    if raw.dtype != np.uint8:
        raise TypeError(f"rescale expects uint8 pixels, got {raw.dtype}")
    if raw.ndim == 2:
        raw = raw[:, :, None]
    return check_image(raw.astype(np.float64) / 255.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def flip(img: np.ndarray, axis: str) -> np.ndarray:
    if axis == HORIZONTAL:
        return img[:, ::-1, :].copy()
    if axis == VERTICAL:
        return img[::-1, :, :].copy()
    raise ValueError(f"unknown flip axis {axis!r}")


@dataclass(frozen=True)
class AffineParams:
    """Rotation in degrees, shear factor, zoom factor and shifts as fractions
    of width/height."""

    rotation_deg: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation_deg == 0
            and self.shear == 0
            and self.zoom == 1
            and self.shift_x == 0
            and self.shift_y == 0
        )

    def sampling_matrix(self, width: int, height: int) -> np.ndarray:
        """3x3 matrix taking centered output coordinates (x, y, 1) to centered
        source coordinates: translate(shift) . rotate . shear . scale(1/zoom)."""
        if not self.zoom > 0:
            raise ValueError(f"zoom must be > 0, got {self.zoom}")
        t = math.radians(self.rotation_deg)
        c, s = math.cos(t), math.sin(t)
        translate = np.array([[1, 0, self.shift_x * width], [0, 1, self.shift_y * height], [0, 0, 1]], dtype=np.float64)
        rotate = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
        shear = np.array([[1, self.shear, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
        scale = np.diag([1.0 / self.zoom, 1.0 / self.zoom, 1.0])
        return translate @ rotate @ shear @ scale


def reflect_coords(coord: np.ndarray, size: int) -> np.ndarray:
    """Mirror coordinates into [0, size - 1] about the edge pixel centers
    (``d c b | a b c d | c b a``)."""
    if size == 1:
        return np.zeros_like(coord)
    period = 2.0 * (size - 1)
    c = np.mod(coord, period)
    return np.where(c > size - 1, period - c, c)


def reflect_index(idx: np.ndarray, size: int) -> np.ndarray:
    if size == 1:
        return np.zeros_like(idx)
    period = 2 * (size - 1)
    i = np.mod(idx, period)
    return np.where(i > size - 1, period - i, i)


def _snap(coord: np.ndarray) -> np.ndarray:
    nearest = np.round(coord)
    return np.where(np.abs(coord - nearest) < _GRID_SNAP, nearest, coord)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float pixel coordinates with reflect padding."""
    h, w = img.shape[:2]
    xs = reflect_coords(_snap(xs), w)
    ys = reflect_coords(_snap(ys), h)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def affine(img: np.ndarray, params: AffineParams) -> np.ndarray:
    """Inverse-map every output pixel through ``params.sampling_matrix``
    about the image center and interpolate bilinearly."""
    check_image(img)
    h, w = img.shape[:2]
    m = params.sampling_matrix(w, h)
    if params.is_identity:
        return img.copy()
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    qx, qy = xs - cx, ys - cy
    src_x = m[0, 0] * qx + m[0, 1] * qy + m[0, 2] + cx
    src_y = m[1, 0] * qx + m[1, 1] * qy + m[1, 2] + cy
    return np.clip(bilinear_sample(img, src_x, src_y), 0.0, 1.0)


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    if not factor > 0:
        raise ValueError(f"brightness factor must be > 0, got {factor}")
    if factor == 1.0:
        return img.copy()
    return np.clip(img * factor, 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps over offsets -r..r with r = ceil(3 sigma)."""
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    # offsets / sigma first: sigma**2 underflows for subnormal sigma
    with np.errstate(over="ignore"):
        k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def _blur_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    size = img.shape[axis]
    radius = len(kernel) // 2
    base = np.arange(size)
    out = np.zeros_like(img)
    # fixed summation order: offsets ascending
    for j, weight in enumerate(kernel):
        idx = reflect_index(base + (j - radius), size)
        out += weight * np.take(img, idx, axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    kernel = gaussian_kernel(sigma)
    out = _blur_axis(img, kernel, axis=1)
    out = _blur_axis(out, kernel, axis=0)
    return np.clip(out, 0.0, 1.0)


def add_gaussian_noise(img: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, scale^2) noise drawn in row-major (y, x, channel) order."""
    if scale < 0:
        raise ValueError(f"noise scale must be >= 0, got {scale}")
    if scale == 0:
        return img.copy()
    noise = rng.standard_normal(img.shape) * scale
    return np.clip(img + noise, 0.0, 1.0)


# --------------------------------------------------------------------------
# file I/O


def load_image(path: str | os.PathLike, channels: int | None = None, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read a PNG/PPM/PGM (or anything Pillow reads) into [0, 1] floats.

    ``channels`` forces gray (1) or RGB (3); ``size`` is (width, height) and
    resizes bilinearly when the file differs.
    """
    with PILImage.open(path) as im:
        if channels is None:
            channels = 1 if im.mode in ("L", "1", "I", "I;16", "F") else 3
        im = im.convert("L" if channels == 1 else "RGB")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), PILImage.BILINEAR)
        raw = np.asarray(im, dtype=np.uint8)
    return rescale(raw)


def save_png(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write an 8-bit PNG holding ``round(v * 255)``."""
    check_image(img)
    data = to_bytes(img)
    pil = PILImage.fromarray(data[:, :, 0] if data.shape[2] == 1 else data)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG", optimize=False)
