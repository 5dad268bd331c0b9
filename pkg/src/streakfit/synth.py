"""Forward model: render an orbit into a long-exposure streak image."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numba
import numpy as np

from .camera import FrameSequence
from .observer import ExposureWindow
from .orbit import OrbitState, propagate_many

PSF_TRUNCATE = 4.0  # in units of sigma
DEFAULT_PSF_SIGMA = 2.0  # px


class Crop(NamedTuple):
    """Sub-window of the sensor: top-left sensor pixel plus size."""

    x0: int
    y0: int
    width: int
    height: int

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))


@dataclass(frozen=True)
class StreakImage:
    """Intensity grid (rows = y, columns = x) with its imaging metadata."""

    pixels: np.ndarray
    window: ExposureWindow
    frames: FrameSequence
    psf_sigma: float
    origin_offset: np.ndarray  # sensor pixel (x, y) of pixels[0, 0]
    start_corner: str | None = None
    path: np.ndarray | None = field(default=None, repr=False)  # crop-pixel samples of the true streak
    noise_sigma: float = 0.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2 or not np.all(np.isfinite(px)):
            raise ValueError("pixels must be a finite 2-D grid")
        if not self.psf_sigma > 0:
            raise ValueError("psf_sigma must be positive")
        if len(self.frames) != self.window.steps + 1:
            raise ValueError("need one frame per timestamp")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "origin_offset", np.asarray(self.origin_offset, dtype=float).reshape(2))

    @property
    def crop(self) -> Crop:
        h, w = self.pixels.shape
        return Crop(int(self.origin_offset[0]), int(self.origin_offset[1]), w, h)

    def with_pixels(self, pixels) -> "StreakImage":
        return replace(self, pixels=pixels)


def psf_value(u_proj, u_pixel, sigma: float, truncate: float = PSF_TRUNCATE):
    """Gaussian point-spread intensity at ``u_pixel`` for a source at ``u_proj``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d = np.asarray(u_pixel, dtype=float) - np.asarray(u_proj, dtype=float)
    d2 = np.sum(d * d, axis=-1)
    val = np.exp(-d2 / (2.0 * sigma * sigma)) / (sigma * np.sqrt(2.0 * np.pi))
    return np.where(d2 <= (truncate * sigma) ** 2, val, 0.0)


@numba.njit(cache=True)
def _splat_kernel(cx, cy, sigma, radius, out):
    h, w = out.shape
    inv = 1.0 / (2.0 * sigma * sigma)
    norm = 1.0 / (sigma * np.sqrt(2.0 * np.pi))
    r2 = radius * radius
    for i in range(cx.size):  # fixed order keeps sums bit-reproducible
        x, y = cx[i], cy[i]
        xa = max(int(np.floor(x - radius)), 0)
        xb = min(int(np.ceil(x + radius)), w - 1)
        ya = max(int(np.floor(y - radius)), 0)
        yb = min(int(np.ceil(y + radius)), h - 1)
        nx = xb - xa + 1
        if nx <= 0 or yb < ya:
            continue
        dx2 = np.empty(nx)
        gx = np.empty(nx)
        for j in range(nx):
            dx2[j] = (xa + j - x) ** 2
            gx[j] = np.exp(-dx2[j] * inv)
        for yy in range(ya, yb + 1):
            dy2 = (yy - y) ** 2
            if dy2 > r2:
                continue
            gy = np.exp(-dy2 * inv) * norm
            for j in range(nx):
                if dy2 + dx2[j] <= r2:
                    out[yy, xa + j] += gy * gx[j]


def splat(centers, shape, sigma: float, truncate: float = PSF_TRUNCATE) -> np.ndarray:
    """Sum truncated Gaussian PSFs centered at ``centers`` ``(n, 2)`` into a grid.

    Non-finite centers are ignored.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    out = np.zeros(shape)
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    c = centers[np.all(np.isfinite(centers), axis=1)]
    if len(c):
        _splat_kernel(np.ascontiguousarray(c[:, 0]), np.ascontiguousarray(c[:, 1]), float(sigma),
                      float(truncate * sigma), out)
    return out


def project_path(o: OrbitState, frames: FrameSequence, origin=(0.0, 0.0)):
    """Crop-pixel coordinates of the orbit at every frame epoch (NaN if behind)."""
    pos, _ = propagate_many(o, frames.epochs - o.epoch)
    if not np.all(np.isfinite(pos)):
        raise FloatingPointError("non-finite state encountered during propagation")
    px, _ = frames.project(pos)
    return px - np.asarray(origin, dtype=float)


def render_pixels(o: OrbitState, frames: FrameSequence, sigma: float, crop: Crop,
                  truncate: float = PSF_TRUNCATE) -> np.ndarray:
    path = project_path(o, frames, (crop.x0, crop.y0))
    return splat(path, crop.shape, sigma, truncate)


def render_streak(o: OrbitState, frames: FrameSequence, window: ExposureWindow, sigma: float,
                  crop: Crop, truncate: float = PSF_TRUNCATE) -> StreakImage:
    """Sum of per-timestamp PSFs over the exposure, restricted to ``crop``.

    An orbit that never enters the crop renders as an all-zero image.
    """
    path = project_path(o, frames, (crop.x0, crop.y0))
    pixels = splat(path, crop.shape, sigma, truncate)
    return StreakImage(pixels, window, frames, sigma, (crop.x0, crop.y0), path=path)


def normalize_peak(img: StreakImage) -> StreakImage:
    peak = img.pixels.max()
    if peak <= 0:
        return img
    return img.with_pixels(img.pixels / peak)


def _path_point(path, s):
    """Linear interpolation along the sample index of ``path`` at fractional ``s``."""
    i = min(int(np.floor(s)), len(path) - 2)
    t = s - i
    return (1 - t) * path[i] + t * path[i + 1]


def inject_holes(img: StreakImage, rng: np.random.Generator, count: int = 4,
                 diameter_range=(5.0, 20.0)) -> StreakImage:
    """Zero ``count`` disks centered at uniformly drawn points of the streak path."""
    if count == 0:
        return img
    if img.pixels.max() <= 0:
        raise ValueError("image contains no streak")
    path = img.path
    if path is None or len(path) < 2:
        raise ValueError("image carries no streak path to place holes on")
    finite = path[np.all(np.isfinite(path), axis=1)]
    pixels = img.pixels.copy()
    h, w = pixels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(count):
        center = _path_point(finite, rng.uniform(0.0, len(finite) - 1))
        radius = 0.5 * rng.uniform(*diameter_range)
        disk = (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius * radius
        pixels[disk] = 0.0
    return img.with_pixels(pixels)


def add_gaussian_noise(img: StreakImage, sigma_noise: float, rng: np.random.Generator) -> StreakImage:
    """Add zero-mean Gaussian noise and clip at zero; expects a unit-peak streak."""
    if sigma_noise == 0:
        return img
    noisy = img.pixels + rng.normal(0.0, sigma_noise, img.pixels.shape)
    return replace(img, pixels=np.maximum(noisy, 0.0), noise_sigma=float(sigma_noise))


_SNR_SIGMAS = {4.0: 0.25, 3.0: 0.33, 2.0: 0.5}


def snr_to_sigma(snr: float) -> float:
    """Noise sigma for a unit-amplitude streak at the given SNR (e.g. 4 -> 0.25)."""
    if snr <= 0:
        raise ValueError("snr must be positive")
    return _SNR_SIGMAS.get(float(snr), 1.0 / snr)
