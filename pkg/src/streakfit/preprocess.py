"""Per-image conditioning shared by observed and generated streak images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NoSignalError(ValueError):
    """Raised when nothing is left above the background level."""


@dataclass(frozen=True)
class PreprocessedImage:
    pixels: np.ndarray  # unit-peak, background-subtracted, blurred
    background_level: float
    streak_scale: float
    sir: float
    zero_mask: np.ndarray
    kernel_size: int


def _running_mean(a: np.ndarray, k: int, axis: int) -> np.ndarray:
    r = k // 2
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    padded = np.zeros((n + 2 * r + 1,) + a.shape[1:])
    padded[r + 1:r + 1 + n] = a
    c = padded.cumsum(axis=0)
    return np.moveaxis(c[k:k + n] - c[:n], 0, axis)


def box_blur(img, k: int) -> np.ndarray:
    """Mean over the k x k neighborhood, zero padding outside the grid."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    img = np.asarray(img, dtype=float)
    if k == 1:
        return img.copy()
    # separable running sums; exact for integer-valued content
    return _running_mean(_running_mean(img, k, 0), k, 1) / (k * k)


def estimate_background(blurred) -> float:
    return float(np.median(blurred))


def subtract_background(blurred, beta: float, rescale: bool = True) -> np.ndarray:
    """Clamp ``blurred - beta`` at zero, then rescale so the maximum is one."""
    if beta < 0:
        raise ValueError("background level must be non-negative")
    out = np.maximum(np.asarray(blurred, dtype=float) - beta, 0.0)
    if not rescale:
        return out
    peak = out.max()
    if peak <= 0:
        raise NoSignalError("no pixel exceeds the background level")
    return out / peak


def streak_scale(img, eta: float) -> float:
    """Median of the brightest ``ceil(eta * n)`` pixels."""
    if not 0 < eta < 1:
        raise ValueError("eta must be a fraction in (0, 1)")
    flat = np.asarray(img, dtype=float).ravel()
    n_top = max(1, int(np.ceil(eta * flat.size)))
    top = np.partition(flat, flat.size - n_top)[flat.size - n_top:]
    return float(np.median(top))


def compute_sir(img, alpha: float) -> float:
    """Fraction of pixels at or above the streak scale."""
    if not alpha > 0:
        raise ValueError("streak scale must be positive")
    img = np.asarray(img)
    count = int(np.count_nonzero(img >= alpha))
    if count == 0:
        raise NoSignalError("no streak pixels at the given scale")
    return count / img.size


def compute_weights(sirs) -> np.ndarray:
    sirs = np.asarray(sirs, dtype=float)
    if np.any(sirs <= 0):
        raise ValueError("SIRs must be positive")
    return sirs.max() / sirs


def zero_mask(observed) -> np.ndarray:
    return (np.asarray(observed) != 0).astype(float)


def preprocess(observed, k: int, eta: float) -> PreprocessedImage:
    """Mask, blur, background-subtract and measure one observed image."""
    observed = np.asarray(observed, dtype=float)
    mask = zero_mask(observed)
    blurred = box_blur(observed, k)
    beta = estimate_background(blurred)
    cleaned = subtract_background(blurred, beta)
    alpha = streak_scale(cleaned, eta)
    return PreprocessedImage(cleaned, beta, alpha, compute_sir(cleaned, alpha), mask, k)
