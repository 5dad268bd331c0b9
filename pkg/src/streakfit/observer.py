"""Observer site positions, Earth rotation and exposure timestamp grids.

All epochs are seconds past J2000 (JD 2451545.0), treated as UT1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .orbit import R_EARTH

J2000_JD = 2451545.0
SECONDS_PER_DAY = 86400.0

# IAU 1982 GMST polynomial, seconds of sidereal time vs Julian centuries of UT1
_GMST_COEFFS = (67310.54841, 876600.0 * 3600.0 + 8640184.812866, 0.093104, -6.2e-6)
SIDEREAL_RATIO = _GMST_COEFFS[1] / (36525.0 * SECONDS_PER_DAY)
SIDEREAL_DAY = SECONDS_PER_DAY / SIDEREAL_RATIO  # ~86164.0905 s
EARTH_ROTATION_RATE = 2.0 * np.pi / SIDEREAL_DAY  # rad/s


def jd_to_seconds(jd):
    return (np.asarray(jd, dtype=float) - J2000_JD) * SECONDS_PER_DAY


def seconds_to_jd(t):
    return np.asarray(t, dtype=float) / SECONDS_PER_DAY + J2000_JD


@dataclass(frozen=True)
class ObserverSite:
    ecef_position: np.ndarray  # km

    def __post_init__(self):
        r = np.asarray(self.ecef_position, dtype=float).reshape(3)
        object.__setattr__(self, "ecef_position", r)
        norm = np.linalg.norm(r)
        if not 6356.0 - 1e-6 <= norm <= 6400.0:
            raise ValueError(f"site radius {norm:.3f} km is not near Earth's surface")


@dataclass(frozen=True)
class ExposureWindow:
    t0: float
    duration: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("exposure window needs at least one step")
        if not self.duration > 0.0:
            raise ValueError("exposure duration must be positive")

    @property
    def t_end(self) -> float:
        return self.t0 + self.duration


def interpolate_timestamps(w: ExposureWindow) -> np.ndarray:
    """Uniform grid of ``steps + 1`` epochs hitting both exposure endpoints."""
    if w.steps < 1:
        raise ValueError("steps must be >= 1")
    n = np.arange(w.steps + 1, dtype=float)
    t = w.t0 + n * w.duration / w.steps
    t[-1] = w.t0 + w.duration
    return t


def gmst(epoch):
    """Greenwich mean sidereal angle in radians for ``epoch`` (s past J2000)."""
    epoch = np.asarray(epoch, dtype=float)
    T = epoch / (36525.0 * SECONDS_PER_DAY)
    c0, c1, c2, c3 = _GMST_COEFFS
    sec = np.mod(c0 + epoch * SIDEREAL_RATIO + (c2 + c3 * T) * T * T, SECONDS_PER_DAY)
    return sec * (2.0 * np.pi / SECONDS_PER_DAY)


def earth_rotation(epoch) -> np.ndarray:
    """ECEF -> ECI rotation matrix (or stack of them) about the pole."""
    theta = gmst(epoch)
    c, s = np.cos(theta), np.sin(theta)
    z, o = np.zeros_like(c), np.ones_like(c)
    rot = np.array([[c, -s, z], [s, c, z], [z, z, o]])
    return np.moveaxis(rot, (0, 1), (-2, -1)) if rot.ndim > 2 else rot


def site_eci(site: ObserverSite, epoch):
    """Inertial site position(s) in km; vectorized over ``epoch``."""
    theta = gmst(epoch)
    x, y, z = site.ecef_position
    c, s = np.cos(theta), np.sin(theta)
    out = np.stack([c * x - s * y, s * x + c * y, np.broadcast_to(z, np.shape(c))], axis=-1)
    return out


def random_site(rng: np.random.Generator) -> ObserverSite:
    """Site drawn uniformly on the sphere of Earth's equatorial radius."""
    return ObserverSite(R_EARTH * random_unit_vectors(rng, 1)[0])


def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def elevation(site_eci_pos, target_eci) -> np.ndarray:
    """Elevation angle (rad) of the target above the spherical local horizon."""
    site_eci_pos = np.asarray(site_eci_pos, dtype=float)
    los = np.asarray(target_eci, dtype=float) - site_eci_pos
    up = site_eci_pos / np.linalg.norm(site_eci_pos, axis=-1, keepdims=True)
    sin_el = np.sum(los * up, axis=-1) / np.linalg.norm(los, axis=-1)
    return np.arcsin(np.clip(sin_el, -1.0, 1.0))
