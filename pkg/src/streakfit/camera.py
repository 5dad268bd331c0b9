"""Gnomonic (tangent-plane) camera model.

Pixel coordinates are ``(x, y)`` with ``x`` along image columns and ``y``
along rows, increasing downward; ``y`` therefore decreases toward the
camera's up direction. Integer coordinates are pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .observer import ExposureWindow, ObserverSite, interpolate_timestamps, site_eci

ARCSEC = np.pi / (180.0 * 3600.0)


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    pixel_scale: float = 10.0  # arcsec / px
    width: int = 7382
    height: int = 4930
    principal_point: np.ndarray = None

    def __post_init__(self):
        if self.pixel_scale <= 0:
            raise ValueError("pixel_scale must be positive")
        pp = self.principal_point
        if pp is None:
            pp = ((self.width - 1) / 2.0, (self.height - 1) / 2.0)
        pp = np.asarray(pp, dtype=float).reshape(2)
        if not (0 <= pp[0] <= self.width and 0 <= pp[1] <= self.height):
            raise ValueError("principal point outside the image")
        object.__setattr__(self, "principal_point", pp)

    @property
    def scale_rad(self) -> float:
        return self.pixel_scale * ARCSEC


def camera_basis(boresight, up_reference):
    """Orthonormal (right, up, boresight) triad; rows of the returned matrix."""
    a = np.asarray(boresight, dtype=float)
    a = a / np.linalg.norm(a)
    up = np.asarray(up_reference, dtype=float)
    up = up - (up @ a) * a
    n = np.linalg.norm(up)
    if n < 1e-9:
        raise ValueError("up reference is parallel to the boresight")
    up = up / n
    right = np.cross(a, up)
    return np.stack([right, up, a])


@dataclass(frozen=True)
class Pointing:
    """Inertially fixed boresight plus an up reference fixing camera roll."""

    boresight: np.ndarray
    up_reference: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        a = np.asarray(self.boresight, dtype=float).reshape(3)
        object.__setattr__(self, "boresight", a / np.linalg.norm(a))
        up = np.asarray(self.up_reference, dtype=float).reshape(3)
        object.__setattr__(self, "up_reference", up)
        camera_basis(self.boresight, up)  # validates

    @classmethod
    def from_radec(cls, ra_deg: float, dec_deg: float, roll_deg: float = 0.0) -> "Pointing":
        ra, dec, roll = np.radians([ra_deg, dec_deg, roll_deg])
        a = np.array([np.cos(dec) * np.cos(ra), np.cos(dec) * np.sin(ra), np.sin(dec)])
        north = np.array([-np.sin(dec) * np.cos(ra), -np.sin(dec) * np.sin(ra), np.cos(dec)])
        east = np.cross(north, a)
        # roll rotates the up vector from celestial north toward east
        up = np.cos(roll) * north + np.sin(roll) * east
        return cls(a, up)

    def to_radec(self):
        a = self.boresight
        ra = np.degrees(np.arctan2(a[1], a[0])) % 360.0
        dec = np.degrees(np.arcsin(np.clip(a[2], -1.0, 1.0)))
        ra_r, dec_r = np.radians([ra, dec])
        north = np.array([-np.sin(dec_r) * np.cos(ra_r), -np.sin(dec_r) * np.sin(ra_r), np.cos(dec_r)])
        east = np.cross(north, a)
        _, up, _ = camera_basis(a, self.up_reference)
        roll = np.degrees(np.arctan2(up @ east, up @ north)) % 360.0
        return float(ra), float(dec), float(roll)


@dataclass(frozen=True)
class CameraFrame:
    epoch: float
    observer_eci: np.ndarray
    boresight: np.ndarray
    up_reference: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        a = np.asarray(self.boresight, dtype=float).reshape(3)
        if abs(np.linalg.norm(a) - 1.0) > 1e-12:
            a = a / np.linalg.norm(a)
        object.__setattr__(self, "boresight", a)
        object.__setattr__(self, "observer_eci", np.asarray(self.observer_eci, dtype=float).reshape(3))
        object.__setattr__(self, "up_reference", np.asarray(self.up_reference, dtype=float).reshape(3))


def project_directions(dirs, basis, intrinsics: CameraIntrinsics):
    """Project direction vectors ``(n, 3)`` to pixels.

    Returns ``(pixels, in_front)``; pixels of directions behind the tangent
    plane are NaN.
    """
    dirs = np.asarray(dirs, dtype=float)
    local = dirs @ basis.T
    depth = local[..., 2]
    in_front = depth > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.where(in_front, local[..., 0] / depth, np.nan)
        eta = np.where(in_front, local[..., 1] / depth, np.nan)
    s = intrinsics.scale_rad
    cx, cy = intrinsics.principal_point
    return np.stack([cx + xi / s, cy - eta / s], axis=-1), in_front


def world_to_pixel(p_eci, frame: CameraFrame) -> np.ndarray:
    basis = camera_basis(frame.boresight, frame.up_reference)
    d = np.asarray(p_eci, dtype=float) - frame.observer_eci
    d = d / np.linalg.norm(d)
    px, in_front = project_directions(d[None, :], basis, frame.intrinsics)
    if not in_front[0]:
        raise BehindCameraError("target is behind the camera")
    return px[0]


def pixels_to_directions(pixels, basis, intrinsics: CameraIntrinsics) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float)
    s = intrinsics.scale_rad
    cx, cy = intrinsics.principal_point
    xi = (pixels[..., 0] - cx) * s
    eta = -(pixels[..., 1] - cy) * s
    d = basis[2] + xi[..., None] * basis[0] + eta[..., None] * basis[1]
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_to_los(u, frame: CameraFrame) -> np.ndarray:
    basis = camera_basis(frame.boresight, frame.up_reference)
    return pixels_to_directions(np.asarray(u, dtype=float), basis, frame.intrinsics)


@dataclass(frozen=True)
class FrameSequence:
    """Camera frames over one exposure, stored as arrays.

    Iterating yields :class:`CameraFrame` objects, one per timestamp.
    """

    epochs: np.ndarray
    observer_eci: np.ndarray
    pointing: Pointing
    intrinsics: CameraIntrinsics

    def __len__(self):
        return len(self.epochs)

    def __getitem__(self, i) -> CameraFrame:
        return CameraFrame(float(self.epochs[i]), self.observer_eci[i], self.pointing.boresight,
                           self.pointing.up_reference, self.intrinsics)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def basis(self) -> np.ndarray:
        return camera_basis(self.pointing.boresight, self.pointing.up_reference)

    def project(self, positions):
        """Project ECI positions ``(n, 3)``, one per frame, to sensor pixels."""
        d = np.asarray(positions, dtype=float) - self.observer_eci
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return project_directions(d, self.basis, self.intrinsics)


def frames_for_window(site: ObserverSite, pointing: Pointing, window: ExposureWindow,
                      intrinsics: CameraIntrinsics | None = None) -> FrameSequence:
    epochs = interpolate_timestamps(window)
    return FrameSequence(epochs, site_eci(site, epochs), pointing, intrinsics or CameraIntrinsics())
