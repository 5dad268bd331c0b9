"""Streak observation files: a float32 grid plus a JSON sidecar.

Grid layout: 16-byte header (``b"STRK"``, u32 width, u32 height, u32 version,
all little-endian) followed by ``width * height`` little-endian float32
values in row-major order. The sidecar lives next to the grid with the
suffix ``.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, Pointing, frames_for_window
from .observer import ExposureWindow, ObserverSite, earth_rotation, jd_to_seconds, seconds_to_jd
from .orbit import KeplerianElements, OrbitState
from .synth import StreakImage

MAGIC = b"STRK"
VERSION = 1
HEADER = struct.Struct("<4sIII")
GRID_SUFFIX = ".strk"


class ObservationFormatError(ValueError):
    pass


def write_grid(path, pixels) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError("grid must be 2-D")
    h, w = pixels.shape
    payload = np.ascontiguousarray(pixels, dtype="<f4").tobytes()
    Path(path).write_bytes(HEADER.pack(MAGIC, w, h, VERSION) + payload)


def read_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise ObservationFormatError(f"{path}: truncated header")
    magic, w, h, version = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ObservationFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ObservationFormatError(f"{path}: unsupported version {version}")
    if len(data) - HEADER.size != 4 * w * h:
        raise ObservationFormatError(f"{path}: payload size does not match {w}x{h}")
    return np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(h, w).copy()


@dataclass
class Sidecar:
    jd_start: float
    jd_end: float
    site_ecef_km: list
    boresight_ra_deg: float
    boresight_dec_deg: float
    roll_deg: float
    pixel_scale_arcsec: float
    crop_origin_px: list
    psf_sigma_px: float
    n_steps: int
    sensor_size_px: list = field(default_factory=lambda: [7382, 4930])
    start_corner: str | None = None
    noise_sigma: float = 0.0
    truth: dict | None = None

    def validate(self) -> None:
        if not self.jd_end > self.jd_start:
            raise ObservationFormatError("jd_end must be after jd_start")
        if len(self.site_ecef_km) != 3 or len(self.crop_origin_px) != 2:
            raise ObservationFormatError("site needs 3 and crop origin 2 components")
        if self.n_steps < 1 or self.psf_sigma_px <= 0 or self.pixel_scale_arcsec <= 0:
            raise ObservationFormatError("n_steps, psf_sigma_px and pixel_scale_arcsec must be positive")
        if self.start_corner not in (None, "tl", "tr", "bl", "br"):
            raise ObservationFormatError(f"unknown start corner {self.start_corner!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "Sidecar":
        try:
            sc = cls(**d)
        except TypeError as exc:
            raise ObservationFormatError(f"bad sidecar: {exc}") from exc
        sc.validate()
        return sc


def truth_record(state: OrbitState, elements: KeplerianElements | None = None) -> dict:
    rec = {"epoch_jd": seconds_to_jd(state.epoch), "epoch_s": state.epoch,
           "position_km": state.position.tolist(), "velocity_km_s": state.velocity.tolist()}
    if elements is not None:
        el = asdict(elements)
        el["undefined"] = sorted(el["undefined"])
        rec["elements"] = el
    return rec


def truth_from_record(rec: dict) -> OrbitState:
    return OrbitState(float(rec["epoch_s"]), rec["position_km"], rec["velocity_km_s"])


def sidecar_for(img: StreakImage, truth: dict | None = None) -> Sidecar:
    frames = img.frames
    intr = frames.intrinsics
    ra, dec, roll = frames.pointing.to_radec()
    site = ObserverSite(_site_ecef(img))
    return Sidecar(
        jd_start=seconds_to_jd(img.window.t0),
        jd_end=seconds_to_jd(img.window.t_end),
        site_ecef_km=site.ecef_position.tolist(),
        boresight_ra_deg=ra,
        boresight_dec_deg=dec,
        roll_deg=roll,
        pixel_scale_arcsec=intr.pixel_scale,
        crop_origin_px=[float(v) for v in img.origin_offset],
        psf_sigma_px=img.psf_sigma,
        n_steps=img.window.steps,
        sensor_size_px=[intr.width, intr.height],
        start_corner=img.start_corner,
        noise_sigma=img.noise_sigma,
        truth=truth,
    )


def _site_ecef(img: StreakImage) -> np.ndarray:
    return earth_rotation(float(img.frames.epochs[0])).T @ img.frames.observer_eci[0]


def save_observation(path, img: StreakImage, truth: dict | None = None) -> tuple[Path, Path]:
    """Write ``path`` (grid) and its ``.json`` sidecar; returns both paths."""
    grid = Path(path)
    side = grid.with_suffix(".json")
    write_grid(grid, img.pixels)
    meta = asdict(sidecar_for(img, truth))
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return grid, side


def load_observation(path) -> StreakImage:
    grid = Path(path)
    side = grid.with_suffix(".json")
    if not side.exists():
        raise ObservationFormatError(f"missing sidecar {side}")
    try:
        meta = Sidecar.from_dict(json.loads(side.read_text()))
    except json.JSONDecodeError as exc:
        raise ObservationFormatError(f"{side}: {exc}") from exc
    pixels = read_grid(grid)
    t0, t1 = jd_to_seconds(meta.jd_start), jd_to_seconds(meta.jd_end)
    window = ExposureWindow(t0, t1 - t0, meta.n_steps)
    intr = CameraIntrinsics(meta.pixel_scale_arcsec, *meta.sensor_size_px)
    pointing = Pointing.from_radec(meta.boresight_ra_deg, meta.boresight_dec_deg, meta.roll_deg)
    frames = frames_for_window(ObserverSite(meta.site_ecef_km), pointing, window, intr)
    return StreakImage(pixels.astype(float), window, frames, meta.psf_sigma_px, meta.crop_origin_px,
                       meta.start_corner, None, meta.noise_sigma)


def load_sidecar(path) -> Sidecar:
    return Sidecar.from_dict(json.loads(Path(path).with_suffix(".json").read_text()))
