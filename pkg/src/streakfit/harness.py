"""Simulated scenarios, accuracy metrics and experiment sweeps."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import iod
from .camera import CameraIntrinsics, Pointing, camera_basis, frames_for_window
from .observer import ExposureWindow, ObserverSite, earth_rotation, elevation, random_unit_vectors
from .optimizer import FitConfig, ObservationSet, fit
from .orbit import (MU_EARTH, R_EARTH, KeplerianElements, OrbitState, elements_to_state, propagate_many,
                    state_to_elements)
from .synth import (DEFAULT_PSF_SIGMA, Crop, StreakImage, add_gaussian_noise, inject_holes, normalize_peak,
                    project_path, render_streak, snr_to_sigma)

log = logging.getLogger(__name__)

ORBIT_TYPES = {
    "A": ((6880.0, 8380.0), (0.0, 0.01)),
    "B": ((8380.0, 9380.0), (0.01, 0.2)),
    "C": ((8380.0, 9380.0), (0.2, 0.4)),
    "D": ((8380.0, 9380.0), (0.4, 0.6)),
}

# gap between first and third image -> (mean, std) of the first-to-second gap
INTERVALS = {60.0: (30.0, 10.0), 120.0: (60.0, 15.0), 240.0: (120.0, 20.0)}

EXPOSURE = 5.0  # s
MIN_STEPS = 64
ELEVATION_RANGE = (20.0, 80.0)  # deg
CROP_MARGIN = (0.30, 0.65)  # fraction of the streak bounding-box diagonal, per side
CROP_DIAGONAL_CAP = 600.0  # px
MIN_STREAK_LENGTH = 100.0  # px; shorter traces are near point sources
LEVELS = ("I", "II", "III", "IV", "V")
# start-point perturbation radius (px) per orbit type and level I..V; each
# matches the published median initial endpoint error for that cell
LEVEL_RADII = {"A": (1.0, 34.0, 69.0, 115.0, 173.0), "B": (1.0, 24.0, 50.0, 84.0, 125.0),
               "C": (1.0, 26.0, 52.0, 86.0, 133.0), "D": (1.0, 27.0, 54.0, 87.0, 134.0)}
METRICS = ("du", "drp", "de", "di", "draan", "dargp", "dnu")


class ScenarioError(RuntimeError):
    """No observable geometry found within the retry budget."""


@dataclass(frozen=True)
class IntervalSpec:
    gap13: float
    gap12_mean: float
    gap12_std: float

    @classmethod
    def for_gap(cls, gap13: float) -> "IntervalSpec":
        mean, std = INTERVALS.get(float(gap13), (gap13 / 2.0, gap13 / 6.0))
        return cls(float(gap13), mean, std)


@dataclass
class Scenario:
    truth_elements: KeplerianElements
    truth_state: OrbitState
    observations: ObservationSet
    noise_sigma: float
    interval: IntervalSpec
    orbit_type: str = ""
    seed: object = None


@dataclass
class MetricsRow:
    phase: str
    du: float
    drp: float
    de: float
    di: float
    draan: float
    dargp: float | None = None
    dnu: float | None = None


def sample_orbit(orbit_type: str, rng: np.random.Generator) -> KeplerianElements:
    (rp_lo, rp_hi), (e_lo, e_hi) = ORBIT_TYPES[orbit_type]
    return KeplerianElements(
        periapsis_radius=rng.uniform(rp_lo, rp_hi),
        eccentricity=rng.uniform(e_lo, e_hi),
        inclination=rng.uniform(0.0, 180.0),
        raan=rng.uniform(0.0, 360.0),
        arg_periapsis=rng.uniform(0.0, 360.0),
        true_anomaly=rng.uniform(0.0, 360.0),
    )


def _random_pointing(los: np.ndarray, intrinsics: CameraIntrinsics, rng) -> Pointing:
    """Pointing that puts direction ``los`` at a random spot of the inner sensor."""
    ref = random_unit_vectors(rng, 1)[0]
    while abs(ref @ los) > 0.99:
        ref = random_unit_vectors(rng, 1)[0]
    right, up, _ = camera_basis(los, ref)
    s = intrinsics.scale_rad
    xi = rng.uniform(-0.3, 0.3) * intrinsics.width * s
    eta = rng.uniform(-0.3, 0.3) * intrinsics.height * s
    return Pointing(los - xi * right - eta * up, ref)


def _crop_around(path, rng, intrinsics: CameraIntrinsics, sigma: float) -> Crop:
    """Streak bounding box grown on each side by a random fraction of its diagonal."""
    lo, hi = path.min(axis=0), path.max(axis=0)
    extent = float(np.hypot(*(hi - lo)))
    pads = np.maximum(rng.uniform(*CROP_MARGIN, size=4) * extent, 4.0 * sigma + 2.0)  # l, t, r, b
    x0 = max(int(np.floor(lo[0] - pads[0])), 0)
    y0 = max(int(np.floor(lo[1] - pads[1])), 0)
    x1 = min(int(np.ceil(hi[0] + pads[2])), intrinsics.width - 1)
    y1 = min(int(np.ceil(hi[1] + pads[3])), intrinsics.height - 1)
    return Crop(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _nearest_corner(crop: Crop, point) -> str:
    corners = {"tl": (0, 0), "tr": (crop.width - 1, 0), "bl": (0, crop.height - 1),
               "br": (crop.width - 1, crop.height - 1)}
    return min(corners, key=lambda c: np.hypot(*(np.asarray(corners[c]) - point)))


def observe(truth: OrbitState, t0: float, rng: np.random.Generator, *, noise_sigma: float = 0.0,
            holes: int = 4, psf_sigma: float = DEFAULT_PSF_SIGMA, intrinsics: CameraIntrinsics | None = None,
            crop_cap: float = CROP_DIAGONAL_CAP, exposure: float = EXPOSURE, max_sites: int = 40,
            min_length: float = MIN_STREAK_LENGTH) -> StreakImage:
    """Simulate one cropped streak image of ``truth`` starting at ``t0``."""
    intrinsics = intrinsics or CameraIntrinsics()
    t_mid = t0 + 0.5 * exposure
    p_mid = propagate_many(truth, [t_mid - truth.epoch])[0][0]
    rot = earth_rotation(t_mid)

    tried = 0
    for _ in range(50):
        ecef = R_EARTH * random_unit_vectors(rng, 4096)
        el = np.degrees(elevation(ecef @ rot.T, p_mid))
        ok = np.flatnonzero((el >= ELEVATION_RANGE[0]) & (el <= ELEVATION_RANGE[1]))
        for idx in ok:
            tried += 1
            if tried > max_sites:
                break
            site = ObserverSite(ecef[idx])
            los = p_mid - rot @ site.ecef_position
            pointing = _random_pointing(los / np.linalg.norm(los), intrinsics, rng)
            coarse = frames_for_window(site, pointing, ExposureWindow(t0, exposure, MIN_STEPS), intrinsics)
            path = project_path(truth, coarse)
            if not np.all(np.isfinite(path)):
                continue
            length = float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))
            if length < min_length:
                continue
            window = ExposureWindow(t0, exposure, max(MIN_STEPS, int(np.ceil(length))))
            frames = frames_for_window(site, pointing, window, intrinsics)
            path = project_path(truth, frames)
            margin = 4.0 * psf_sigma + 2.0
            inside = np.all((path[:, 0] > margin) & (path[:, 0] < intrinsics.width - 1 - margin)
                            & (path[:, 1] > margin) & (path[:, 1] < intrinsics.height - 1 - margin))
            if not inside:
                continue
            crop = _crop_around(path, rng, intrinsics, psf_sigma)
            if crop.diagonal > crop_cap:
                continue
            img = normalize_peak(render_streak(truth, frames, window, psf_sigma, crop))
            corner = _nearest_corner(crop, img.path[0])
            img = StreakImage(img.pixels, window, frames, psf_sigma, img.origin_offset, corner, img.path)
            img = add_gaussian_noise(img, noise_sigma, rng)
            # holes come last so star-removal zeros survive the noise
            return inject_holes(img, rng, count=holes)
        if tried > max_sites:
            break
    raise ScenarioError("no site/pointing produced an admissible streak")


def make_scenario(el: KeplerianElements, orbit_type: str, interval: IntervalSpec, noise_sigma: float,
                  rng: np.random.Generator, *, t_initial: float | None = None, holes: int = 4,
                  psf_sigma: float = DEFAULT_PSF_SIGMA, crop_cap: float = CROP_DIAGONAL_CAP) -> Scenario:
    """Three streak images of the orbit ``el`` (elements at ``t_initial``)."""
    if t_initial is None:
        t_initial = float(rng.uniform(7.0e8, 9.0e8))
    truth = elements_to_state(el, MU_EARTH, t_initial)
    gap13 = interval.gap13
    gap12 = float(np.clip(rng.normal(interval.gap12_mean, interval.gap12_std), 1.0, gap13 - 1.0))
    t1 = t_initial - 0.5 * gap13
    starts = (t1, t1 + gap12, t1 + gap13)
    images = tuple(observe(truth, t0, rng, noise_sigma=noise_sigma, holes=holes, psf_sigma=psf_sigma,
                           crop_cap=crop_cap) for t0 in starts)
    return Scenario(el, truth, ObservationSet(images), noise_sigma, interval, orbit_type)


def random_scenario(orbit_type: str, gap13: float, snr: float | None, rng: np.random.Generator,
                    max_attempts: int = 25, **kwargs) -> Scenario:
    """Sample orbits until one yields an admissible scenario."""
    noise = 0.0 if snr is None else snr_to_sigma(snr)
    interval = IntervalSpec.for_gap(gap13)
    for _ in range(max_attempts):
        el = sample_orbit(orbit_type, rng)
        try:
            return make_scenario(el, orbit_type, interval, noise, rng, **kwargs)
        except ScenarioError:
            continue
    raise ScenarioError(f"no admissible type-{orbit_type} scenario after {max_attempts} orbits")


def endpoint_error(fit_state: OrbitState, truth_state: OrbitState, obs: ObservationSet) -> float:
    """Mean pixel distance between fitted and true streak start/end points."""
    dists = []
    for img in obs.images:
        a = iod.true_endpoints(fit_state, img)
        b = iod.true_endpoints(truth_state, img)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("endpoint projects behind the camera")
        dists.extend(np.linalg.norm(a - b, axis=1))
    return float(np.mean(dists))


def angle_diff(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def orbital_errors(fit_state: OrbitState, truth_elements: KeplerianElements,
                   omit_periapsis_angles: bool | None = None) -> dict:
    """Absolute element deviations; angular ones wrapped into [0, 180] degrees."""
    if omit_periapsis_angles is None:
        omit_periapsis_angles = truth_elements.eccentricity < 0.01
    el = state_to_elements(fit_state)
    out = {
        "drp": abs(el.periapsis_radius - truth_elements.periapsis_radius),
        "de": abs(el.eccentricity - truth_elements.eccentricity),
        "di": abs(el.inclination - truth_elements.inclination),
        "draan": angle_diff(el.raan, truth_elements.raan),
    }
    if not omit_periapsis_angles:
        out["dargp"] = angle_diff(el.arg_periapsis, truth_elements.arg_periapsis)
        out["dnu"] = angle_diff(el.true_anomaly, truth_elements.true_anomaly)
    return out


def metrics_row(phase: str, state: OrbitState, sc: Scenario) -> MetricsRow:
    return MetricsRow(phase, du=endpoint_error(state, sc.truth_state, sc.observations),
                      **orbital_errors(state, sc.truth_elements, sc.orbit_type == "A"))


# ---------------------------------------------------------------------------
# experiment sweeps


@dataclass(frozen=True)
class Cell:
    kind: str
    orbit_type: str
    gap13: float
    snr: float
    mode: str  # "refine" or "end-to-end"
    level: str = "III"

    @property
    def label(self) -> str:
        parts = [f"kind={self.kind}", f"type={self.orbit_type}", f"gap13={self.gap13:g}", f"snr={self.snr:g}",
                 f"mode={self.mode}"]
        if self.mode == "refine":
            parts.append(f"level={self.level}")
        return ";".join(parts)


@dataclass
class TrialResult:
    cell: Cell
    trial: int
    init: MetricsRow | None
    converged: MetricsRow | None
    iterations: int = 0
    runtime: float = 0.0
    error: str = ""


@dataclass
class QuartileRow:
    cell: str
    phase: str
    metric: str
    q1: float
    q2: float
    q3: float
    n_trials: int
    n_failures: int


def experiment_cells(kind: str, orbit_types=("A", "B", "C", "D"), levels=LEVELS, gaps=(60.0, 120.0, 240.0),
                     snrs=(2.0, 3.0, 4.0), modes=("refine", "end-to-end")) -> list[Cell]:
    cells = []
    if kind == "init":
        for level in levels:
            for t in orbit_types:
                cells.append(Cell("init", t, 60.0, 4.0, "refine", level))
    elif kind == "interval":
        for gap in gaps:
            for t in orbit_types:
                for mode in modes:
                    cells.append(Cell("interval", t, float(gap), 4.0, mode))
    elif kind == "snr":
        for snr in snrs:
            for t in orbit_types:
                for mode in modes:
                    cells.append(Cell("snr", t, 120.0, float(snr), mode))
    else:
        raise ValueError(f"unknown experiment kind {kind!r}")
    return cells


def _type_index(t: str) -> int:
    return "ABCD".index(t)


def scenario_rng(seed: int, trial: int, cell: Cell) -> np.random.Generator:
    """Scenario stream shared by all cells with the same type, gap and SNR."""
    return np.random.default_rng([seed + trial, _type_index(cell.orbit_type), int(cell.gap13),
                                  int(round(cell.snr * 100))])


def init_rng(seed: int, trial: int, cell: Cell) -> np.random.Generator:
    level = iod.LEVEL_NAMES[cell.level]
    return np.random.default_rng([seed + trial, _type_index(cell.orbit_type), int(cell.gap13),
                                  int(round(cell.snr * 100)), 7919 + level])


def build_init(sc: Scenario, cell: Cell, rng: np.random.Generator) -> OrbitState:
    if cell.mode == "end-to-end":
        return iod.corner_init(sc.observations)
    radius = LEVEL_RADII[cell.orbit_type][LEVELS.index(cell.level)]
    return iod.degraded_init(sc.truth_state, sc.observations, cell.level, rng, radius=radius)


def run_trial(cell: Cell, trial: int, seed: int, cfg_overrides: dict | None = None,
              init_only: bool = False) -> TrialResult:
    started = time.perf_counter()
    try:
        sc = random_scenario(cell.orbit_type, cell.gap13, cell.snr, scenario_rng(seed, trial, cell))
        o_init = build_init(sc, cell, init_rng(seed, trial, cell))
        init_row = metrics_row("init", o_init, sc)
        if init_only:
            return TrialResult(cell, trial, init_row, None, runtime=time.perf_counter() - started)
        cfg = FitConfig.for_observations(sc.observations, **(cfg_overrides or {}))
        res = fit(sc.observations, o_init, cfg)
        conv_row = metrics_row("converged", res.final_state, sc)
        return TrialResult(cell, trial, init_row, conv_row, res.iterations, time.perf_counter() - started)
    except Exception as exc:  # a failed trial is data, not a crash
        log.warning("trial %d of %s failed: %s", trial, cell.label, exc)
        return TrialResult(cell, trial, None, None, runtime=time.perf_counter() - started,
                           error=f"{type(exc).__name__}: {exc}")


def worker_count() -> int:
    env = os.environ.get("STREAKFIT_THREADS")
    cpus = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    if env:
        return max(1, min(int(env), cpus))
    return cpus


def run_trials(cells, trials: int, seed: int, cfg_overrides: dict | None = None, init_only: bool = False,
               workers: int | None = None) -> list[TrialResult]:
    """Run every (cell, trial) pair; output order never depends on scheduling."""
    if trials < 1:
        raise ValueError("need at least one trial")
    jobs = [(cell, t, seed, cfg_overrides, init_only) for cell in cells for t in range(trials)]
    workers = workers or worker_count()
    if workers <= 1:
        return [run_trial(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_trial, *zip(*jobs)))


def quartiles(values) -> tuple[float, float, float]:
    q = np.percentile(np.asarray(values, dtype=float), [25, 50, 75])
    return float(q[0]), float(q[1]), float(q[2])


def summarize(results: list[TrialResult]) -> list[QuartileRow]:
    by_cell: dict[str, list[TrialResult]] = {}
    for r in results:
        by_cell.setdefault(r.cell.label, []).append(r)
    rows = []
    for label, rs in by_cell.items():
        n = len(rs)
        for phase in ("init", "converged"):
            phase_rows = [getattr(r, phase) for r in rs]
            ok = [row for row in phase_rows if row is not None]
            failures = n - len(ok)
            for metric in METRICS:
                vals = [getattr(row, metric) for row in ok if getattr(row, metric) is not None]
                if not vals:
                    continue
                q1, q2, q3 = quartiles(vals)
                rows.append(QuartileRow(label, phase, metric, q1, q2, q3, n, failures))
    return rows


def run_experiment(kind: str, trials: int = 20, seed: int = 0, cfg_overrides: dict | None = None,
                   init_only: bool = False, workers: int | None = None, **cell_kwargs):
    """Sweep one experiment family; returns ``(quartile_rows, trial_results)``."""
    cells = experiment_cells(kind, **cell_kwargs)
    results = run_trials(cells, trials, seed, cfg_overrides, init_only, workers)
    return summarize(results), results


def trial_record(r: TrialResult) -> dict:
    out = {"cell": r.cell.label, "trial": r.trial, "iterations": r.iterations, "error": r.error}
    for phase in ("init", "converged"):
        row = getattr(r, phase)
        if row is not None:
            out.update({f"{phase}_{k}": v for k, v in asdict(row).items() if k != "phase"})
    return out
