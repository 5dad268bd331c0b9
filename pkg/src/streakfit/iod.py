"""Initial orbit estimates: Gauss angles-only IOD and the initializers built on it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import pixels_to_directions
from .orbit import MU_EARTH, R_EARTH, OrbitState, propagate_to
from .synth import project_path

LEVEL_RADII = {1: 1.0, 2: 25.0, 3: 55.0, 4: 120.0, 5: 160.0}  # px
LEVEL_NAMES = {"I": 1, "II": 2, "III": 3, "IV": 4, "V": 5}


class GaussIODError(ValueError):
    """Degenerate geometry or no physically valid solution."""


@dataclass(frozen=True)
class LosObservation:
    epoch: float
    site_eci: np.ndarray
    los: np.ndarray

    def __post_init__(self):
        los = np.asarray(self.los, dtype=float).reshape(3)
        object.__setattr__(self, "los", los / np.linalg.norm(los))
        object.__setattr__(self, "site_eci", np.asarray(self.site_eci, dtype=float).reshape(3))


def stumpff_c(z):
    if z > 1e-8:
        return (1.0 - np.cos(np.sqrt(z))) / z
    if z < -1e-8:
        return (np.cosh(np.sqrt(-z)) - 1.0) / (-z)
    return 0.5 - z / 24.0 + z * z / 720.0


def stumpff_s(z):
    if z > 1e-8:
        sz = np.sqrt(z)
        return (sz - np.sin(sz)) / sz**3
    if z < -1e-8:
        sz = np.sqrt(-z)
        return (np.sinh(sz) - sz) / sz**3
    return 1.0 / 6.0 - z / 120.0 + z * z / 5040.0


def universal_anomaly(dt, r0, vr0, alpha, mu=MU_EARTH, tol=1e-12, max_iter=100):
    """Solve the universal Kepler equation for the anomaly chi (km^0.5)."""
    sqrt_mu = np.sqrt(mu)
    chi = sqrt_mu * abs(alpha) * dt
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(max_iter):
            z = alpha * chi * chi
            C, S = stumpff_c(z), stumpff_s(z)
            F = r0 * vr0 / sqrt_mu * chi * chi * C + (1 - alpha * r0) * chi**3 * S + r0 * chi - sqrt_mu * dt
            dF = r0 * vr0 / sqrt_mu * chi * (1 - alpha * chi * chi * S) + (1 - alpha * r0) * chi * chi * C + r0
            step = F / dF
            if not np.isfinite(step):
                break
            chi -= step
            if abs(step) < tol * max(1.0, abs(chi)):
                return chi
    raise GaussIODError("universal Kepler equation did not converge")


def lagrange_fg(dt, r_vec, v_vec, mu=MU_EARTH):
    """Exact Lagrange coefficients f, g for a time offset ``dt`` from (r, v)."""
    r0 = np.linalg.norm(r_vec)
    vr0 = r_vec @ v_vec / r0
    alpha = 2.0 / r0 - (v_vec @ v_vec) / mu
    chi = universal_anomaly(dt, r0, vr0, alpha, mu)
    z = alpha * chi * chi
    f = 1.0 - chi * chi / r0 * stumpff_c(z)
    g = dt - chi**3 / np.sqrt(mu) * stumpff_s(z)
    return f, g


def _candidate_ranges(r2_roots, A, B, mu):
    return A + mu * B / r2_roots**3


def gauss_iod(obs, mu: float = MU_EARTH, refine: bool = True, max_iter: int = 100,
              tol: float = 1e-9) -> OrbitState:
    """Classical Gauss angles-only IOD with iterative f, g refinement.

    ``obs`` holds three :class:`LosObservation` in increasing epoch order; the
    returned state is at the middle epoch.
    """
    if len(obs) != 3:
        raise ValueError("Gauss IOD needs exactly three observations")
    o1, o2, o3 = obs
    if not (o1.epoch < o2.epoch < o3.epoch):
        raise ValueError("observation epochs must be strictly increasing")
    q1, q2, q3 = o1.los, o2.los, o3.los
    R1, R2, R3 = o1.site_eci, o2.site_eci, o3.site_eci
    tau1, tau3 = o1.epoch - o2.epoch, o3.epoch - o2.epoch
    tau = tau3 - tau1

    p1, p2, p3 = np.cross(q2, q3), np.cross(q1, q3), np.cross(q1, q2)
    D0 = q1 @ p1
    if abs(D0) < 1e-15:
        raise GaussIODError("line-of-sight vectors are coplanar; geometry is degenerate")
    D = np.array([[R @ p for p in (p1, p2, p3)] for R in (R1, R2, R3)])

    A = (-D[0, 1] * tau3 / tau + D[1, 1] + D[2, 1] * tau1 / tau) / D0
    B = (D[0, 1] * (tau3**2 - tau**2) * tau3 / tau + D[2, 1] * (tau**2 - tau1**2) * tau1 / tau) / (6.0 * D0)
    E = R2 @ q2
    a = -(A * A + 2.0 * A * E + R2 @ R2)
    b = -2.0 * mu * B * (A + E)
    c = -(mu * B) ** 2
    roots = np.roots([1.0, 0, a, 0, 0, b, 0, 0, c])
    real = roots[np.abs(roots.imag) < 1e-6 * np.abs(roots)].real
    r2_roots = np.sort(real[real > R_EARTH])
    if len(r2_roots) == 0:
        raise GaussIODError("no positive real root beyond Earth's radius")

    # prefer the root whose slant range is closest to an object at 1.5 Earth radii
    rho_ref = -E + np.sqrt(max(E * E - R2 @ R2 + (1.5 * R_EARTH) ** 2, 0.0))
    order = np.argsort(np.abs(_candidate_ranges(r2_roots, A, B, mu) - rho_ref))

    best, best_resid = None, np.inf
    for idx in order:
        try:
            state = _gauss_solution(r2_roots[idx], A, B, D, D0, (q1, q2, q3), (R1, R2, R3), tau1, tau3, tau,
                                    mu, refine, max_iter, tol)
        except (GaussIODError, FloatingPointError, ZeroDivisionError):
            continue
        state = OrbitState(o2.epoch, state[0], state[1])
        if not state.is_bound(mu):
            continue
        resid = los_residual(state, obs, mu)
        if resid < best_resid:
            best, best_resid = state, resid
        if resid < 1e-6:
            break
    if best is None:
        raise GaussIODError("no root yields a bound orbit")
    return best


def _gauss_solution(r2, A, B, D, D0, qs, Rs, tau1, tau3, tau, mu, refine, max_iter, tol):
    q1, q2, q3 = qs
    R1, R2, R3 = Rs
    r23 = r2**3
    num1 = 6 * (D[2, 0] * tau1 / tau3 + D[1, 0] * tau / tau3) * r23 + mu * D[2, 0] * (tau**2 - tau1**2) * tau1 / tau3
    rho1 = (num1 / (6 * r23 + mu * (tau**2 - tau3**2)) - D[0, 0]) / D0
    rho2 = A + mu * B / r23
    num3 = 6 * (D[0, 2] * tau3 / tau1 - D[1, 2] * tau / tau1) * r23 + mu * D[0, 2] * (tau**2 - tau3**2) * tau3 / tau1
    rho3 = (num3 / (6 * r23 + mu * (tau**2 - tau1**2)) - D[2, 2]) / D0

    f1 = 1 - 0.5 * mu * tau1**2 / r23
    f3 = 1 - 0.5 * mu * tau3**2 / r23
    g1 = tau1 - mu * tau1**3 / (6 * r23)
    g3 = tau3 - mu * tau3**3 / (6 * r23)
    r1v, r2v, r3v = R1 + rho1 * q1, R2 + rho2 * q2, R3 + rho3 * q3
    v2v = (-f3 * r1v + f1 * r3v) / (f1 * g3 - f3 * g1)
    if not refine:
        return r2v, v2v

    rhos = np.array([rho1, rho2, rho3])
    for _ in range(max_iter):
        try:
            f1n, g1n = lagrange_fg(tau1, r2v, v2v, mu)
            f3n, g3n = lagrange_fg(tau3, r2v, v2v, mu)
        except GaussIODError:
            break
        f1, g1 = 0.5 * (f1 + f1n), 0.5 * (g1 + g1n)
        f3, g3 = 0.5 * (f3 + f3n), 0.5 * (g3 + g3n)
        den = f1 * g3 - f3 * g1
        c1, c3 = g3 / den, -g1 / den
        new = np.array([
            (-D[0, 0] + D[1, 0] / c1 - c3 / c1 * D[2, 0]) / D0,
            (-c1 * D[0, 1] + D[1, 1] - c3 * D[2, 1]) / D0,
            (-c1 / c3 * D[0, 2] + D[1, 2] / c3 - D[2, 2]) / D0,
        ])
        r1v, r2v, r3v = R1 + new[0] * q1, R2 + new[1] * q2, R3 + new[2] * q3
        v2v = (-f3 * r1v + f1 * r3v) / den
        if not np.all(np.isfinite(v2v)):
            raise GaussIODError("refinement diverged")
        done = np.all(np.abs(new - rhos) < tol * np.maximum(1.0, np.abs(new)))
        rhos = new
        if done:
            break
    return r2v, v2v


def los_residual(state: OrbitState, obs, mu: float = MU_EARTH) -> float:
    """Largest angle (rad) between predicted and observed lines of sight."""
    worst = 0.0
    for o in obs:
        p = propagate_to(state, o.epoch, mu).position - o.site_eci
        cosang = np.clip(p @ o.los / np.linalg.norm(p), -1.0, 1.0)
        worst = max(worst, float(np.arccos(cosang)))
    return worst


def backproject(img, pixel, epoch_index: int = 0) -> LosObservation:
    """Line of sight through crop pixel ``pixel`` at one of the image's frame epochs."""
    frames = img.frames
    sensor = np.asarray(pixel, dtype=float) + img.origin_offset
    los = pixels_to_directions(sensor, frames.basis, frames.intrinsics)
    return LosObservation(float(frames.epochs[epoch_index]), frames.observer_eci[epoch_index], los)


def corner_pixel(img, corner: str) -> np.ndarray:
    """Crop-pixel coordinates of a corner tag: ``tl``, ``tr``, ``bl`` or ``br``."""
    h, w = img.pixels.shape
    x = 0.0 if corner[1] == "l" else w - 1.0
    y = 0.0 if corner[0] == "t" else h - 1.0
    return np.array([x, y])


OPPOSITE_CORNER = {"tl": "br", "br": "tl", "tr": "bl", "bl": "tr"}


def _gauss_to(los_obs, epoch: float, mu=MU_EARTH) -> OrbitState:
    state = gauss_iod(sorted(los_obs, key=lambda o: o.epoch), mu)
    return propagate_to(state, epoch, mu)


def corner_init(obs, mu: float = MU_EARTH) -> OrbitState:
    """End-to-end initial state from backprojected crop corners.

    With three or more images, the streak-start corner of the first, middle
    and last image is backprojected at each image's start epoch. A single
    image uses its start and end corners plus the crop center.
    """
    images = obs.images
    for img in images:
        if img.start_corner is None:
            raise ValueError("corner initialisation needs the streak-start corner tag")
    if len(images) >= 3:
        picks = (images[0], images[len(images) // 2], images[-1])
        los = [backproject(img, corner_pixel(img, img.start_corner), 0) for img in picks]
    elif len(images) == 1:
        img = images[0]
        h, w = img.pixels.shape
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        mid = len(img.frames) // 2
        los = [
            backproject(img, corner_pixel(img, img.start_corner), 0),
            backproject(img, center, mid),
            backproject(img, corner_pixel(img, OPPOSITE_CORNER[img.start_corner]), len(img.frames) - 1),
        ]
    else:
        raise ValueError("corner initialisation needs one or at least three images")
    return _gauss_to(los, obs.t_initial, mu)


def true_endpoints(truth: OrbitState, img) -> np.ndarray:
    """Crop-pixel streak start and end of ``truth`` in ``img``."""
    path = project_path(truth, img.frames, img.origin_offset)
    return path[[0, -1]]


def degraded_init(truth: OrbitState, obs, level, rng: np.random.Generator, mu: float = MU_EARTH,
                  max_retries: int = 20, radius: float | None = None) -> OrbitState:
    """Gauss solution from streak starts displaced by a level-dependent radius.

    Each of three images has its true start point moved by ``radius`` pixels
    in a uniformly random direction before backprojection.
    """
    if isinstance(level, str):
        level = LEVEL_NAMES[level]
    if radius is None:
        if level not in LEVEL_RADII:
            raise ValueError(f"unknown level {level}")
        radius = LEVEL_RADII[level]
    images = obs.images
    picks = (images[0], images[len(images) // 2], images[-1]) if len(images) >= 3 else None
    if picks is None:
        raise ValueError("degraded initialisation needs at least three images")
    starts = [true_endpoints(truth, img)[0] for img in picks]
    last_error = None
    for _ in range(max_retries):
        angles = rng.uniform(0.0, 2.0 * np.pi, size=3)
        los = [backproject(img, s + radius * np.array([np.cos(a), np.sin(a)]), 0)
               for img, s, a in zip(picks, starts, angles)]
        try:
            state = _gauss_to(los, obs.t_initial, mu)
        except (GaussIODError, ValueError, RuntimeError) as exc:
            last_error = exc
            continue
        if state.is_bound(mu):
            return state
    raise GaussIODError(f"could not build a level-{level} init: {last_error}")
