"""Two-body orbit states, Keplerian element conversions and propagation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MU_EARTH = 398600.4418  # km^3/s^2, WGS-84
R_EARTH = 6378.137  # km, WGS-84 equatorial radius

KEPLER_TOL = 1e-12  # rad
KEPLER_MAX_ITER = 50

# below these, the corresponding angles are reported as undefined
ECC_UNDEFINED_TOL = 1e-8
INC_UNDEFINED_TOL_DEG = 1e-8


class UnsupportedOrbitError(ValueError):
    """Raised for parabolic or hyperbolic input where only ellipses are handled."""


class DegenerateOrbitError(ValueError):
    """Raised for rectilinear (zero angular momentum) states."""


class KeplerConvergenceError(RuntimeError):
    """Raised when Newton iteration on Kepler's equation does not converge."""


@dataclass(frozen=True)
class OrbitState:
    """Cartesian state in the Earth-centered inertial frame.

    ``epoch`` is in seconds past J2000, ``position`` in km and ``velocity``
    in km/s.
    """

    epoch: float
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, epoch: float, vec) -> "OrbitState":
        vec = np.asarray(vec, dtype=float)
        return cls(epoch, vec[:3], vec[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    def energy(self, mu: float = MU_EARTH) -> float:
        return 0.5 * float(self.velocity @ self.velocity) - mu / float(np.linalg.norm(self.position))

    def angular_momentum(self) -> np.ndarray:
        return np.cross(self.position, self.velocity)

    def is_bound(self, mu: float = MU_EARTH) -> bool:
        return bool(np.all(np.isfinite(self.as_vector()))) and self.energy(mu) < 0.0


@dataclass(frozen=True)
class KeplerianElements:
    """Classical elements with periapsis radius instead of semi-major axis.

    Angles are in degrees. ``undefined`` lists element names that carry no
    information for the orbit (e.g. ``"arg_periapsis"`` for a circular orbit);
    their stored values are the conventional substitutes that still
    reproduce the state.
    """

    periapsis_radius: float
    eccentricity: float
    inclination: float
    raan: float
    arg_periapsis: float
    true_anomaly: float
    undefined: frozenset = field(default_factory=frozenset)

    @property
    def semi_major_axis(self) -> float:
        return self.periapsis_radius / (1.0 - self.eccentricity)

    def period(self, mu: float = MU_EARTH) -> float:
        return 2.0 * np.pi * np.sqrt(self.semi_major_axis**3 / mu)


def _wrap360(deg):
    out = np.mod(deg, 360.0)
    # np.mod can return 360.0 for tiny negative inputs
    return 0.0 if out >= 360.0 else float(out)


def elements_to_state(el: KeplerianElements, mu: float = MU_EARTH, epoch: float = 0.0) -> OrbitState:
    e = el.eccentricity
    if e >= 1.0:
        raise UnsupportedOrbitError(f"eccentricity {e} >= 1 is not supported")
    if e < 0.0 or el.periapsis_radius <= 0.0:
        raise ValueError("need e >= 0 and r_p > 0")
    if mu <= 0.0:
        raise ValueError("mu must be positive")

    p = el.periapsis_radius * (1.0 + e)  # semi-latus rectum
    i, raan, argp, nu = np.radians([el.inclination, el.raan, el.arg_periapsis, el.true_anomaly])
    r = p / (1.0 + e * np.cos(nu))

    r_pqw = np.array([r * np.cos(nu), r * np.sin(nu), 0.0])
    v_pqw = np.sqrt(mu / p) * np.array([-np.sin(nu), e + np.cos(nu), 0.0])

    cO, sO = np.cos(raan), np.sin(raan)
    cw, sw = np.cos(argp), np.sin(argp)
    ci, si = np.cos(i), np.sin(i)
    rot = np.array([
        [cO * cw - sO * sw * ci, -cO * sw - sO * cw * ci, sO * si],
        [sO * cw + cO * sw * ci, -sO * sw + cO * cw * ci, -cO * si],
        [sw * si, cw * si, ci],
    ])
    return OrbitState(epoch, rot @ r_pqw, rot @ v_pqw)


def state_to_elements(s: OrbitState, mu: float = MU_EARTH) -> KeplerianElements:
    r_vec, v_vec = s.position, s.velocity
    r = np.linalg.norm(r_vec)
    h_vec = np.cross(r_vec, v_vec)
    h = np.linalg.norm(h_vec)
    if h < 1e-10 * r * np.linalg.norm(v_vec) or h == 0.0:
        raise DegenerateOrbitError("rectilinear orbit: angular momentum vanishes")

    e_vec = np.cross(v_vec, h_vec) / mu - r_vec / r
    e = float(np.linalg.norm(e_vec))
    if e >= 1.0:
        raise UnsupportedOrbitError(f"state is unbound (e={e:.6g})")

    inc = np.degrees(np.arccos(np.clip(h_vec[2] / h, -1.0, 1.0)))
    n_vec = np.array([-h_vec[1], h_vec[0], 0.0])
    n = np.linalg.norm(n_vec)

    undefined = set()
    equatorial = inc < INC_UNDEFINED_TOL_DEG or inc > 180.0 - INC_UNDEFINED_TOL_DEG
    circular = e < ECC_UNDEFINED_TOL

    # reference direction in the orbit plane for the "longitude" style angles
    if equatorial:
        raan = 0.0
        undefined.add("raan")
        node = np.array([1.0, 0.0, 0.0])
    else:
        raan = np.degrees(np.arctan2(n_vec[1], n_vec[0]))
        node = n_vec / n

    h_hat = h_vec / h
    if circular:
        argp = 0.0
        undefined.update({"arg_periapsis", "true_anomaly"})
        periapsis_dir = node
    else:
        periapsis_dir = e_vec / e
        argp = np.degrees(np.arctan2(np.cross(node, periapsis_dir) @ h_hat, node @ periapsis_dir))

    nu = np.degrees(np.arctan2(np.cross(periapsis_dir, r_vec) @ h_hat, periapsis_dir @ r_vec))

    p = h * h / mu
    return KeplerianElements(
        periapsis_radius=float(p / (1.0 + e)),
        eccentricity=e,
        inclination=float(inc),
        raan=_wrap360(raan),
        arg_periapsis=_wrap360(argp),
        true_anomaly=_wrap360(nu),
        undefined=frozenset(undefined),
    )


def solve_kepler(mean_anomaly, e, tol: float = KEPLER_TOL, max_iter: int = KEPLER_MAX_ITER):
    """Newton iteration for E - e sin E = M; accepts arrays for ``mean_anomaly``."""
    M = np.asarray(mean_anomaly, dtype=float)
    turns = np.round(M / (2.0 * np.pi))
    M = M - 2.0 * np.pi * turns
    if e < 0.8:
        E = M + e * np.sin(M)
    else:
        E = np.where(M >= 0.0, np.pi, -np.pi) + 0.0 * M
    for _ in range(max_iter):
        delta = (E - e * np.sin(E) - M) / (1.0 - e * np.cos(E))
        E = E - delta
        if np.all(np.abs(delta) < tol):
            return E + 2.0 * np.pi * turns
    raise KeplerConvergenceError(f"Kepler solver did not converge (e={e})")


def propagate_many(s: OrbitState, dts, mu: float = MU_EARTH):
    """Propagate ``s`` by each offset in ``dts`` (seconds).

    Returns ``(positions, velocities)`` with shape ``(len(dts), 3)``. Uses the
    Lagrange f and g functions written in eccentric-anomaly differences so
    near-circular orbits stay well conditioned.
    """
    dts = np.atleast_1d(np.asarray(dts, dtype=float))
    r0_vec, v0_vec = s.position, s.velocity
    if not (np.all(np.isfinite(r0_vec)) and np.all(np.isfinite(v0_vec))):
        raise ValueError("non-finite state")
    r0 = float(np.sqrt(r0_vec @ r0_vec))
    v2 = float(v0_vec @ v0_vec)
    energy = 0.5 * v2 - mu / r0
    if energy >= 0.0:
        raise UnsupportedOrbitError("only bound orbits can be propagated")
    a = -mu / (2.0 * energy)
    sqrt_mua = np.sqrt(mu * a)
    n = np.sqrt(mu / a**3)

    ecosE0 = 1.0 - r0 / a
    esinE0 = float(r0_vec @ v0_vec) / sqrt_mua
    e = float(np.hypot(ecosE0, esinE0))
    E0 = np.arctan2(esinE0, ecosE0)
    M0 = E0 - esinE0

    E = solve_kepler(M0 + n * dts, e)
    dE = E - E0
    cdE, sdE = np.cos(dE), np.sin(dE)

    f = 1.0 - a / r0 * (1.0 - cdE)
    g = dts - (dE - sdE) / n
    r = a + (r0 - a) * cdE + esinE0 * a * sdE  # |r| = a (1 - e cos E)
    fdot = -sqrt_mua * sdE / (r * r0)
    gdot = 1.0 - a / r * (1.0 - cdE)

    pos = f[:, None] * r0_vec + g[:, None] * v0_vec
    vel = fdot[:, None] * r0_vec + gdot[:, None] * v0_vec
    return pos, vel


def propagate_kepler(s: OrbitState, dt: float, mu: float = MU_EARTH) -> OrbitState:
    if dt == 0.0:
        return OrbitState(s.epoch, s.position.copy(), s.velocity.copy())
    pos, vel = propagate_many(s, [dt], mu)
    return OrbitState(s.epoch + dt, pos[0], vel[0])


def propagate_to(s: OrbitState, epoch: float, mu: float = MU_EARTH) -> OrbitState:
    return propagate_kepler(s, epoch - s.epoch, mu)


def two_body_rhs(t, y, mu: float = MU_EARTH):
    """Right-hand side of the two-body ODE for stacked states ``(..., 6)`` flattened."""
    y = y.reshape(-1, 6)
    r = y[:, :3]
    rn = np.linalg.norm(r, axis=1, keepdims=True)
    out = np.empty_like(y)
    out[:, :3] = y[:, 3:]
    out[:, 3:] = -mu * r / rn**3
    return out.ravel()
