import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streakfit.observer import (SIDEREAL_DAY, ExposureWindow, ObserverSite, earth_rotation, interpolate_timestamps,
                                jd_to_seconds, random_site, seconds_to_jd, site_eci)
from streakfit.orbit import R_EARTH


def test_uniform_grid():
    np.testing.assert_array_equal(interpolate_timestamps(ExposureWindow(0.0, 5.0, 5)), [0, 1, 2, 3, 4, 5])


def test_single_step_is_endpoints():
    np.testing.assert_array_equal(interpolate_timestamps(ExposureWindow(10.0, 5.0, 1)), [10.0, 15.0])


def test_fine_grid_gap():
    t = interpolate_timestamps(ExposureWindow(0.0, 5.0, 500))
    assert len(t) == 501
    assert np.max(np.diff(t)) == pytest.approx(0.01, abs=1e-12)


def test_zero_steps_rejected():
    with pytest.raises(ValueError):
        ExposureWindow(0.0, 5.0, 0)


@given(st.floats(-1e9, 1e9), st.floats(0.01, 100.0), st.integers(1, 2000))
def test_grid_is_affine_and_hits_endpoints(t0, dt, n):
    w = ExposureWindow(t0, dt, n)
    t = interpolate_timestamps(w)
    assert t[0] == t0 and t[-1] == w.t_end
    assert np.all(np.diff(t) > 0)
    np.testing.assert_allclose(np.diff(t), dt / n, rtol=1e-6, atol=1e-6 * (1 + abs(t0)) / n)


def test_pole_site_fixed():
    site = ObserverSite([0.0, 0.0, 6356.75])
    for epoch in (0.0, 1234.5, 7.7e8):
        np.testing.assert_allclose(site_eci(site, epoch), site.ecef_position, atol=1e-12)


def test_sidereal_day_periodicity():
    site = ObserverSite([R_EARTH, 0.0, 0.0])
    np.testing.assert_allclose(site_eci(site, 5.0e8), site_eci(site, 5.0e8 + SIDEREAL_DAY), atol=1e-6)


def test_quarter_turn_is_orthogonal():
    site = ObserverSite([R_EARTH, 0.0, 0.0])
    a, b = site_eci(site, 3.0e8), site_eci(site, 3.0e8 + SIDEREAL_DAY / 4)
    angle = np.arccos(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1, 1))
    assert angle == pytest.approx(np.pi / 2, abs=1e-9)


@given(st.floats(-1e9, 1e9))
def test_rotation_is_proper(epoch):
    rot = earth_rotation(epoch)
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)
    site = ObserverSite([3000.0, -4000.0, 3950.0])
    assert np.linalg.norm(site_eci(site, epoch)) == pytest.approx(np.linalg.norm(site.ecef_position), rel=1e-14)


def test_random_site_reproducible_and_on_sphere():
    a = random_site(np.random.default_rng(4))
    b = random_site(np.random.default_rng(4))
    np.testing.assert_array_equal(a.ecef_position, b.ecef_position)
    assert np.linalg.norm(a.ecef_position) == pytest.approx(R_EARTH, abs=1e-9)


def test_random_sites_are_centered():
    rng = np.random.default_rng(0)
    pts = np.array([random_site(rng).ecef_position for _ in range(10_000)])
    # each coordinate of a uniform point on the sphere has variance R^2 / 3
    se = R_EARTH / np.sqrt(3.0) / np.sqrt(len(pts))
    assert np.all(np.abs(pts.mean(axis=0)) < 3 * se)


def test_site_radius_validated():
    with pytest.raises(ValueError):
        ObserverSite([7000.0, 0.0, 0.0])


def test_julian_date_round_trip():
    assert float(seconds_to_jd(0.0)) == 2451545.0
    assert float(jd_to_seconds(seconds_to_jd(8.1e8))) == pytest.approx(8.1e8, abs=1e-4)
