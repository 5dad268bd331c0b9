import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streakfit.io import (HEADER, ObservationFormatError, Sidecar, load_observation, load_sidecar, read_grid,
                          save_observation, truth_from_record, truth_record, write_grid)
from streakfit.synth import project_path

float32_grids = arrays(np.float32, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                       elements=st.floats(width=32, allow_nan=False))


@settings(max_examples=40)
@given(float32_grids)
def test_grid_round_trip_bit_exact(tmp_path_factory, grid):
    path = tmp_path_factory.mktemp("g") / "x.strk"
    write_grid(path, grid)
    back = read_grid(path)
    assert back.dtype == np.float32
    assert back.tobytes() == grid.astype("<f4").tobytes()


def test_grid_header_layout(tmp_path):
    path = tmp_path / "x.strk"
    write_grid(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    data = path.read_bytes()
    assert HEADER.size == 16
    assert data[:4] == b"STRK"
    assert struct.unpack("<III", data[4:16]) == (3, 2, 1)
    assert len(data) == 16 + 6 * 4
    assert struct.unpack("<f", data[16 + 4:16 + 8])[0] == 1.0  # row-major


def test_grid_rejects_bad_files(tmp_path):
    good = tmp_path / "g.strk"
    write_grid(good, np.ones((2, 2), dtype=np.float32))
    data = good.read_bytes()
    cases = {"magic": b"XXXX" + data[4:], "version": data[:12] + struct.pack("<I", 9) + data[16:],
             "short": data[:-4], "header": data[:10]}
    for name, blob in cases.items():
        p = tmp_path / f"{name}.strk"
        p.write_bytes(blob)
        with pytest.raises(ObservationFormatError):
            read_grid(p)


def test_write_grid_needs_2d(tmp_path):
    with pytest.raises(ValueError):
        write_grid(tmp_path / "x.strk", np.zeros(4))


def _sidecar(**over):
    base = dict(jd_start=2460000.5, jd_end=2460000.50006, site_ecef_km=[6378.0, 0.0, 0.0], boresight_ra_deg=10.0,
                boresight_dec_deg=20.0, roll_deg=0.0, pixel_scale_arcsec=1.5, crop_origin_px=[10.0, 20.0],
                psf_sigma_px=1.0, n_steps=100)
    base.update(over)
    return base


def test_sidecar_validation():
    Sidecar.from_dict(_sidecar())
    for bad in (dict(jd_end=2460000.5), dict(site_ecef_km=[1.0, 2.0]), dict(n_steps=0), dict(psf_sigma_px=0.0),
                dict(start_corner="xx"), dict(unknown_key=1)):
        with pytest.raises(ObservationFormatError):
            Sidecar.from_dict(_sidecar(**bad))


def test_observation_round_trip(tmp_path, scenario_a):
    sc = scenario_a
    truth = truth_record(sc.truth_state, sc.truth_elements)
    for m, img in enumerate(sc.observations.images):
        grid, side = save_observation(tmp_path / f"o{m}.strk", img, truth)
        assert side == grid.with_suffix(".json")
        back = load_observation(grid)
        np.testing.assert_array_equal(back.pixels, img.pixels.astype(np.float32))
        assert back.psf_sigma == img.psf_sigma
        assert back.start_corner == img.start_corner
        assert back.noise_sigma == img.noise_sigma
        assert back.window.steps == img.window.steps
        # Julian dates in float64 resolve ~1e-5 s, well under a millipixel of motion
        a = project_path(sc.truth_state, img.frames, img.origin_offset)
        b = project_path(sc.truth_state, back.frames, back.origin_offset)
        assert np.abs(a - b).max() < 1e-3
        assert load_sidecar(grid).truth == json.loads(json.dumps(truth))


def test_truth_record_round_trip(scenario_a):
    rec = json.loads(json.dumps(truth_record(scenario_a.truth_state, scenario_a.truth_elements)))
    state = truth_from_record(rec)
    assert state.as_vector().tolist() == scenario_a.truth_state.as_vector().tolist()
    assert state.epoch == scenario_a.truth_state.epoch
    assert rec["elements"]["eccentricity"] == scenario_a.truth_elements.eccentricity


def test_missing_sidecar(tmp_path):
    write_grid(tmp_path / "lonely.strk", np.ones((2, 2), dtype=np.float32))
    with pytest.raises(ObservationFormatError):
        load_observation(tmp_path / "lonely.strk")


def test_malformed_sidecar_json(tmp_path):
    write_grid(tmp_path / "x.strk", np.ones((2, 2), dtype=np.float32))
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(ObservationFormatError):
        load_observation(tmp_path / "x.strk")
