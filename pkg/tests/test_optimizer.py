import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streakfit import harness, iod
from streakfit import preprocess as pp
from streakfit.optimizer import (AdamState, FitConfig, NonFiniteLossWarning, ObservationSet, StageLoss,
                                 adam_step, converged, effective_k_max, fit, gradient, hyperparameters_for, image_loss,
                                 kernel_schedule, preconditioner, total_loss)
from streakfit.orbit import OrbitState

vectors = arrays(np.float64, 6, elements=st.floats(-1e4, 1e4))


# ------------------------------------------------------------------ losses

def test_image_loss_hand_value():
    a = np.zeros((2, 2))
    assert image_loss(a + 1.0, a) == pytest.approx(0.5, abs=0.0)
    assert image_loss(a, a) == 0.0


def test_image_loss_shape_mismatch():
    with pytest.raises(ValueError):
        image_loss(np.zeros((2, 2)), np.zeros((2, 3)))


@given(arrays(np.float64, (4, 5), elements=st.floats(-100, 100)),
       arrays(np.float64, (4, 5), elements=st.floats(-100, 100)), st.floats(0.1, 10))
def test_image_loss_symmetric_and_homogeneous(a, b, c):
    assert image_loss(a, b) == image_loss(b, a)
    assert image_loss(c * a, c * b) == pytest.approx(c * image_loss(a, b), rel=1e-12, abs=1e-300)


def test_total_loss_at_truth_noiseless(clean_scenario_b):
    sc = clean_scenario_b
    truth = sc.truth_state
    for k in (51, 13, 3):
        total, losses = total_loss(truth, sc.observations, k)
        assert np.all(losses < 1e-6)
        assert total < 1e-6


def test_single_image_reduction(clean_scenario_b):
    sc = clean_scenario_b
    one = ObservationSet(sc.observations.images[:1])
    o = iod.degraded_init(sc.truth_state, sc.observations, 2, np.random.default_rng(3))
    stage = StageLoss(one, 13, 0.001, o.epoch)
    assert stage.weights.tolist() == [1.0]
    total, losses = total_loss(o, one, 13)
    gen = stage.generated(o.as_vector())[0]
    assert total == losses[0]
    assert total == pytest.approx(image_loss(gen, stage.prepared[0].pixels), rel=1e-9)


def test_sir_weights_balance_image_size():
    # same streak in an n-pixel and a 2n-pixel image: SIRs s and s/2
    small = np.zeros((20, 20))
    small[10, 3:17] = 1.0
    large = np.zeros((20, 40))
    large[10, 3:17] = 1.0
    sirs = [pp.compute_sir(img, 1.0) for img in (small, large)]
    assert sirs[0] == pytest.approx(2 * sirs[1])
    weights = pp.compute_weights(sirs)
    dev_small = small + 0.25 * (small > 0)
    dev_large = large + 0.25 * (large > 0)
    weighted = weights * [image_loss(dev_small, small), image_loss(dev_large, large)]
    assert weighted[0] == pytest.approx(weighted[1], rel=1e-12)


def test_fast_loss_matches_full_grid(scenario_a):
    obs = scenario_a.observations
    o = iod.degraded_init(scenario_a.truth_state, obs, 3, np.random.default_rng(2))
    for amplitude in ("least_squares", "streak_scale"):
        for k in (101, 25, 3):
            stage = StageLoss(obs, k, 0.001, obs.t_initial, amplitude)
            for vec in (o.as_vector(), scenario_a.truth_state.as_vector()):
                np.testing.assert_allclose(stage.image_losses(vec), stage.reference_losses(vec),
                                           rtol=1e-9, atol=1e-15)


def test_unrenderable_state_gets_sentinel(scenario_a):
    obs = scenario_a.observations
    stage = StageLoss(obs, 25, 0.001, obs.t_initial)
    vec = scenario_a.truth_state.as_vector().copy()
    vec[3:] *= 5.0  # hyperbolic
    assert np.all(stage.image_losses(vec) == 1.0)


# ---------------------------------------------------------------- gradient

@settings(max_examples=50)
@given(vectors)
def test_gradient_of_quadratic(x):
    # roundoff is ~eps * |x|^2 / h, so h grows with |x|
    norm = max(float(np.linalg.norm(x)), 1.0)
    g = gradient(lambda v: float(v @ v), x, 1e-2 * norm)
    assert np.linalg.norm(g - 2 * x) <= 1e-10 * 2 * norm


def test_gradient_of_constant():
    assert np.all(gradient(lambda v: 3.0, np.arange(6.0), 0.1) == 0.0)


def test_gradient_scale_per_component():
    x = np.arange(1.0, 7.0)
    g = gradient(lambda v: float(v @ v), x, 1e-4, scale=np.full(6, 10.0))
    np.testing.assert_allclose(g, 2 * x, rtol=1e-10)


def test_gradient_non_finite_component_zeroed():
    def f(v):
        return np.inf if v[2] > 1.0 else float(v @ v)

    with pytest.warns(NonFiniteLossWarning):
        g = gradient(f, np.ones(6), 0.1)
    assert g[2] == 0.0
    np.testing.assert_allclose(np.delete(g, 2), 2.0)


def test_gradient_rejects_bad_step():
    with pytest.raises(ValueError):
        gradient(lambda v: 0.0, np.zeros(6), 0.0)


def _richardson(obs, o, stage, h):
    cfg = FitConfig.for_observations(obs)
    basis = preconditioner(cfg, o, obs)
    x0 = o.as_vector()

    def f(z):
        return stage(x0 + basis @ z)

    z = np.zeros(6)
    g1, g2, g3 = (gradient(f, z, h / d) for d in (1, 2, 4))
    return np.linalg.norm(g1 - g2) / np.linalg.norm(g2 - g3)


def test_gradient_richardson_on_fit_loss(scenario_a):
    # halving h should shrink the truncation error four-fold
    obs = scenario_a.observations
    stage = StageLoss(obs, 25, 0.001, obs.t_initial)
    o = iod.degraded_init(scenario_a.truth_state, obs, 2, np.random.default_rng(4), radius=10.0)
    assert 3.0 <= _richardson(obs, o, stage, 0.02) <= 5.0


def test_richardson_small_step_limited_by_psf_cutoff(scenario_a, monkeypatch):
    # with a wider PSF cutoff the O(h^2) regime extends to steps 10x smaller
    import streakfit.optimizer as opt
    from streakfit import synth

    obs = scenario_a.observations
    o = iod.degraded_init(scenario_a.truth_state, obs, 2, np.random.default_rng(4), radius=10.0)
    monkeypatch.setattr(opt, "PSF_TRUNCATE", 8.0)
    monkeypatch.setattr(opt, "splat", lambda c, s, sig: synth.splat(c, s, sig, 8.0))
    stage = StageLoss(obs, 25, 0.001, obs.t_initial)
    assert _richardson(obs, o, stage, 0.002) == pytest.approx(4.0, abs=0.3)


# -------------------------------------------------------------------- ADAM

@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-3)))
def test_adam_first_step_is_signed_step(g):
    update, state = adam_step(g, AdamState.zeros(6), 0.02)
    np.testing.assert_allclose(update, -0.02 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.all(np.sign(update) == -np.sign(g))
    assert state.iteration == 1


def test_adam_zero_gradient():
    state = AdamState.zeros(6)
    for _ in range(20):
        update, state = adam_step(np.zeros(6), state, 0.1)
        assert np.all(update == 0.0)


def test_adam_constant_gradient_tends_to_step():
    g = np.array([1.0, -2.0, 3.0, 0.5, -0.1, 7.0])
    state = AdamState.zeros(6)
    for _ in range(5000):
        update, state = adam_step(g, state, 0.05)
        assert np.all(np.abs(update) <= 0.05 * (1 + 1e-8))
    np.testing.assert_allclose(np.abs(update), 0.05, rtol=1e-6)


# -------------------------------------------------------------- convergence

def test_converged_decaying_diffs():
    diffs = [list(np.geomspace(1.0, 0.01, 40))]
    assert converged(diffs, 0.3, 10)


def test_converged_constant_diffs_never():
    assert not converged([[0.5] * 100], 0.3, 10)


def test_converged_short_history():
    assert not converged([[1.0, 0.0, 0.0]], 0.3, 10)


def test_converged_needs_every_image():
    decayed = list(np.geomspace(1.0, 0.01, 40))
    assert not converged([decayed, [0.5] * 40], 0.3, 10)


def test_converged_hand_history():
    # 15 samples, v = 10: six windowed means
    h = [5, 4, 6, 5, 3, 2, 2, 1, 1, 1, 0, 0, 0, 0, 0]
    ma = [np.mean(h[i:i + 10]) for i in range(6)]
    assert ma == pytest.approx([3.0, 2.5, 2.1, 1.5, 1.0, 0.7])
    assert converged([h], 0.3, 10)
    assert converged([h], 0.24, 10)
    assert not converged([h], 0.23, 10)


@given(st.lists(st.floats(0, 10), min_size=10, max_size=40), st.integers(1, 20))
def test_converged_stays_true_with_zeros(h, extra):
    if converged([h], 0.3, 10):
        assert converged([h + [0.0] * extra], 0.3, 10)


# ---------------------------------------------------------------- schedule

def test_kernel_schedule():
    assert kernel_schedule(101, 3) == [101, 51, 25, 13, 7, 3]
    assert kernel_schedule(3, 3) == [3]
    assert kernel_schedule(25, 7) == [25, 13, 7]


@given(st.integers(1, 400), st.integers(1, 50))
def test_kernel_schedule_properties(a, b):
    k_max, k_min = 2 * max(a, b) + 1, 2 * min(a, b) + 1
    ks = kernel_schedule(k_max, k_min)
    assert ks[0] == k_max and ks[-1] == k_min
    assert all(k % 2 for k in ks)
    assert all(x > y for x, y in zip(ks, ks[1:]))


def test_kernel_schedule_rejects_even():
    with pytest.raises(ValueError):
        kernel_schedule(100, 3)


def test_effective_k_max(scenario_a):
    obs = scenario_a.observations
    diag = max(np.hypot(*img.pixels.shape) for img in obs.images)
    cfg = FitConfig(k_max=3)
    k = effective_k_max(obs, cfg)
    assert k % 2 == 1 and cfg.k_max_fraction * diag <= k <= cfg.k_max_fraction * diag + 2
    assert effective_k_max(obs, FitConfig(k_max=2001)) == 2001
    assert effective_k_max(obs, FitConfig(k_max=3, auto_kernel=False)) == 3


def test_hyperparameter_table():
    assert hyperparameters_for(30.0) == pytest.approx((2e-3, 0.1))
    assert hyperparameters_for(60.0) == pytest.approx((4e-4, 0.02))
    assert hyperparameters_for(120.0) == pytest.approx((2e-4, 0.01))
    assert hyperparameters_for(10.0) == hyperparameters_for(30.0)
    assert hyperparameters_for(500.0) == hyperparameters_for(120.0)
    h, alpha = hyperparameters_for(90.0)
    assert 2e-4 < h < 4e-4 and 0.01 < alpha < 0.02


@pytest.mark.parametrize("bad", [dict(k_max=4), dict(k_min=1), dict(k_max=3, k_min=5), dict(cooldown=0.0),
                                 dict(cooldown=1.5), dict(gamma=1.0), dict(ma_window=0), dict(beta1=1.0),
                                 dict(max_iters_per_stage=0),
                                 dict(h=0.0), dict(param_scale="x"), dict(amplitude="peak")])
def test_fit_config_validation(bad):
    with pytest.raises(ValueError):
        FitConfig(**bad)


# --------------------------------------------------------------------- fit

@pytest.fixture(scope="module")
def level2_fit(clean_scenario_b):
    sc = clean_scenario_b
    o = iod.degraded_init(sc.truth_state, sc.observations, 2, np.random.default_rng(2))
    cfg = FitConfig.for_observations(sc.observations, max_iters_per_stage=120)
    return sc, o, cfg, fit(sc.observations, o, cfg)


def test_fit_improves_level2_noisy():
    sc = harness.random_scenario("B", 60.0, 4.0, np.random.default_rng(5), holes=0)
    o = iod.degraded_init(sc.truth_state, sc.observations, 2, np.random.default_rng(8))
    res = fit(sc.observations, o, FitConfig.for_observations(sc.observations, max_iters_per_stage=120))
    before = harness.endpoint_error(o, sc.truth_state, sc.observations)
    after = harness.endpoint_error(res.final_state, sc.truth_state, sc.observations)
    assert before > 10.0
    assert after < 2.0
    assert res.final_loss <= res.initial_loss


def test_fit_stage_descent(level2_fit):
    _, _, _, res = level2_fit
    assert len(res.stages) == len(res.stage_boundaries)
    for st_ in res.stages:
        assert st_["end_loss"] <= st_["start_loss"]
        assert st_["start_loss"] == res.loss_trace[st_["first_iteration"]]["total"]


def test_fit_trace_shape(level2_fit):
    _, _, _, res = level2_fit
    assert len(res.loss_trace) == res.iterations
    assert res.final_loss <= res.initial_loss
    assert all(np.isfinite(row["total"]) for row in res.loss_trace)
    ks = [res.loss_trace[i]["k"] for i in res.stage_boundaries]
    assert all(x > y for x, y in zip(ks, ks[1:]))


def test_fit_from_truth(clean_scenario_b):
    sc = clean_scenario_b
    obs = sc.observations
    cfg = FitConfig.for_observations(obs, max_iters_per_stage=40)
    res = fit(obs, sc.truth_state, cfg)
    assert res.final_loss <= res.initial_loss + 1e-12
    assert harness.endpoint_error(res.final_state, sc.truth_state, obs) <= 2.0


def test_fit_single_stage(clean_scenario_b):
    sc = clean_scenario_b
    cfg = FitConfig.for_observations(sc.observations, k_max=3, k_min=3, auto_kernel=False, max_iters_per_stage=5)
    res = fit(sc.observations, sc.truth_state, cfg)
    assert res.stage_boundaries == [0]
    assert res.kernel_sizes == [3]
    assert res.iterations == 5


def test_fit_deterministic(scenario_a):
    obs = scenario_a.observations
    o = iod.degraded_init(scenario_a.truth_state, obs, 3, np.random.default_rng(1))
    cfg = FitConfig.for_observations(obs, max_iters_per_stage=15)
    a, b = fit(obs, o, cfg), fit(obs, o, cfg)
    assert a.final_state.as_vector().tobytes() == b.final_state.as_vector().tobytes()
    assert a.loss_trace == b.loss_trace


def test_fit_rejects_wrong_epoch(scenario_a):
    obs = scenario_a.observations
    o = scenario_a.truth_state
    shifted = OrbitState(o.epoch + 1.0, o.position, o.velocity)
    with pytest.raises(ValueError):
        fit(obs, shifted)


def test_fit_config_for_observations(scenario_a):
    cfg = FitConfig.for_observations(scenario_a.observations, eta=0.002)
    assert (cfg.h, cfg.step_size) == pytest.approx(hyperparameters_for(scenario_a.observations.dt_max))
    assert cfg.eta == 0.002
    assert dataclasses.replace(cfg, gamma=0.5).gamma == 0.5


def test_fit_survives_unbound_excursion(scenario_a):
    # an aggressive step pushes the state hyperbolic; the fit must still return a bound state
    obs = scenario_a.observations
    o = iod.degraded_init(scenario_a.truth_state, obs, 3, np.random.default_rng(1))
    cfg = FitConfig.for_observations(obs, step_size=50.0, max_iters_per_stage=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = fit(obs, o, cfg)
    assert res.final_state.is_bound()
