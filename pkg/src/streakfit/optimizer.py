"""Direct orbit fitting on streak images.

The fit minimises the weighted sum of per-image mean Frobenius distances
between generated and observed images, using central-difference gradients,
ADAM updates and a coarse-to-fine schedule of box-blur kernels.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import preprocess as pp
from .camera import project_directions
from .orbit import OrbitState, propagate_many
from .synth import PSF_TRUNCATE, StreakImage, project_path, splat

log = logging.getLogger(__name__)

PARAM_SCALES = ("whitened", "pixel", "raw", "relative")
AMPLITUDES = ("least_squares", "streak_scale")
LOSS_SENTINEL = 1.0  # per-image loss for candidates that cannot be rendered

# Table of (dt_max seconds, h, step size) anchoring the hyperparameter choice
_HYPER_TABLE = ((30.0, 2e-3, 0.1), (60.0, 4e-4, 0.02), (120.0, 2e-4, 0.01))


class NonFiniteLossWarning(RuntimeWarning):
    pass


def kernel_schedule(k_max: int, k_min: int) -> list[int]:
    """Kernel sizes from ``k_max`` down to ``k_min``, halving and staying odd.

    >>> kernel_schedule(101, 3)
    [101, 51, 25, 13, 7, 3]
    """
    if k_max % 2 == 0 or k_min % 2 == 0 or k_min < 1 or k_max < k_min:
        raise ValueError("need odd k_max >= k_min >= 1")
    ks = [k_max]
    while ks[-1] > k_min:
        ks.append(max((ks[-1] // 2) | 1, k_min))
    return ks


def hyperparameters_for(dt_max: float) -> tuple[float, float]:
    """Finite-difference step and ADAM step size for a max time offset.

    Exact table values at 30/60/120 s; log-linear interpolation between them
    and clamping outside.
    """
    ts = np.log([row[0] for row in _HYPER_TABLE])
    hs = np.log([row[1] for row in _HYPER_TABLE])
    alphas = np.log([row[2] for row in _HYPER_TABLE])
    x = np.log(np.clip(dt_max, _HYPER_TABLE[0][0], _HYPER_TABLE[-1][0]))
    return float(np.exp(np.interp(x, ts, hs))), float(np.exp(np.interp(x, ts, alphas)))


@dataclass(frozen=True)
class FitConfig:
    h: float = 4e-4
    step_size: float = 0.02
    cooldown: float = 0.5
    k_max: int = 101
    k_min: int = 3
    eta: float = 0.001
    gamma: float = 0.3
    ma_window: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iters_per_stage: int = 500
    auto_kernel: bool = True
    k_max_fraction: float = 0.3  # auto k_max spans at least this share of the largest diagonal
    # "whitened": decorrelated endpoint-pixel modes (see preconditioner);
    # "pixel": units that shift the outer streaks by ~dt_max px per unit;
    # "raw": km and km/s; "relative": scaled by |p| and |v|
    param_scale: str = "whitened"
    amplitude: str = "least_squares"  # gain of the generated image, see condition_generated

    def __post_init__(self):
        if not (self.k_max >= self.k_min >= 3 and self.k_max % 2 and self.k_min % 2):
            raise ValueError("need odd k_max >= k_min >= 3")
        if not 0 < self.cooldown <= 1:
            raise ValueError("cooldown must be in (0, 1]")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        if self.ma_window < 1 or self.max_iters_per_stage < 1:
            raise ValueError("moving-average window and iteration cap must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM decay rates must be in [0, 1)")
        if self.h <= 0 or self.step_size <= 0:
            raise ValueError("h and step_size must be positive")
        if self.param_scale not in PARAM_SCALES:
            raise ValueError(f"param_scale must be one of {PARAM_SCALES}")
        if self.amplitude not in AMPLITUDES:
            raise ValueError(f"amplitude must be one of {AMPLITUDES}")

    @classmethod
    def for_observations(cls, obs: "ObservationSet", **overrides) -> "FitConfig":
        h, alpha = hyperparameters_for(obs.dt_max)
        params = {"h": h, "step_size": alpha}
        params.update(overrides)
        return cls(**params)


@dataclass(frozen=True)
class ObservationSet:
    images: tuple

    def __post_init__(self):
        images = tuple(self.images)
        if not images:
            raise ValueError("need at least one image")
        object.__setattr__(self, "images", images)

    @property
    def t_initial(self) -> float:
        starts = [img.window.t0 for img in self.images]
        return 0.5 * (min(starts) + max(starts))

    @property
    def dt_max(self) -> float:
        """Largest offset between the anchor epoch and any image start."""
        t = self.t_initial
        return max(abs(img.window.t0 - t) for img in self.images)

    def __len__(self):
        return len(self.images)


@dataclass
class FitResult:
    final_state: OrbitState
    loss_trace: list = field(default_factory=list)
    iterations: int = 0
    stage_boundaries: list = field(default_factory=list)
    kernel_sizes: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    final_image_losses: list = field(default_factory=list)
    runtime: float = 0.0
    gradient_warnings: int = 0
    stages: list = field(default_factory=list)  # per stage: k, first_iteration, start_loss, end_loss


def image_loss(generated, observed) -> float:
    """Frobenius norm of the difference divided by the pixel count."""
    generated = np.asarray(generated, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if generated.shape != observed.shape:
        raise ValueError(f"shape mismatch {generated.shape} vs {observed.shape}")
    diff = generated - observed
    return float(np.sqrt(np.sum(diff * diff)) / observed.size)


def condition_generated(rendered, mask, k: int, eta: float, target_scale: float, observed=None,
                        amplitude: str = "least_squares") -> np.ndarray:
    """Mask, blur and background-subtract a render, then set its amplitude.

    ``"least_squares"`` picks the gain that best fits ``observed``;
    ``"streak_scale"`` makes the top-``eta`` median equal ``target_scale``.
    An empty render stays all-zero.
    """
    blurred = pp.box_blur(rendered * mask, k)
    cleaned = pp.subtract_background(blurred, pp.estimate_background(blurred), rescale=False)
    if not np.any(cleaned > 0):
        return cleaned
    return cleaned * _gain(cleaned, observed, eta, target_scale, amplitude)


def _gain(cleaned, observed, eta: float, target_scale: float, amplitude: str, n_zeros: int = 0) -> float:
    if amplitude == "least_squares":
        return max(float(np.sum(cleaned * observed)), 0.0) / float(np.sum(cleaned * cleaned))
    flat = cleaned[cleaned > 0]
    n_top = max(1, int(np.ceil(eta * (cleaned.size + n_zeros))))
    if n_top <= flat.size:
        scale = _order_statistic_median(np.partition(flat, flat.size - n_top)[flat.size - n_top:], 0)
    else:
        scale = _order_statistic_median(flat, n_top - flat.size)
    return target_scale / scale if scale > 0 else 0.0


class _Target:
    """Observed image conditioned for one kernel size, plus cached sums."""

    def __init__(self, img: StreakImage, k: int, eta: float, amplitude: str = "least_squares"):
        self.image = img
        self.prep = pp.preprocess(img.pixels, k, eta)
        self.k = k
        self.eta = eta
        self.amplitude = amplitude
        d = self.prep.pixels
        self.sumsq = float(np.sum(d * d))
        self.size = d.size
        self.n_top = max(1, int(np.ceil(eta * d.size)))

    def loss(self, path) -> float:
        """Loss of the streak along ``path`` (crop pixels), touching only its support."""
        h, w = self.prep.pixels.shape
        sigma = self.image.psf_sigma
        reach = PSF_TRUNCATE * sigma + 1.0
        finite = path[np.all(np.isfinite(path), axis=1)]
        if len(finite) == 0:
            return np.sqrt(self.sumsq) / self.size
        lo = np.floor(finite.min(axis=0) - reach).astype(int)
        hi = np.ceil(finite.max(axis=0) + reach).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], w - 1), min(hi[1], h - 1)
        if x1 < x0 or y1 < y0:
            return np.sqrt(self.sumsq) / self.size
        r = self.k // 2
        bx0, by0 = max(x0 - r, 0), max(y0 - r, 0)
        bx1, by1 = min(x1 + r, w - 1), min(y1 + r, h - 1)
        local = splat(finite - (bx0, by0), (by1 - by0 + 1, bx1 - bx0 + 1), sigma)
        local *= self.prep.zero_mask[by0:by1 + 1, bx0:bx1 + 1]
        # the blurred render is exactly zero outside this window
        blurred = pp.box_blur(local, self.k)
        n_outside = self.size - blurred.size
        beta = _order_statistic_median(blurred.ravel(), n_outside)
        cleaned = np.maximum(blurred - beta, 0.0) if beta > 0 else blurred
        d = self.prep.pixels[by0:by1 + 1, bx0:bx1 + 1]
        if not np.any(cleaned > 0):
            return np.sqrt(self.sumsq) / self.size
        gain = _gain(cleaned, d, self.eta, self.prep.streak_scale, self.amplitude, n_outside)
        diff = cleaned * gain - d
        sq = self.sumsq - float(np.sum(d * d)) + float(np.sum(diff * diff))
        return float(np.sqrt(max(sq, 0.0)) / self.size)


def _order_statistic_median(values: np.ndarray, n_zeros: int) -> float:
    """Median of non-negative ``values`` padded with ``n_zeros`` zeros."""
    n = values.size + n_zeros
    mid = [(n - 1) // 2, n // 2]
    picks = [i - n_zeros for i in mid]
    if picks[1] < 0:
        return 0.0
    part = np.partition(values, [p for p in picks if p >= 0])
    vals = [part[p] if p >= 0 else 0.0 for p in picks]
    return float(0.5 * (vals[0] + vals[1]))


class StageLoss:
    """Total weighted loss for one kernel size, with observations preprocessed once."""

    def __init__(self, obs: ObservationSet, k: int, eta: float, epoch: float, amplitude: str = "least_squares"):
        self.obs = obs
        self.k = k
        self.eta = eta
        self.epoch = epoch
        self.amplitude = amplitude
        self.targets = [_Target(img, k, eta, amplitude) for img in obs.images]
        self.prepared = [t.prep for t in self.targets]
        self.weights = pp.compute_weights([p.sir for p in self.prepared])

    def paths(self, vec) -> list:
        o = OrbitState.from_vector(self.epoch, vec)
        return [project_path(o, img.frames, img.origin_offset) for img in self.obs.images]

    def generated(self, vec) -> list:
        """Conditioned generated images (full grids)."""
        out = []
        for path, img, prep in zip(self.paths(vec), self.obs.images, self.prepared):
            rendered = splat(path, img.pixels.shape, img.psf_sigma)
            out.append(condition_generated(rendered, prep.zero_mask, self.k, self.eta, prep.streak_scale,
                                           prep.pixels, self.amplitude))
        return out

    def image_losses(self, vec) -> np.ndarray:
        try:
            paths = self.paths(vec)
            return np.array([t.loss(path) for t, path in zip(self.targets, paths)])
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            log.debug("render failed at %s: %s", vec, exc)
            return np.full(len(self.targets), LOSS_SENTINEL)

    def reference_losses(self, vec) -> np.ndarray:
        """Same as :meth:`image_losses` but processing whole grids; slow."""
        gens = self.generated(vec)
        return np.array([image_loss(g, p.pixels) for g, p in zip(gens, self.prepared)])

    def __call__(self, vec) -> float:
        return float(self.weights @ self.image_losses(vec))


def total_loss(o: OrbitState, obs: ObservationSet, k: int, eta: float = 0.001, amplitude: str = "least_squares"):
    """Weighted total and per-image losses of ``o`` at kernel size ``k``."""
    stage = StageLoss(obs, k, eta, o.epoch, amplitude)
    losses = stage.image_losses(o.as_vector())
    return float(stage.weights @ losses), losses


def gradient(loss_fn, x, h: float, scale=None) -> np.ndarray:
    """Central-difference gradient; 2 * len(x) evaluations of ``loss_fn``.

    Component ``q`` is perturbed by ``h * scale[q]``. A non-finite loss at
    either perturbed point zeroes that component and emits
    :class:`NonFiniteLossWarning`.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    scale = np.ones_like(x) if scale is None else np.asarray(scale, dtype=float)
    grad = np.zeros_like(x)
    for q in range(len(x)):
        step = h * scale[q]
        e = np.zeros_like(x)
        e[q] = step
        hi, lo = loss_fn(x + e), loss_fn(x - e)
        if np.isfinite(hi) and np.isfinite(lo):
            grad[q] = (hi - lo) / (2.0 * step)
        else:
            warnings.warn(f"non-finite loss perturbing component {q}", NonFiniteLossWarning, stacklevel=2)
    return grad


@dataclass(frozen=True)
class AdamState:
    m1: np.ndarray
    m2: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(grad, state: AdamState, step_size: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected ADAM update; returns ``(update, new_state)``."""
    grad = np.asarray(grad, dtype=float)
    t = state.iteration + 1
    m1 = beta1 * state.m1 + (1.0 - beta1) * grad
    m2 = beta2 * state.m2 + (1.0 - beta2) * grad * grad
    m1_hat = m1 / (1.0 - beta1**t)
    m2_hat = m2 / (1.0 - beta2**t)
    update = -step_size * m1_hat / (np.sqrt(m2_hat) + eps)
    return update, AdamState(m1, m2, t)


def moving_average(values, v: int) -> float:
    """Mean of the last ``v`` values (all of them if fewer)."""
    tail = np.asarray(values[-v:], dtype=float)
    return float(tail.mean())


def converged(diff_histories, gamma: float, v: int) -> bool:
    """True when every image's latest moving average of ``|loss diff|``
    has fallen to ``gamma`` times the largest moving average seen so far.

    Histories shorter than ``v`` are not yet converged.
    """
    for diffs in diff_histories:
        diffs = np.abs(np.asarray(diffs, dtype=float))
        if len(diffs) < v:
            return False
        ma = np.convolve(diffs, np.ones(v) / v, mode="valid")
        if ma[-1] > gamma * ma.max():
            return False
    return True


def mean_range(o: OrbitState, obs: ObservationSet) -> float:
    """Mean observer-to-object distance at mid-exposure over all images."""
    ranges = []
    for img in obs.images:
        mid = len(img.frames) // 2
        pos, _ = propagate_many(o, [img.frames.epochs[mid] - o.epoch])
        ranges.append(np.linalg.norm(pos[0] - img.frames.observer_eci[mid]))
    return float(np.mean(ranges))


def param_scale(cfg: FitConfig, o: OrbitState, obs: ObservationSet) -> np.ndarray:
    """Per-component multipliers applied to ``h`` and to ADAM updates."""
    vec = o.as_vector()
    if cfg.param_scale == "raw":
        return np.ones(6)
    if cfg.param_scale == "relative":
        p, v = np.linalg.norm(vec[:3]), np.linalg.norm(vec[3:])
        return np.array([p, p, p, v, v, v])
    # velocity unit: drift of one pixel per second at the mean range
    pixel_rad = np.mean([img.frames.intrinsics.scale_rad for img in obs.images])
    g = mean_range(o, obs) * pixel_rad
    t = max(obs.dt_max, 1.0)
    return g * np.array([t, t, t, 1.0, 1.0, 1.0])


def endpoint_pixels(vec, epoch: float, obs: ObservationSet, samples: int = 2) -> np.ndarray:
    """Projected start and end pixels of every image, flattened.

    ``samples=3`` adds the mid-exposure pixel.
    """
    o = OrbitState.from_vector(epoch, vec)
    out = []
    for img in obs.images:
        frames = img.frames
        idx = np.unique(np.linspace(0, len(frames) - 1, samples).round().astype(int))
        pos, _ = propagate_many(o, frames.epochs[idx] - epoch)
        d = pos - frames.observer_eci[idx]
        px, _ = project_directions(d / np.linalg.norm(d, axis=1, keepdims=True), frames.basis, frames.intrinsics)
        out.append(px.ravel())
    return np.concatenate(out)


def preconditioner(cfg: FitConfig, o: OrbitState, obs: ObservationSet, max_gain: float = 1e3) -> np.ndarray:
    """Columns are the parameter-space directions the optimizer steps along.

    For ``"whitened"`` each column moves the projected streak endpoints by
    the same total distance (2 * dt_max px) along orthogonal patterns, so
    weakly observed combinations such as an along-track slide get steps as
    large as the well-observed ones.
    """
    diag = np.diag(param_scale(cfg, o, obs))
    if cfg.param_scale != "whitened":
        return diag
    x = o.as_vector()
    eps = 1e-3
    samples = 2 if len(obs.images) >= 2 else 3  # one image: endpoints alone fix only 4 of 6 directions
    jac = np.empty((2 * samples * len(obs.images), 6))
    for q in range(6):
        dz = np.zeros(6)
        dz[q] = eps
        jac[:, q] = (endpoint_pixels(x + diag @ dz, o.epoch, obs, samples)
                     - endpoint_pixels(x - diag @ dz, o.epoch, obs, samples)) / (2 * eps)
    if not np.all(np.isfinite(jac)):
        return diag
    _, sv, vt = np.linalg.svd(jac, full_matrices=False)
    sv = np.maximum(sv, sv[0] / max_gain)
    target = 2.0 * max(obs.dt_max, 1.0)
    return diag @ vt.T @ np.diag(target / sv)


def effective_k_max(obs: ObservationSet, cfg: FitConfig) -> int:
    """Grow ``k_max`` so it spans ``cfg.k_max_fraction`` of the largest image diagonal."""
    if not cfg.auto_kernel:
        return cfg.k_max
    diag = max(np.hypot(*img.pixels.shape) for img in obs.images)
    k = int(np.ceil(cfg.k_max_fraction * diag)) | 1
    return max(cfg.k_max, k)


def fit(obs: ObservationSet, o_init: OrbitState, cfg: FitConfig | None = None, callback=None) -> FitResult:
    """Coarse-to-fine direct fit of the state at ``obs.t_initial``.

    Never raises on a poor fit; a high final loss signals that the data
    violate the model's assumptions.
    """
    cfg = cfg or FitConfig.for_observations(obs)
    if abs(o_init.epoch - obs.t_initial) > 1e-6:
        raise ValueError("initial state must be given at the observation set's t_initial")
    started = time.perf_counter()
    x = o_init.as_vector()
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state is not finite")
    schedule = kernel_schedule(effective_k_max(obs, cfg), cfg.k_min)
    result = FitResult(final_state=o_init, kernel_sizes=schedule)
    step_size = cfg.step_size
    it = 0
    stage = None
    last_good = x.copy()
    for k in schedule:
        try:
            candidate = StageLoss(obs, k, cfg.eta, obs.t_initial, cfg.amplitude)
        except pp.NoSignalError:
            log.info("skipping k=%d: an observed image has no signal above its background", k)
            continue
        stage = candidate
        result.stage_boundaries.append(it)
        diffs = [[] for _ in obs.images]
        prev = None
        adam = AdamState.zeros(6)
        if not OrbitState.from_vector(obs.t_initial, x).is_bound():
            log.info("k=%d: restarting from the last renderable state", k)
            x = last_good.copy()
        basis = preconditioner(cfg, OrbitState.from_vector(obs.t_initial, x), obs)
        best_total, best_x = np.inf, x.copy()
        x0 = x.copy()
        z = np.zeros(6)

        def stage_fn(zz, stage=stage, x0=x0, basis=basis):
            return stage(x0 + basis @ zz)

        for _ in range(cfg.max_iters_per_stage):
            losses = stage.image_losses(x)
            total = float(stage.weights @ losses)
            result.loss_trace.append({"k": k, "iteration": it, "losses": losses.tolist(), "total": total})
            if prev is not None:
                for m in range(len(losses)):
                    diffs[m].append(abs(losses[m] - prev[m]))
            prev = losses
            if np.all(losses < LOSS_SENTINEL):
                last_good = x.copy()
            if total < best_total:
                best_total, best_x = total, x.copy()
            if callback is not None:
                callback(it, k, x, total)

            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", NonFiniteLossWarning)
                grad = gradient(stage_fn, z, cfg.h)
            result.gradient_warnings += len(caught)
            update, adam = adam_step(grad, adam, step_size, cfg.beta1, cfg.beta2, cfg.adam_eps)
            z = z + update
            x = x0 + basis @ z
            it += 1
            if converged(diffs, cfg.gamma, cfg.ma_window):
                break
        # hand the stage's best iterate on, so no stage ends worse than it began
        end_total = stage(x)
        if end_total < best_total:
            best_total, best_x = end_total, x
        x = best_x
        result.stages.append({"k": k, "first_iteration": result.stage_boundaries[-1],
                              "start_loss": result.loss_trace[result.stage_boundaries[-1]]["total"],
                              "end_loss": best_total})
        step_size *= cfg.cooldown
        log.info("stage k=%d done after %d iterations, loss %.4g", k, it, best_total)

    if stage is None:
        raise pp.NoSignalError("no kernel size leaves a detectable streak in every image")
    # never return something worse than the start at the finest scale;
    # unrenderable states score the sentinel and lose every comparison
    result.initial_loss = stage(o_init.as_vector())
    if result.initial_loss <= best_total:
        x = o_init.as_vector()
    result.final_state = OrbitState.from_vector(obs.t_initial, x)
    result.iterations = it
    final = stage.image_losses(x)
    result.final_image_losses = final.tolist()
    result.final_loss = float(stage.weights @ final)
    result.runtime = time.perf_counter() - started
    return result
