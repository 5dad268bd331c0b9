"""Command-line entry points: ``simulate``, ``fit`` and ``experiment``."""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, iod
from .io import (ObservationFormatError, load_observation, load_sidecar, save_observation, truth_from_record,
                 truth_record)
from .observer import seconds_to_jd
from .optimizer import FitConfig, ObservationSet, fit
from .orbit import OrbitState, propagate_to, state_to_elements
from .synth import project_path

log = logging.getLogger("streakfit")

EXIT_IO = 1
EXIT_USAGE = 2

# FitConfig fields settable from the command line (flag -> field)
FIT_FLAGS = {"h": float, "step_size": float, "cooldown": float, "k_max": int, "k_min": int, "eta": float,
             "gamma": float, "ma_window": int, "max_iters_per_stage": int, "param_scale": str,
             "k_max_fraction": float, "amplitude": str}


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    """``key = value`` lines overriding :class:`FitConfig` fields."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string("[fit]\n" + text)
    kinds = {f.name: f.type for f in dataclasses.fields(FitConfig)}
    out = {}
    for key, raw in parser["fit"].items():
        if key not in kinds:
            raise UsageError(f"unknown config key {key!r}")
        value = raw.strip().strip('"').strip("'")
        kind = kinds[key]
        if kind in ("bool", bool):
            out[key] = value.lower() in ("1", "true", "yes", "on")
        elif kind in ("int", int):
            out[key] = int(value)
        elif kind in ("float", float):
            out[key] = float(value)
        else:
            out[key] = value
    return out


def fit_overrides(args) -> dict:
    over = read_config(args.config) if getattr(args, "config", None) else {}
    for name in FIT_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            over[name] = value
    return over


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of key = value FitConfig overrides")
    for name, kind in FIT_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    snr = None if np.isinf(args.snr) else args.snr  # inf: noiseless
    sc = harness.random_scenario(args.orbit_type, args.gap13, snr, rng, holes=args.holes)
    truth = truth_record(sc.truth_state, sc.truth_elements)
    paths = []
    for m, img in enumerate(sc.observations.images, start=1):
        img = img.with_pixels(img.pixels.astype(np.float32).astype(float))
        grid, _ = save_observation(out / f"obs{m}.strk", img, truth)
        paths.append(grid.name)
    summary = {"orbit_type": args.orbit_type, "gap13_s": args.gap13, "snr": snr,
               "noise_sigma": sc.noise_sigma, "seed": args.seed, "observations": paths,
               "t_initial_jd": seconds_to_jd(sc.observations.t_initial), "truth": truth}
    (out / "truth.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(paths)} observations to {out}")
    return 0


# --------------------------------------------------------------------- fit

def _truth_from_sidecars(files) -> OrbitState:
    for f in files:
        rec = load_sidecar(f).truth
        if rec:
            return truth_from_record(rec)
    raise UsageError("--init truth needs a sidecar carrying ground truth")


def _init_from_file(path) -> OrbitState:
    rec = json.loads(Path(path).read_text())
    rec = rec.get("truth", rec.get("final_state", rec))
    return OrbitState(float(rec["epoch_s"]), rec["position_km"], rec["velocity_km_s"])


def initial_state(args, obs: ObservationSet) -> OrbitState:
    if args.mode == "end-to-end":
        return iod.corner_init(obs)
    if args.init is None:
        raise UsageError("refine mode needs --init truth|corner|file")
    if args.init == "corner":
        return iod.corner_init(obs)
    if args.init == "truth":
        state = _truth_from_sidecars(args.obs)
    else:
        if not args.init_file:
            raise UsageError("--init file needs --init-file")
        state = _init_from_file(args.init_file)
    return propagate_to(state, obs.t_initial)


def _state_json(s: OrbitState) -> dict:
    el = state_to_elements(s)
    return {"epoch_s": s.epoch, "epoch_jd": seconds_to_jd(s.epoch), "position_km": s.position.tolist(),
            "velocity_km_s": s.velocity.tolist(),
            "elements": {"periapsis_radius_km": el.periapsis_radius, "eccentricity": el.eccentricity,
                         "inclination_deg": el.inclination, "raan_deg": el.raan,
                         "arg_periapsis_deg": el.arg_periapsis, "true_anomaly_deg": el.true_anomaly,
                         "undefined": sorted(el.undefined)}}


def cmd_fit(args) -> int:
    try:
        images = tuple(load_observation(f) for f in args.obs)
    except (OSError, ObservationFormatError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    obs = ObservationSet(images)
    o_init = initial_state(args, obs)
    cfg = FitConfig.for_observations(obs, **fit_overrides(args))
    res = fit(obs, o_init, cfg)
    log.info("fit finished in %.1f s", res.runtime)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = {
        "mode": args.mode,
        "initial_state": _state_json(o_init),
        "final_state": _state_json(res.final_state),
        "initial_loss": res.initial_loss,
        "final_loss": res.final_loss,
        "final_image_losses": res.final_image_losses,
        "iterations": res.iterations,
        "stage_boundaries": res.stage_boundaries,
        "kernel_sizes": res.kernel_sizes,
        "config": dataclasses.asdict(cfg),
    }
    try:
        truth = propagate_to(_truth_from_sidecars(args.obs), obs.t_initial)
    except UsageError:
        truth = None
    if truth is not None:
        result["endpoint_error_px"] = {
            "init": harness.endpoint_error(o_init, truth, obs),
            "converged": harness.endpoint_error(res.final_state, truth, obs)}
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")

    trace_path = out.with_name(out.stem + "_trace.csv")
    with trace_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "k", "total"] + [f"loss_{m + 1}" for m in range(len(images))])
        for row in res.loss_trace:
            w.writerow([row["iteration"], row["k"], repr(row["total"])] + [repr(v) for v in row["losses"]])

    if not args.no_plots:
        from . import plotting

        plotting.loss_trace(res.loss_trace, out.with_name(out.stem + "_trace.png"))
        for m, img in enumerate(images, start=1):
            paths = {"init": project_path(o_init, img.frames, img.origin_offset),
                     "converged": project_path(res.final_state, img.frames, img.origin_offset)}
            if truth is not None:
                paths["truth"] = project_path(truth, img.frames, img.origin_offset)
            plotting.overlay(img.pixels, paths, out.with_name(f"{out.stem}_overlay_{m}.png"), f"image {m}")
    print(f"final loss {res.final_loss:.4g} after {res.iterations} iterations -> {out}")
    return 0


# -------------------------------------------------------------- experiment

QUARTILE_HEADER = ["cell", "phase", "metric", "q1", "q2", "q3", "n_trials", "n_failures"]


def write_quartiles(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUARTILE_HEADER)
        for r in rows:
            w.writerow([r.cell, r.phase, r.metric, repr(r.q1), repr(r.q2), repr(r.q3), r.n_trials, r.n_failures])


def _split(value: str | None, kind=str):
    return None if value is None else tuple(kind(v) for v in value.split(",") if v)


def cmd_experiment(args) -> int:
    cell_kwargs = {}
    for key, kind in (("orbit_types", str), ("levels", str), ("gaps", float), ("snrs", float), ("modes", str)):
        value = _split(getattr(args, key), kind)
        if value:
            cell_kwargs[key] = value
    rows, results = harness.run_experiment(args.kind, args.trials, args.seed, fit_overrides(args),
                                           workers=args.workers, **cell_kwargs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_quartiles(rows, out)
    if args.trials_out:
        records = [harness.trial_record(r) for r in results]
        keys = list(dict.fromkeys(k for rec in records for k in rec))
        with Path(args.trials_out).open("w", newline="") as fh:
            w = csv.DictWriter(fh, keys, lineterminator="\n")
            w.writeheader()
            w.writerows(records)
    if not args.no_plots:
        from . import plotting

        for metric in ("du", "drp"):
            plotting.quartile_chart(rows, metric, out.with_name(f"{out.stem}_{metric}.png"),
                                    f"{args.kind} experiment: {metric}")
    failures = sum(1 for r in results if r.error)
    print(f"{len(results)} trials ({failures} failed) -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streakfit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a triple of streak observations")
    s.add_argument("--orbit-type", choices=sorted(harness.ORBIT_TYPES), required=True)
    s.add_argument("--gap13", type=float, default=60.0)
    s.add_argument("--snr", type=float, default=4.0, help="streak peak over noise sigma; inf for noiseless")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--holes", type=int, default=4)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit an orbit to streak observations")
    f.add_argument("--obs", nargs="+", required=True)
    f.add_argument("--init", choices=("truth", "corner", "file"))
    f.add_argument("--init-file")
    f.add_argument("--mode", choices=("refine", "end-to-end"), default="refine")
    f.add_argument("--out", required=True)
    f.add_argument("--no-plots", action="store_true")
    _add_fit_flags(f)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("experiment", help="run a seeded experiment sweep")
    e.add_argument("--kind", choices=("init", "interval", "snr"), required=True)
    e.add_argument("--trials", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--trials-out", help="optional per-trial CSV")
    e.add_argument("--orbit-types", help="comma list, e.g. A,B")
    e.add_argument("--levels", help="comma list of I..V (init experiment)")
    e.add_argument("--gaps", help="comma list of gap13 values (interval experiment)")
    e.add_argument("--snrs", help="comma list of SNRs (snr experiment)")
    e.add_argument("--modes", help="comma list of refine,end-to-end")
    e.add_argument("--workers", type=int, default=None)
    e.add_argument("--no-plots", action="store_true")
    _add_fit_flags(e)
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ObservationFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
