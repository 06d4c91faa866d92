"""Command-line driver: ``meanfield-dr {gen-ref,simulate,predict,fit-arma}``.

Configuration precedence (highest first): the ``MEANFIELD_DR_SEED``
environment variable (seed only), command-line flags, the JSON config file,
built-in defaults.  Exit codes: 0 success, 2 configuration error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from scipy import stats

from . import gridsim, kernels
from .config import ConfigError, load_config, resolve_seed, write_manifest, _json_default
from .loadmodel import build_nominal_pool_model
from .meanfield import is_minimum_phase, linearize
from .qos import ell_vector, histogram_counts, predict_mean_qos, write_histogram_csv
from .spectral import (ARMACoeffs, disturbance_psd, fit_arma_els, fit_zeta_model, fit_zeta_poles,
                       generate_regulation, lowpass_reference, qos_variance, theta_grid)

log = logging.getLogger("meanfield_dr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# reference signals
# ---------------------------------------------------------------------------

def build_reference(hours: float, T_g_minutes: float = 5.0, coeffs: ARMACoeffs = None, seed: int = 0,
                    cutoff: float = 0.002, scale: float = 1.0):
    """``(t_minutes, r0, r)`` for a reference of ``hours`` length sampled every ``T_g_minutes``.

    ``r`` is the low-passed ``r0`` multiplied by ``scale``; the random draws
    depend on ``seed`` only, so two scales share the same underlying signal.
    """
    if not hours > 0:
        raise ConfigError("hours must be positive")
    n = int(round(hours * 60.0 / T_g_minutes))
    coeffs = (coeffs or ARMACoeffs()).validate()
    r0 = generate_regulation(coeffs, n, np.random.default_rng(seed))
    r = lowpass_reference(r0, cutoff) * scale
    return np.arange(n) * T_g_minutes, r0, r


def reference_seed_ok(r, beta: float = 0.9975, m: int = 6, bound: float = 20.0, ratio: float = 2.2,
                      min_hours: float = 10.0, T_g_minutes: float = 5.0, max_abs_frac: float = 0.625) -> bool:
    """Whether a unit-scale reference suits the opt-out scaling experiment.

    The positive peak of ``2R`` must be at least ``bound/ratio``, ``|2R|`` must
    stay below ``max_abs_frac * bound`` everywhere, and the ``ratio``-scaled excursion
    must stay above ``bound`` for ``min_hours``.
    """
    twoR = predict_mean_qos(r, beta, m)
    above = np.count_nonzero(ratio * twoR > bound) * T_g_minutes / 60.0
    return bool(twoR.max() >= bound / ratio and np.abs(twoR).max() <= max_abs_frac * bound and above >= min_hours)


def select_reference_seed(hours: float = 400.0, T_g_minutes: float = 5.0, cutoff: float = 0.002,
                          max_seed: int = 200, **kw) -> int:
    """Smallest seed whose unit-scale reference passes :func:`reference_seed_ok`."""
    for seed in range(max_seed):
        _, _, r = build_reference(hours, T_g_minutes, seed=seed, cutoff=cutoff)
        if reference_seed_ok(r, T_g_minutes=T_g_minutes, **kw):
            return seed
    raise ValueError(f"no seed below {max_seed} satisfies the reference selection rule")


def write_reference_csv(path, t_minutes, r0, r):
    np.savetxt(path, np.column_stack([t_minutes, r0, r]), delimiter=",", header="t_minutes,r0,r",
               comments="", fmt=["%.6f", "%.17g", "%.17g"])


def read_column(path, prefer=("r",)):
    """One numeric column of a headed CSV (the first of ``prefer`` present, else the last)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"input file not found: {path}")
    try:
        data = np.genfromtxt(path, delimiter=",", names=True)
    except ValueError as exc:
        raise ConfigError(f"{path}: unreadable CSV ({exc})") from exc
    names = data.dtype.names
    if not names:
        raise ConfigError(f"{path}: expected a header row with column names")
    col = next((c for c in prefer if c in names), names[-1])
    x = np.atleast_1d(np.asarray(data[col], dtype=float))
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise ConfigError(f"{path}: column {col!r} is empty or contains non-numeric values")
    return x


def _coeffs_from(cfg, path=None) -> ARMACoeffs:
    values = dict(cfg["reference"].get("arma", {}))
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad coefficients file {path}: {exc}") from exc
        doc = doc.get("coeffs", doc)
        try:
            values.update({k: float(doc[k]) for k in ("a1", "a2", "b1", "sigma_w2")})
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad coefficients file {path}: needs numeric a1, a2, b1, sigma_w2") from exc
    try:
        return ARMACoeffs(**values).validate()
    except ValueError as exc:
        raise ConfigError(f"invalid ARMA coefficients: {exc}") from exc


def _sim_config(cfg, args) -> gridsim.SimConfig:
    sim = dict(cfg["simulation"])
    if getattr(args, "scale", None) is not None:
        sim["scale"] = args.scale
    if getattr(args, "no_opt_out", False):
        sim["opt_out"] = False
    if getattr(args, "n_loads", None) is not None:
        sim["n_loads"] = args.n_loads
    if getattr(args, "workers", None) is not None:
        sim["workers"] = args.workers
    sim["seed"] = cfg["seed"]
    try:
        sc = gridsim.SimConfig(**sim)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"simulation settings: {exc}") from exc
    cfg["simulation"] = {k: v for k, v in sc.to_dict().items() if k != "seed"}
    return sc


def _horizon(r, hours, T_g_minutes):
    if hours is None:
        return r
    n = int(round(hours * 60.0 / T_g_minutes))
    if n < 1 or n > r.size:
        raise ConfigError(f"--hours {hours} needs {n} reference samples, file has {r.size}")
    return r[:n]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_ref(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    seed = resolve_seed(cfg, args.seed)
    ref = cfg["reference"]
    if args.hours is not None:
        ref["hours"] = args.hours
    if args.scale is not None:
        ref["scale"] = args.scale
    T_g = cfg["simulation"].get("T_g_minutes", 5.0)
    coeffs = _coeffs_from(cfg, args.coeffs)
    ref["arma"] = coeffs.to_dict()
    t, r0, r = build_reference(ref["hours"], T_g, coeffs, seed, ref["cutoff"], ref["scale"])
    out = _out_dir(args)
    path = out / "reference.csv"
    write_reference_csv(path, t, r0, r)
    inputs = {"coeffs": args.coeffs} if args.coeffs else {}
    write_manifest(out, "gen-ref", cfg, inputs, [path.name], time.perf_counter() - t0,
                   {"rows": int(t.size)})
    print(f"wrote {path} ({t.size} rows)")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    resolve_seed(cfg, args.seed)
    sc = _sim_config(cfg, args)
    if args.reference is None:
        raise ConfigError("simulate needs --reference")
    r = _horizon(read_column(args.reference), args.hours, sc.T_g_minutes)
    try:
        trace = gridsim.run_closed_loop(sc, r)
    except (gridsim.SimulationDiverged, gridsim.QoSInvariantError, FloatingPointError) as exc:
        raise NumericalFailure(str(exc)) from exc
    out = _out_dir(args)
    files = {"trace": "trace.csv", "qos_hist": "qos_histogram.csv", "window_hist": "window_histogram.csv"}
    trace.write_csv(out / files["trace"])
    write_histogram_csv(out / files["qos_hist"], *trace.qos_hist.trimmed())
    win = trace.final_window_hours[trace.window_full]
    write_histogram_csv(out / files["window_hist"], *histogram_counts(win, width=1.0))
    results = {
        "tracking_rms": trace.tracking_rms,
        "tracking_nrmse": trace.tracking_nrmse if np.isfinite(trace.tracking_nrmse) else None,
        "violations": trace.violations,
        "overrides": trace.overrides,
        "max_optout_frac": float(trace.optout_frac.max()) if len(trace) else 0.0,
        "max_optout_held_frac": float(trace.optout_held_frac.max()) if len(trace) else 0.0,
        "qos_pooled_mean": trace.qos_hist.mean,
        "qos_pooled_std": trace.qos_hist.std,
        "qos_final_std": float(trace.final_qos.std()),
        "max_abs_Lbar_minus_2R": float(np.abs(trace.L_bar - trace.two_R_beta).max()) if len(trace) else 0.0,
        "window_mean_hours": float(win.mean()) if win.size else None,
        "burn_in_steps": trace.burn_in,
    }
    inputs = {"reference": args.reference}
    if args.config:
        inputs["config"] = args.config
    write_manifest(out, "simulate", cfg, inputs, list(files.values()), trace.wall_seconds, results)
    print(json.dumps(results, indent=2, default=_json_default))
    return EXIT_OK


def _zeta_model_from_trace(zeta, kind, m):
    if kind == "two_pole":
        return fit_zeta_poles(zeta, order=2)
    return fit_zeta_model(zeta, m)


def cmd_predict(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    resolve_seed(cfg, args.seed)
    sc = _sim_config(cfg, args)
    if args.reference is None:
        raise ConfigError("predict needs --reference")
    r = _horizon(read_column(args.reference), args.hours, sc.T_g_minutes) * sc.scale
    family = build_nominal_pool_model(sc.I_max, sc.switch_prob)
    kind = cfg["predict"]["zeta_model"]
    inputs = {"reference": args.reference}
    if args.zeta_trace is not None:
        zeta = read_column(args.zeta_trace, prefer=("zeta",))
        source = "trace"
        inputs["zeta_trace"] = args.zeta_trace
    else:
        zeta, _ = gridsim.run_meanfield_closed_loop(
            gridsim.SimConfig(**{**sc.to_dict(), "scale": 1.0}), r, family)
        source = "mean-field closed loop"
    try:
        if np.abs(zeta).max() < 1e-9:  # round-off only: treat as zeta = 0
            zmodel = fit_zeta_model(np.zeros(3))
        else:
            zmodel = _zeta_model_from_trace(zeta, kind, sc.m)
        dpsd = disturbance_psd(family, zmodel if zmodel.sigma_zeta2 > 0 else None, sc.m,
                               theta_grid(cfg["predict"]["theta_points"]), check_every=8)
        var = qos_variance(family, dpsd, ell_vector(family.U, "signed"), sc.beta)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalFailure(f"spectral prediction failed: {exc}") from exc
    sigma = float(np.sqrt(var))

    burn = sc.burn_in
    r_full = np.concatenate([gridsim.burn_in_reference(r[0], burn, 12 * sc.m), r])
    twoR = predict_mean_qos(r_full, sc.beta, sc.m)[burn:]
    t_min = np.arange(r.size) * sc.T_g_minutes
    out = _out_dir(args)
    np.savetxt(out / "two_R_beta.csv", np.column_stack([t_min, twoR]), delimiter=",",
               header="t_minutes,two_R_beta", comments="", fmt=["%.6f", "%.17g"])

    lo, hi = sc.lower, sc.upper
    a, b = (lo - 0.0) / sigma, (hi - 0.0) / sigma
    tn = stats.truncnorm(a, b, loc=0.0, scale=sigma)
    over = np.flatnonzero((twoR > hi) | (twoR < lo))
    report = {
        "sigma_L": sigma,
        "variance_L": var,
        "zeta_source": source,
        "zeta_model": {"kind": kind, "poles": np.atleast_1d(zmodel.poles).tolist(),
                       "weights": np.atleast_1d(zmodel.weights).tolist()},
        "gaussian": {"mean": 0.0, "std": sigma},
        "truncated_gaussian": {"mean": 0.0, "std": sigma, "lower": lo, "upper": hi,
                               "mass_inside": float(stats.norm.cdf(b) - stats.norm.cdf(a)),
                               "truncated_std": float(tn.std())},
        "two_R_beta": {"max": float(twoR.max()), "min": float(twoR.min()),
                       "mean": float(twoR.mean()), "file": "two_R_beta.csv"},
        "plant_minimum_phase": is_minimum_phase(linearize(family)),
        "saturation_predicted": bool(over.size),
        "first_exceedance_hours": float(t_min[over[0]] / 60.0) if over.size else None,
    }
    (out / "prediction.json").write_text(json.dumps(report, indent=2, default=_json_default) + "\n")
    if args.config:
        inputs["config"] = args.config
    write_manifest(out, "predict", cfg, inputs, ["prediction.json", "two_R_beta.csv"],
                   time.perf_counter() - t0, {"sigma_L": sigma, "saturation_predicted": bool(over.size)})
    print(json.dumps(report, indent=2, default=_json_default))
    return EXIT_OK


def cmd_fit_arma(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    x = read_column(args.signal, prefer=(args.column,) if args.column else ("r0", "r"))
    try:
        fit = fit_arma_els(x)
    except ValueError as exc:
        raise ConfigError(f"{args.signal}: {exc}") from exc
    if not fit.coeffs.is_stable():
        raise NumericalFailure(f"fitted AR polynomial {fit.coeffs.ar.tolist()} is unstable")
    out = _out_dir(args)
    report = {"coeffs": fit.coeffs.to_dict(), "n_samples": int(x.size), **{k: v for k, v in fit.report().items()
                                                                           if k not in fit.coeffs.to_dict()}}
    (out / "arma_fit.json").write_text(json.dumps(report, indent=2, default=_json_default) + "\n")
    write_manifest(out, "fit-arma", cfg, {"signal": args.signal}, ["arma_fit.json"], time.perf_counter() - t0)
    print(json.dumps(report, indent=2, default=_json_default))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meanfield-dr", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, reference=True):
        sp.add_argument("--config", help="JSON config (or a manifest.json from an earlier run)")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=_u64)
        if reference:
            sp.add_argument("--reference", help="reference CSV (column r)")
            sp.add_argument("--scale", type=float, help="multiplier applied to the reference")
            sp.add_argument("--no-opt-out", action="store_true", help="disable the local QoS override")
            sp.add_argument("--n-loads", type=int)
            sp.add_argument("--hours", type=float, help="truncate the reference to this many hours")
            sp.add_argument("--workers", type=int, help="threads for the population step")

    g = sub.add_parser("gen-ref", help="generate a regulation reference CSV")
    common(g, reference=False)
    g.add_argument("--hours", type=float)
    g.add_argument("--scale", type=float)
    g.add_argument("--coeffs", help="JSON with a1, a2, b1, sigma_w2 (e.g. the output of fit-arma)")
    g.set_defaults(func=cmd_gen_ref)

    s = sub.add_parser("simulate", help="closed-loop population run")
    common(s)
    s.set_defaults(func=cmd_simulate)

    q = sub.add_parser("predict", help="predicted mean and spectral variance of the discounted QoS")
    common(q)
    q.add_argument("--zeta-trace", help="trace.csv from simulate; without it a mean-field closed loop is used")
    q.set_defaults(func=cmd_predict)

    f = sub.add_parser("fit-arma", help="ELS fit of an ARMA(2,1) model")
    f.add_argument("signal", help="CSV with a header; column r0 (or --column)")
    f.add_argument("--column")
    f.add_argument("--config")
    f.add_argument("--out", default=".")
    f.set_defaults(func=cmd_fit_arma)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("kernels: %s", kernels.backend_name())
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
