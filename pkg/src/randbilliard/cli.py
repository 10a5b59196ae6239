"""Command-line driver: one YAML config in, ``data.csv`` + ``meta.json`` out."""
from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from pathlib import Path as FsPath

import numpy as np

from . import __version__
from . import config as cfgmod
from . import stats
from .config import RunConfig
from .diffusion import (EulerConfig, chain_vs_sde_compare, constant_model, laguerre_model,
                        legendre_model, mb_model, normalized_laguerre_model, simulate_path)
from .errors import BilliardError, ConfigError, DomainError
from .families import arc_family, flat_family, moving_wall_family, tent_family
from .geometry import ArcProfile, FlatProfile, MovingWallProfile, TentProfile, flatness
from .operators import ScatterMatrices, compute_A, fit_lambda, generator_convergence
from .rng import RNG_DESCRIPTION, stream
from .scattering import ChainConfig, HiddenLaw, run_chain_arrays, sample_stationary
from .testfunctions import Projected, RadialBump

# stream keys used by the orchestrator (library code uses 0-3)
_INIT_KEY = 9


# ------------------------------------------------------------------ builders

def build_profile(spec):
    if spec.type == "flat":
        return FlatProfile(np.asarray(spec.periods, dtype=float))
    if spec.type == "arc":
        return ArcProfile(spec.a1, spec.R)
    if spec.type == "moving_wall":
        return MovingWallProfile(spec.a1, spec.m0, spec.m1, ArcProfile(spec.a1, spec.R), spec.a0)
    return TentProfile(spec.m, spec.masses, spec.length)


def build_hidden(cfg: RunConfig, profile_spec=None):
    h = cfg.hidden
    if h.k == 0:
        return HiddenLaw.none()
    if h.sigma0_sq is not None:
        ps = profile_spec if profile_spec is not None else cfg.profile
        if ps is None or ps.type != "moving_wall":
            raise ConfigError("hidden.sigma0_sq is only defined for the moving_wall profile",
                              field="hidden.sigma0_sq")
        return HiddenLaw(h.k, (ps.m0 / ps.m1) * h.sigma0_sq / ps.a1**2)
    return HiddenLaw(h.k, h.sigma2)


def build_family(spec):
    if spec.type == "flat":
        return flat_family(spec.k)
    if spec.type == "tent":
        return tent_family(spec.k, spec.heat_bath)
    if spec.type == "arc":
        return arc_family()
    return moving_wall_family(spec.alpha)


def build_model(spec):
    if spec.type == "mb":
        lam = np.asarray(spec.lambdas, dtype=float)
        lam = np.diag(lam) if lam.ndim == 1 else lam
        return mb_model(ScatterMatrices(spec.scale * lam, spec.k, spec.sigma2))
    if spec.type == "legendre":
        lam = np.asarray(spec.lambdas, dtype=float)
        return legendre_model(spec.scale * lam)
    if spec.type == "laguerre":
        return laguerre_model(spec.scale * spec.lam, spec.sigma2)
    if spec.type == "laguerre_normalized":
        if spec.scale != 1.0:
            return laguerre_model(0.5 * spec.scale, 1.0)
        return normalized_laguerre_model()
    return constant_model(spec.dim)


def build_phi(spec):
    phi = RadialBump(spec.center, spec.radius)
    return Projected(phi, spec.project) if spec.project is not None else phi


# -------------------------------------------------------------------- output

def write_csv(path, header, rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(x) for x in r) + "\n")


def _fmt(x):
    # 17 significant digits round-trip every double; integers print without exponent
    return f"{x:.17g}"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, default=_json_default, allow_nan=True)
        fh.write("\n")


class Output:
    """Collects the artifacts of one experiment."""

    def __init__(self, header, rows, report=None, counts=None, extra=None):
        self.header, self.rows = header, rows
        self.report = report
        self.counts = counts or {}
        self.extra = extra or {}   # file name -> (header, rows)


# --------------------------------------------------------------- experiments

def _initial_chain_state(cfg, profile, hidden):
    m = profile.dim + 1 - hidden.k
    ch = cfg.chain
    if ch.initial == "stationary":
        return sample_stationary(hidden, m, 1, stream(cfg.seed, _INIT_KEY), speed=ch.speed)[0]
    v = np.asarray(ch.initial, dtype=float)
    if v.size != m:
        raise ConfigError(f"chain.initial needs {m} components", field="chain.initial")
    return v


def exp_simulate_chain(cfg: RunConfig) -> Output:
    profile = build_profile(cfg.profile)
    hidden = build_hidden(cfg)
    v0 = _initial_chain_state(cfg, profile, hidden)
    run = run_chain_arrays(ChainConfig(profile, hidden, v0, cfg.chain.steps, cfg.seed,
                                       cfg.chain.max_resamples))
    m = run.v.shape[1]
    steps = np.arange(run.v.shape[0])
    rows = np.column_stack([steps, run.v, run.collisions, run.resamples])
    header = ["step"] + [f"v_{i + 1}" for i in range(m)] + ["collisions", "resamples"]
    counts = dict(run.counts, total_resamples=int(run.resamples.sum()),
                  total_collisions=int(run.collisions.sum()))
    report = {"mean_v": run.v[1:].mean(0), "mean_speed": float(np.linalg.norm(run.v[1:], axis=1).mean()),
              "mean_collisions": float(run.collisions[1:].mean())}
    return Output(header, rows, report, counts)


def exp_simulate_sde(cfg: RunConfig) -> Output:
    sde = cfg.sde
    model = build_model(sde.model)
    path = simulate_path(model, EulerConfig(sde.dt, sde.steps, np.asarray(sde.initial, dtype=float),
                                            cfg.seed, sde.max_retries,
                                            record_every=sde.record_every))
    d = model.dim
    rows = np.column_stack([path.times, path.states, path.retries])
    header = ["t"] + [f"v_{i + 1}" for i in range(d)] + ["retries"]
    report = {"model": model.tag, "noise_scale": model.noise_scale,
              "time_mean": path.time_mean, "time_second_moment": path.time_second_moment,
              "final_state": path.states[-1], "total_retries": path.total_retries}
    return Output(header, rows, report, {"boundary_retries": path.total_retries})


def exp_compute_matrices(cfg: RunConfig) -> Output:
    profile = build_profile(cfg.profile)
    hidden = build_hidden(cfg)
    msec = cfg.matrices or cfgmod.MatricesSection()
    A, ainfo = compute_A(profile, msec.quadrature_points, return_info=True)
    h, hinfo = flatness(profile, return_info=True)
    report = {"flatness": h, "flatness_info": hinfo, "quadrature": ainfo,
              "trace_A": float(np.trace(A)), "trace_A_over_h": float(np.trace(A)) / h}
    if msec.family is not None:
        fam = build_family(msec.family)
        fit = fit_lambda(fam, msec.h_sequence, msec.quadrature_points)
        lam, source = fit.value, f"family:{fam.name}"
        report["lambda_fit"] = {"extrapolated": fit.extrapolated, "residual": fit.residual,
                                "spread": fit.spread, "h": fit.h}
    else:
        lam, source = A / h, "A/h"
    k = hidden.k
    lam = np.array(lam, dtype=float)
    if lam.shape[0] != A.shape[0]:
        raise ConfigError("matrices.family dimension differs from the profile", field="matrices.family")
    lam[-1, :] = lam[:, -1] = 0.0
    mats = ScatterMatrices(lam, k, hidden.sigma2, A=A, info={"lambda_source": source})
    report.update(mats.to_dict())
    d = A.shape[0]
    rows = [(i + 1, j + 1, A[i, j], mats.C[i, j], mats.Lambda[i, j]) for i in range(d) for j in range(d)]
    return Output(["row", "col", "A", "C", "Lambda"], rows, report)


def exp_verify_generator(cfg: RunConfig) -> Output:
    g = cfg.generator
    fam = build_family(g.family)
    hidden = HiddenLaw(fam.k, cfg.hidden.sigma2 or 1.0) if fam.k else HiddenLaw.none()
    rows = generator_convergence(fam, hidden, build_phi(g.phi), g.probes, g.h_sequence, g.n0,
                                 sampler=g.sampler, replicates=g.replicates, seed=cfg.seed,
                                 cap=g.cap, denominator=g.denominator)
    data = [(r["h"], r["estimate"], r["analytic"], r["abs_error"], r["std_error"]) for r in rows]
    nh = len(g.h_sequence)
    monotone = [all(rows[p * nh + i + 1]["abs_error"] < rows[p * nh + i]["abs_error"]
                    for i in range(nh - 1)) for p in range(len(g.probes))]
    report = {"row_order": "probe-major: rows p*len(h_sequence) .. (p+1)*len(h_sequence)-1 "
                           "belong to probes[p]",
              "probes": g.probes, "rows": rows, "monotone_per_probe": monotone,
              "all_monotone": all(monotone)}
    return Output(["h", "estimate", "analytic", "abs_error", "std_error"], data, report)


def exp_stationary_test(cfg: RunConfig) -> Output:
    profile = build_profile(cfg.profile)
    hidden = build_hidden(cfg)
    st = cfg.stationary
    m = profile.dim + 1 - hidden.k
    v0 = sample_stationary(hidden, m, 1, stream(cfg.seed, _INIT_KEY), speed=st.speed)[0]
    run = run_chain_arrays(ChainConfig(profile, hidden, v0, st.steps, cfg.seed))
    V = run.v[1:]
    report, extra = {"steps": st.steps, "m": m, "k": hidden.k}, {}
    hist_header = ["bin_left", "bin_right", "count", "expected"]
    if m == 2:
        ang = stats.angle_from_normal(V)
        tau = stats.autocorrelation_time(ang)
        report["angle"] = stats.ks_test(ang, stats.CosineAngle().cdf, n_eff=V.shape[0] / tau).to_dict()
        report["angle"]["tau"] = tau
        rows = stats.histogram_rows(ang, stats.CosineAngle().cdf, st.bins, range_=(-math.pi / 2, math.pi / 2))
    elif m >= 3:
        u = V[:, :-1] / np.linalg.norm(V, axis=1, keepdims=True)
        r = np.linalg.norm(u, axis=1)
        tau = stats.autocorrelation_time(r)
        report["direction"] = stats.uniform_ball_chi2(u, n_eff=V.shape[0] / tau).to_dict()
        report["direction"]["tau"] = tau
        law = stats.UniformBall(m - 1)
        rows = stats.histogram_rows(r, law.radius_cdf, st.bins, range_=(0.0, 1.0))
    else:
        rows = None
    if hidden.k >= 1:
        s = np.linalg.norm(V, axis=1)
        law = stats.MBSpeed(m, hidden.sigma2)
        tau_s = stats.autocorrelation_time(s)
        report["speed"] = stats.ks_test(s, law.cdf, n_eff=V.shape[0] / tau_s).to_dict()
        report["speed"]["tau"] = tau_s
        srows = stats.histogram_rows(s, law.cdf, st.bins, range_=(0.0, float(law._chi.ppf(1 - 1e-6))))
        if rows is None:
            rows = srows
        else:
            extra["speed_histogram.csv"] = (hist_header, srows)
    report["passed_0.01"] = all(v["pass_at"]["0.01"] for key, v in report.items()
                                if isinstance(v, dict) and "pass_at" in v)
    return Output(hist_header, rows, report, dict(run.counts, total_resamples=int(run.resamples.sum())),
                  extra)


def exp_chain_vs_sde(cfg: RunConfig) -> Output:
    c = cfg.compare
    fam = build_family(c.family)
    hidden = HiddenLaw(fam.k, cfg.hidden.sigma2 or 1.0) if fam.k else HiddenLaw.none()
    model = build_model(c.model)
    rep = chain_vs_sde_compare(fam, hidden, model, c.t_end, c.n_paths, c.h_sequence,
                               initial=c.initial, seed=cfg.seed, sde_dt=c.sde_dt)
    rows = [(r["h"], r["steps"], r["ks_max"], r["mean_diff"], r["cov_diff"]) for r in rep["rows"]]
    return Output(["h", "steps", "ks_max", "mean_diff", "cov_diff"], rows, rep)


EXPERIMENT_FUNCS = {"simulate-chain": exp_simulate_chain, "simulate-sde": exp_simulate_sde,
                    "compute-matrices": exp_compute_matrices, "verify-generator": exp_verify_generator,
                    "stationary-test": exp_stationary_test, "chain-vs-sde": exp_chain_vs_sde}


# ---------------------------------------------------------------- top level

def _error_payload(exc, field=None):
    return {"error": type(exc).__name__, "message": str(exc), "field": field}


def _emit_error(out_dir, payload):
    text = json.dumps(payload)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            os.makedirs(out_dir, exist_ok=True)
            write_json(os.path.join(out_dir, "error.json"), payload)
        except OSError:
            pass


def load_config(config_path=None, overrides=(), *, experiment=None, preset=None, seed=None,
                threads=None) -> RunConfig:
    if config_path is not None and preset is not None:
        raise ConfigError("give either a config file or a preset", field="config")
    if preset is not None:
        raw = cfgmod.load_preset(preset)
    elif config_path is not None:
        try:
            raw = cfgmod.load_yaml(config_path)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", field="config") from None
    else:
        raw = {}
    raw = cfgmod.apply_overrides(raw, overrides)
    if experiment is not None:
        if raw.get("experiment", experiment) != experiment:
            raise ConfigError(f"config is for {raw['experiment']!r}, not {experiment!r}",
                              field="experiment")
        raw["experiment"] = experiment
    if seed is not None:
        raw["seed"] = seed
    if threads is not None:
        raw["threads"] = threads
    return cfgmod.validate(raw)


def execute(cfg: RunConfig, out_dir) -> dict:
    """Run a validated config and write its artifacts; returns the metadata."""
    if cfg.threads is not None:
        import numba
        numba.set_num_threads(min(cfg.threads, numba.config.NUMBA_NUM_THREADS))
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = EXPERIMENT_FUNCS[cfg.experiment](cfg)
    wall = time.perf_counter() - t0
    write_csv(out / "data.csv", res.header, res.rows)
    files = ["data.csv"]
    for name, (header, rows) in res.extra.items():
        write_csv(out / name, header, rows)
        files.append(name)
    if res.report is not None:
        write_json(out / "report.json", res.report)
        files.append("report.json")
    meta = {"config": cfg.model_dump(mode="json", exclude={"threads", "out"}),
            "version": __version__, "wall_clock_seconds": wall,
            "counts": {"singular_hits": res.counts.get("singular", 0) + res.counts.get("tangential", 0),
                       "trapped_trajectories": res.counts.get("trapped", 0),
                       "stalled_marches": res.counts.get("stalled", 0),
                       "boundary_retries": res.counts.get("boundary_retries", 0),
                       **{k: v for k, v in res.counts.items()
                          if k not in ("singular", "tangential", "trapped", "stalled",
                                       "boundary_retries")}},
            "rng": {"description": RNG_DESCRIPTION, "seed": cfg.seed},
            "platform": {"python": platform.python_version(), "numpy": np.__version__},
            "files": files + ["meta.json"]}
    write_json(out / "meta.json", meta)
    return meta


def run(config_path=None, overrides=(), *, experiment=None, preset=None, seed=None, threads=None,
        out=None) -> int:
    """Validate, execute and write outputs.  Returns the process exit status.

    0 on success, 2 for configuration errors, 1 for errors raised while
    running; failures print a JSON error object to stderr and to
    ``<out>/error.json``.
    """
    try:
        cfg = load_config(config_path, overrides, experiment=experiment, preset=preset, seed=seed,
                          threads=threads)
    except ConfigError as exc:
        _emit_error(out, _error_payload(exc, exc.field))
        return 2
    out = out or cfg.out or "out"
    try:
        execute(cfg, out)
    except ConfigError as exc:
        _emit_error(out, _error_payload(exc, exc.field))
        return 2
    except (BilliardError, DomainError, ValueError) as exc:
        _emit_error(out, _error_payload(exc))
        return 1
    return 0


def list_presets():
    """``[(name, description), ...]`` for every built-in preset."""
    return [(name, cfgmod.preset_description(name)) for name in cfgmod.preset_names()]


def main(argv=None):
    parser = argparse.ArgumentParser(prog="randbilliard", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in cfgmod.EXPERIMENTS:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", metavar="PATH")
        src.add_argument("--preset", metavar="NAME")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", metavar="DIR")
    sub.add_parser("presets")
    args = parser.parse_args(argv)
    if args.command == "presets":
        for name, desc in list_presets():
            print(f"{name}\t{desc}")
        return 0
    return run(args.config, args.overrides, experiment=args.command, preset=args.preset,
               seed=args.seed, threads=args.threads, out=args.out)


if __name__ == "__main__":
    sys.exit(main())
