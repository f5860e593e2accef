"""Command-line driver.

    python -m bloch_chain <command> [-c config.ini] [--set section.key=value ...]

Commands: ``classical``, ``spectrum``, ``bands``, ``compare``, ``smoke``.
Exit status: 0 on success, 1 for configuration errors, 2 when a numerical
solver fails to converge.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import bloch, diffusion, dynamics, semiclassics
from .config import ConfigError, RunConfig, load_config
from .modal import ConvergenceError, ScatteringCache

log = logging.getLogger("bloch_chain")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CONVERGENCE = 2


def _header(cfg: RunConfig, **extra) -> list[str]:
    lines = [
        f"bloch_chain {__version__}",
        f"config_hash: {cfg.config_hash()}",
        f"profile: {cfg.geometry.profile}",
        f"A2: {cfg.geometry.A2!r}",
    ]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    return lines


def read_header(path) -> dict:
    """``key: value`` pairs from the leading ``#`` lines of an output CSV."""
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if ":" in body:
                key, value = body.split(":", 1)
                out[key.strip()] = value.strip()
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _meta(cfg: RunConfig, started: float) -> dict:
    return {
        "version": __version__,
        "python": platform.python_version(),
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "elapsed_s": round(time.perf_counter() - started, 3),
    }


# ---------------------------------------------------------------------------
# classical


def _ensemble_chunk(args):
    profile, ic, times = args
    return dynamics.run_ensemble(profile, ic, times)


def evolve_ensemble(profile, ic, times, workers: int = 1) -> dynamics.EnsembleRun:
    """``run_ensemble`` split over ``workers`` processes; the result is independent of ``workers``."""
    if workers <= 1:
        return dynamics.run_ensemble(profile, ic, times)
    bounds = np.linspace(0, len(ic), workers + 1).astype(int)
    parts = [(profile, ic.subset(slice(a, b)), times) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        runs = list(pool.map(_ensemble_chunk, parts))
    cat = lambda name: np.concatenate([getattr(r, name) for r in runs])  # noqa: E731
    return dynamics.EnsembleRun(
        np.asarray(times, float), cat("x0"), cat("vx0"), cat("x"), cat("vx"),
        cat("collisions"), cat("grazing"), cat("longest_flight"), ic.seed,
    )


def run_classical(cfg: RunConfig) -> diffusion.EnsembleSummary:
    """Sample, evolve and summarise the ensemble; writes autocorr, moments and histogram CSVs."""
    started = time.perf_counter()
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    c = cfg.classical
    profile = cfg.profile
    ic = dynamics.sample_initial_conditions(profile, c.particles, c.seed)
    times = c.checkpoints()
    t_run = time.perf_counter()
    run = evolve_ensemble(profile, ic, times, cfg.wave.workers)
    t_run = time.perf_counter() - t_run
    summary = diffusion.summarize(run, c.transient_cut, bins=c.bins, n_batches=c.batches)
    head = _header(cfg, seed=c.seed, particles=c.particles, horizon=c.horizon)
    summary.autocorrelation.to_csv(out / "autocorr.csv", head)
    summary.moments.to_csv(out / "moments.csv", head)
    summary.histogram.to_csv(out / "histogram.csv", head)
    d = summary.diffusion
    h = summary.histogram
    results = {
        "A2": cfg.geometry.A2,
        "profile": cfg.geometry.profile,
        "seed": c.seed,
        "particles": c.particles,
        "horizon": c.horizon,
        "D1": d.D1,
        "D1_err": d.D1_err,
        "D1_first_moment": d.D1_first,
        "D1_first_moment_err": d.D1_first_err,
        "moment_ratio": d.ratio,
        "moment_ratio_err": d.ratio_err,
        "estimator_discrepancy_sigma": d.discrepancy,
        "transient_cut": d.transient_cut,
        "autocorr_decay_time": summary.autocorrelation.decay_time(),
        "histogram_variance": h.variance,
        "histogram_skewness": h.skewness,
        "histogram_skewness_err": h.skewness_err,
        "ks_pvalue": h.ks_pvalue,
        "longest_flight": float(run.longest_flight.max()),
        "grazing_events": int(run.grazing.sum()),
        "evolve_s": round(t_run, 3),
        **_meta(cfg, started),
    }
    _write_json(out / "classical.json", results)
    log.info("D1 = %.5f +- %.5f (first moment %.5f)", d.D1, d.D1_err, d.D1_first)
    return summary


# ---------------------------------------------------------------------------
# waves


def solver_params(cfg: RunConfig) -> bloch.SolverParams:
    w = cfg.wave
    return bloch.SolverParams(
        n_evan=w.n_evan,
        n_slices=w.n_slices,
        unimodular_tol=w.unimodular_tol,
        inf_tol=w.inf_tol,
        symmetry_window=w.symmetry_window,
        method=w.method,
    )


def _cache(cfg: RunConfig):
    return ScatteringCache(cfg.output_dir / "cache") if cfg.wave.cache else None


def k_grid(cfg: RunConfig) -> np.ndarray:
    w = cfg.wave
    return bloch.make_k_grid(w.k_min, w.k_max, w.dk, cfg.profile.lead_width)


def run_spectrum(cfg: RunConfig) -> bloch.SweepResult:
    """Sweep ``N_B`` over the configured grid; writes nb_vs_k.csv and bands.csv."""
    started = time.perf_counter()
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    grid = k_grid(cfg)
    res = bloch.sweep(cfg.profile, grid, solver_params(cfg), workers=cfg.wave.workers, cache=_cache(cfg))
    head = _header(cfg, unimodular_tol=cfg.wave.unimodular_tol, dk=repr(cfg.wave.dk))
    res.series.to_csv(out / "nb_vs_k.csv", head)
    res.bands_to_csv(out / "bands.csv", head)
    flagged = int(res.series.flagged.sum())
    _write_json(out / "spectrum.json", {
        "A2": cfg.geometry.A2,
        "points": len(grid),
        "flagged_points": flagged,
        "max_unitarity_residual": max(p.unitarity for p in res.points),
        "max_symmetry_residual": max(p.symmetry_residual for p in res.points),
        "solver": solver_params(cfg).as_dict(),
        **_meta(cfg, started),
    })
    if flagged:
        log.warning("%d of %d grid points flagged (see nb_vs_k.csv)", flagged, len(grid))
    return res


def _classical_d1(cfg: RunConfig) -> tuple[float, float]:
    if cfg.analysis.D1 is not None:
        return cfg.analysis.D1, float("nan")
    path = cfg.output_dir / "classical.json"
    if not path.exists():
        summary = run_classical(cfg)
        return summary.diffusion.D1, summary.diffusion.D1_err
    data = json.loads(path.read_text())
    _check_same_geometry(cfg, data.get("A2"), data.get("profile"), path)
    return float(data["D1"]), float(data["D1_err"])


def _check_same_geometry(cfg: RunConfig, a2, profile, source) -> None:
    if profile is not None and str(profile) != cfg.geometry.profile:
        raise ConfigError(f"{source} was produced for profile {profile}, config says {cfg.geometry.profile}")
    if cfg.geometry.profile == "cosine" and a2 is not None and float(a2) != float(cfg.geometry.A2):
        raise ConfigError(f"{source} was produced for A2={a2}, config says A2={cfg.geometry.A2}")


def run_bands(cfg: RunConfig) -> semiclassics.SlopeStatistics:
    """Band slopes in the configured window; writes slopes.csv and slopes.json."""
    started = time.perf_counter()
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    a = cfg.analysis
    profile = cfg.profile
    step = (a.slope_k_max - a.slope_k_min) / max(a.slope_points - 1, 1)
    grid = bloch.make_k_grid(a.slope_k_min, a.slope_k_max, step, profile.lead_width)
    slopes = bloch.band_slopes(profile, grid, solver_params(cfg), cache=_cache(cfg))
    d1, d1_err = _classical_d1(cfg)
    stats = semiclassics.band_slope_statistics(slopes, d1, profile.cell_area, a.g,
                                               k_window=(a.slope_k_min, a.slope_k_max))
    stats.to_csv(out / "slopes.csv", _header(cfg, D1=repr(d1)))
    _write_json(out / "slopes.json", {
        "A2": cfg.geometry.A2,
        "k_center": stats.k_center,
        "samples": int(stats.u.size),
        "dropped": stats.n_dropped,
        "variance": stats.variance,
        "variance_err": stats.variance_err,
        "prediction": stats.prediction,
        "ratio": stats.ratio,
        "kurtosis": stats.kurtosis,
        "kurtosis_err": stats.kurtosis_err,
        "D1_classical": d1,
        "D1_classical_err": d1_err,
        **_meta(cfg, started),
    })
    return stats


def run_compare(cfg: RunConfig) -> dict:
    """Fit the smoothed count and compare the implied ``D1`` with the classical one."""
    started = time.perf_counter()
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    a = cfg.analysis
    profile = cfg.profile
    d1, d1_err = _classical_d1(cfg)
    nb_path = out / "nb_vs_k.csv"
    if nb_path.exists():
        head = read_header(nb_path)
        _check_same_geometry(cfg, head.get("A2"), head.get("profile"), nb_path)
        series = bloch.ModeCountSeries.from_csv(nb_path)
    else:
        series = run_spectrum(cfg).series
    smoothed = semiclassics.smooth(series, a.kernel, a.width, A_c=None, edges=a.edges)
    smoothed.to_csv(out / "smoothed.csv", _header(cfg, kernel=a.kernel, width=repr(a.width)))
    k_range = None
    if a.fit_k_min is not None or a.fit_k_max is not None:
        k_range = (a.fit_k_min or 0.0, a.fit_k_max or np.inf)
    fit = semiclassics.fit_sqrt_law(smoothed, a.g, profile.cell_area, profile.L, k_range=k_range)
    rel = abs(fit.D1_quantum - d1) / d1
    extra = [("D1_classical", d1), ("D1_classical_err", d1_err), ("relative_difference", rel),
             ("g", a.g), ("A_c", profile.cell_area), ("L", profile.L),
             ("unimodular_tol", cfg.wave.unimodular_tol), ("seed", cfg.classical.seed)]
    fit.to_csv(out / "fit_report.csv", _header(cfg), extra)
    report = {
        "A2": cfg.geometry.A2,
        "a": fit.a,
        "c0": fit.c0,
        "D1_quantum": fit.D1_quantum,
        "D1_quantum_err": fit.D1_err,
        "D1_classical": d1,
        "D1_classical_err": d1_err,
        "relative_difference": rel,
        "seed": cfg.classical.seed,
        "tolerances": {"unimodular": cfg.wave.unimodular_tol, "inf": cfg.wave.inf_tol},
    }
    if a.window_centers:
        report["windows"] = run_windows(cfg)
    _write_json(out / "compare.json", {**report, **_meta(cfg, started)})
    log.info("D1 quantum %.4f vs classical %.4f (%.1f%%)", fit.D1_quantum, d1, 100 * rel)
    return report


def run_windows(cfg: RunConfig) -> list[dict]:
    """Boxcar averages against the window width at each configured centre; writes windows.csv."""
    a = cfg.analysis
    profile = cfg.profile
    params = solver_params(cfg)
    rows, summary = [], []
    for kc in a.window_centers:
        grid = semiclassics.window_grid(kc, a.window_r, profile.cell_area, a.window_samples)
        grid = bloch.avoid_cutoffs(grid, profile.lead_width,
                                   1e-6 * semiclassics.mean_level_spacing(profile.cell_area, kc))
        res = bloch.sweep(profile, grid, params, workers=cfg.wave.workers, cache=_cache(cfg))
        table = semiclassics.window_convergence(res.series, kc, a.r_values, profile.cell_area)
        for r, mean, err, count in table:
            rows.append((kc, r, mean, err, count))
        plateau = table[(table[:, 0] >= 200) & (table[:, 0] <= 300)]
        summary.append({
            "k_center": kc,
            "plateau_mean": float(plateau[:, 1].mean()) if plateau.size else float("nan"),
            "plateau_std": float(plateau[:, 1].std()) if plateau.size else float("nan"),
        })
    with open(cfg.output_dir / "windows.csv", "w", newline="") as fh:
        for line in _header(cfg, samples=a.window_samples, window_r=a.window_r):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["k_center", "r", "mean", "stderr", "count"])
        for kc, r, mean, err, count in rows:
            w.writerow([repr(float(kc)), repr(float(r)), repr(float(mean)), repr(float(err)), int(count)])
    return summary


def run_smoke(cfg: RunConfig) -> dict:
    """Small end-to-end run of every stage into ``<output>/smoke``."""
    cfg.output = str(cfg.output_dir / "smoke")
    cfg.classical.particles = min(cfg.classical.particles, 1000)
    cfg.classical.horizon = min(cfg.classical.horizon, 1000.0)
    cfg.wave.k_min, cfg.wave.k_max = np.pi, 8 * np.pi
    cfg.analysis.width = np.pi
    cfg.analysis.window_centers = []
    cfg.analysis.slope_k_min, cfg.analysis.slope_k_max, cfg.analysis.slope_points = 7 * np.pi, 8 * np.pi, 40
    summary = run_classical(cfg)
    res = run_spectrum(cfg)
    report = run_compare(cfg)
    stats = run_bands(cfg)
    out = {
        "D1_classical": summary.diffusion.D1,
        "points": len(res.series),
        "D1_quantum": report["D1_quantum"],
        "slope_ratio": stats.ratio,
    }
    print(json.dumps(out, indent=2))
    return out


COMMANDS = {
    "classical": run_classical,
    "spectrum": run_spectrum,
    "bands": run_bands,
    "compare": run_compare,
    "smoke": run_smoke,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bloch_chain", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("-c", "--config", help="INI configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    p.add_argument("-o", "--output", help="output directory (overrides the config)")
    p.add_argument("-j", "--workers", type=int, help="worker processes (overrides wave.workers)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.output:
        overrides.append(f"output.directory={args.output}")
    if args.workers:
        overrides.append(f"wave.workers={args.workers}")
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, dynamics.CollisionError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
