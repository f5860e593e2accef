"""Transport statistics of a classical ensemble.

All estimators work on an :class:`~bloch_chain.dynamics.EnsembleRun`, i.e. on
``x`` and ``vx`` sampled at common checkpoint times.  Standard errors come
from splitting the trajectories into ``n_batches`` contiguous batches;
nonlinear estimators use the delete-one-batch jackknife.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

DEFAULT_BATCHES = 20
TRANSIENT_FACTOR = 10.0


class NonGaussianTransportWarning(UserWarning):
    """The first- and second-moment diffusion estimators disagree."""


def _batches(n: int, n_batches: int) -> list[slice]:
    if n_batches < 2:
        raise ValueError("need at least two batches")
    if n < n_batches:
        raise ValueError(f"{n} trajectories cannot fill {n_batches} batches")
    edges = np.linspace(0, n, n_batches + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def batch_mean(values, n_batches: int = DEFAULT_BATCHES):
    """Mean over axis 0 and its standard error from batch means."""
    values = np.asarray(values, dtype=float)
    means = np.array([values[s].mean(axis=0) for s in _batches(len(values), n_batches)])
    return values.mean(axis=0), means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def jackknife(values, estimator, n_batches: int = DEFAULT_BATCHES):
    """Delete-one-batch jackknife of ``estimator(values)``.

    Returns the full-sample estimate and its standard error.
    """
    values = np.asarray(values)
    full = np.asarray(estimator(values), dtype=float)
    idx = np.arange(len(values))
    reps = []
    for s in _batches(len(values), n_batches):
        keep = np.ones(len(values), bool)
        keep[idx[s]] = False
        reps.append(estimator(values[keep]))
    reps = np.asarray(reps, dtype=float)
    b = len(reps)
    err = np.sqrt((b - 1) / b * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0))
    return full, err


# ---------------------------------------------------------------------------


@dataclass
class Autocorrelation:
    times: np.ndarray
    C: np.ndarray
    stderr: np.ndarray
    n_samples: int

    @property
    def noise_floor(self) -> float:
        return 1.0 / np.sqrt(self.n_samples)

    def decay_time(self) -> float:
        """First checkpoint at which ``|C|`` drops below the ``1/sqrt(N)`` noise floor."""
        below = np.flatnonzero(np.abs(self.C) < self.noise_floor)
        return float(self.times[below[0]]) if below.size else float("inf")

    def to_csv(self, path, header_lines=()):
        _write_csv(path, header_lines, ["t", "C", "C_err"], zip(self.times, self.C, self.stderr))


def velocity_autocorrelation(run, n_batches: int = DEFAULT_BATCHES) -> Autocorrelation:
    """``C(t) = <vx(t) vx(0)>`` at the checkpoint times of ``run``."""
    prod = run.vx * run.vx0[:, None]
    c, err = batch_mean(prod, n_batches)
    return Autocorrelation(np.asarray(run.times, float), c, err, len(run.vx0))


@dataclass
class Moments:
    times: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    m1_err: np.ndarray
    m2_err: np.ndarray
    n_samples: int

    @property
    def D1_t(self) -> np.ndarray:
        """Running estimate ``m2(t) / t`` (NaN at ``t = 0``)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.times > 0, self.m2 / self.times, np.nan)

    def to_csv(self, path, header_lines=()):
        _write_csv(path, header_lines, ["t", "m1", "m2", "D1_t"],
                   zip(self.times, self.m1, self.m2, self.D1_t))


def displacement_moments(run, n_batches: int = DEFAULT_BATCHES) -> Moments:
    """``<|x_t - x_0|>`` and ``<(x_t - x_0)^2>`` at every checkpoint."""
    dx = run.displacement
    m1, e1 = batch_mean(np.abs(dx), n_batches)
    m2, e2 = batch_mean(dx * dx, n_batches)
    return Moments(np.asarray(run.times, float), m1, m2, e1, e2, dx.shape[0])


@dataclass
class DiffusionEstimate:
    """Two time-averaged diffusion estimators and the Gaussian moment ratio.

    ``D1`` averages ``m2/t``; ``D1_first`` averages ``(pi/2)(m1/sqrt(t))^2``;
    ``ratio`` averages ``(pi/2) m1^2 / m2``, which is 1 for Gaussian spreading.
    """

    D1: float
    D1_err: float
    D1_first: float
    D1_first_err: float
    ratio: float
    ratio_err: float
    transient_cut: float
    n_times: int

    @property
    def discrepancy(self) -> float:
        """Estimator difference in units of the combined standard error."""
        return abs(self.D1 - self.D1_first) / np.hypot(self.D1_err, self.D1_first_err)

    @property
    def ratio_deviation(self) -> float:
        return abs(self.ratio - 1.0) / self.ratio_err


def transient_cut_from(autocorr: Autocorrelation, factor: float = TRANSIENT_FACTOR) -> float:
    """Default transient cut: ``factor`` times the noise-floor crossing of ``C(t)``."""
    return factor * autocorr.decay_time()


def diffusion_coefficient(run, transient_cut: float | None = None,
                          n_batches: int = DEFAULT_BATCHES, agreement: float = 2.0) -> DiffusionEstimate:
    """Time-averaged ``D1`` beyond ``transient_cut`` with jackknife errors.

    Emits :class:`NonGaussianTransportWarning` when the two estimators differ
    by more than ``agreement`` combined standard errors.
    """
    if transient_cut is None:
        transient_cut = transient_cut_from(velocity_autocorrelation(run, n_batches))
    times = np.asarray(run.times, float)
    sel = times > transient_cut
    if sel.sum() < 2:
        raise ValueError(
            f"only {sel.sum()} checkpoints after the transient cut {transient_cut:g}; extend the horizon"
        )
    t = times[sel]
    dx = run.displacement[:, sel]

    def estimators(block):
        m1 = np.abs(block).mean(axis=0)
        m2 = (block * block).mean(axis=0)
        return [np.mean(m2 / t), np.mean(0.5 * np.pi * m1 * m1 / t), np.mean(0.5 * np.pi * m1 * m1 / m2)]

    (d2, d1, ratio), (e2, e1, er) = jackknife(dx, estimators, n_batches)
    est = DiffusionEstimate(float(d2), float(e2), float(d1), float(e1), float(ratio), float(er),
                            float(transient_cut), int(sel.sum()))
    if est.discrepancy > agreement:
        warnings.warn(
            f"diffusion estimators disagree: {est.D1:.5g} +- {est.D1_err:.2g} (second moment) vs "
            f"{est.D1_first:.5g} +- {est.D1_first_err:.2g} (first moment); transport is not Gaussian",
            NonGaussianTransportWarning,
            stacklevel=2,
        )
    return est


@dataclass
class HistogramReport:
    """Histogram of ``x_t / sqrt(t)`` with a Gaussian fit."""

    t: float
    centers: np.ndarray
    density: np.ndarray
    gaussian: np.ndarray
    variance: float
    variance_err: float
    mean: float
    skewness: float
    skewness_err: float
    excess_kurtosis: float
    ks_statistic: float
    ks_pvalue: float

    def to_csv(self, path, header_lines=()):
        _write_csv(path, header_lines, ["bin_center", "density", "gaussian_fit"],
                   zip(self.centers, self.density, self.gaussian))


def normalized_displacement_histogram(run, t: float | None = None, bins=81, symmetric: bool = True,
                                      n_batches: int = DEFAULT_BATCHES) -> HistogramReport:
    """Histogram of ``(x_t - x_0) / sqrt(t)`` at the checkpoint nearest ``t`` (default: last).

    With ``symmetric`` the fitted Gaussian has zero mean and variance
    ``<x~^2>``; otherwise mean and variance are both fitted.  Goodness of fit
    is the Kolmogorov-Smirnov statistic against the fitted law.
    """
    times = np.asarray(run.times, float)
    j = len(times) - 1 if t is None else int(np.argmin(np.abs(times - t)))
    tj = times[j]
    if tj <= 0:
        raise ValueError("the histogram needs a checkpoint at t > 0")
    xt = run.displacement[:, j] / np.sqrt(tj)
    if symmetric:
        mean = 0.0
        var, var_err = batch_mean(xt * xt, n_batches)
    else:
        mean = float(xt.mean())
        var, var_err = jackknife(xt, lambda v: v.var(), n_batches)
    sd = float(np.sqrt(var))
    density, edges = np.histogram(xt, bins=bins, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    gauss = stats.norm.pdf(centers, loc=mean, scale=sd)
    ks = stats.kstest(xt, "norm", args=(mean, sd))
    skew, skew_err = jackknife(xt, stats.skew, n_batches)
    return HistogramReport(
        t=float(tj),
        centers=centers,
        density=density,
        gaussian=gauss,
        variance=float(var),
        variance_err=float(var_err),
        mean=mean,
        skewness=float(skew),
        skewness_err=float(skew_err),
        excess_kurtosis=float(stats.kurtosis(xt)),
        ks_statistic=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
    )


@dataclass
class EnsembleSummary:
    sample_count: int
    autocorrelation: Autocorrelation
    moments: Moments
    diffusion: DiffusionEstimate
    histogram: HistogramReport


def summarize(run, transient_cut: float | None = None, bins=81,
              n_batches: int = DEFAULT_BATCHES) -> EnsembleSummary:
    ac = velocity_autocorrelation(run, n_batches)
    if transient_cut is None:
        transient_cut = transient_cut_from(ac)
    return EnsembleSummary(
        sample_count=len(run.x0),
        autocorrelation=ac,
        moments=displacement_moments(run, n_batches),
        diffusion=diffusion_coefficient(run, transient_cut, n_batches),
        histogram=normalized_displacement_histogram(run, bins=bins, n_batches=n_batches),
    )


def _write_csv(path, header_lines, columns, rows):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
