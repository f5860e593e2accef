"""Smoothed mode counts, the square-root law and band-slope statistics.

For a chaotic, diffusive cell of area ``A_c`` and period ``L`` the mean count
of forward Bloch modes grows as

    <N_B(k)> ~ sqrt(g A_c D1 / (2 pi)) sqrt(k) / L + c0,

with ``D1 = lim <x^2>/t`` of unit-speed billiard trajectories and ``g = 2``
for a cell with a transverse mirror symmetry.  In the same units the slopes
``u = L dk/dtheta`` of the bands have variance ``g D1 / (A_c k)``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bloch import ModeCountSeries

G_MIRROR = 2


def mean_level_spacing(A_c: float, k):
    """Weyl spacing ``2 pi / (k A_c)`` of the wavenumbers of one cell."""
    k = np.asarray(k, dtype=float)
    if np.any(k <= 0):
        raise ValueError("k must be positive")
    out = 2.0 * np.pi / (k * A_c)
    return float(out) if out.ndim == 0 else out


def liouville_measure(A_c: float) -> float:
    """Phase-space volume ``2 pi A_c`` of the unit-speed shell of one cell."""
    return 2.0 * np.pi * A_c


def heisenberg_time(A_c: float, k: float) -> float:
    """Heisenberg time of the cell in unit-speed time, ``A_c k``.

    With ``hbar = 1`` and energy ``k^2 / 2`` the time ``2 pi A_c / h`` is
    ``A_c`` in units where the speed is ``k``; at unit speed it reads ``A_c k``.
    """
    return A_c * k


# ---------------------------------------------------------------------------
# smoothing


@dataclass
class SmoothedSeries:
    source: ModeCountSeries
    kernel: str
    width: float
    edges: str
    k: np.ndarray
    values: np.ndarray
    A_c: float | None = None

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["k", "N_B", "N_B_smoothed"])
            for k, nb, s in zip(self.k, self.source.nb, self.values):
                w.writerow([repr(float(k)), int(nb), repr(float(s))])


def _uniform_step(k) -> float:
    steps = np.diff(k)
    if steps.size == 0:
        return 1.0
    if np.ptp(steps) > 1e-3 * np.mean(steps):  # tolerates the tiny cutoff shifts
        raise ValueError("smoothing needs a uniform k grid")
    return float(np.mean(steps))


def _gaussian_weights(sigma_steps: float) -> np.ndarray:
    radius = int(math.ceil(5.0 * sigma_steps))
    m = np.arange(-radius, radius + 1)
    w = np.exp(-0.5 * (m / sigma_steps) ** 2)
    return w / w.sum()


def smooth(series: ModeCountSeries, kernel: str = "gaussian", width: float = np.pi,
           A_c: float | None = None, edges: str = "renormalize") -> SmoothedSeries:
    """Discrete convolution of ``N_B`` with a unit-mass kernel.

    Parameters
    ----------
    kernel : {"gaussian", "boxcar"}
        ``gaussian``: standard deviation ``width`` in ``k``.  ``boxcar``: full
        width ``width`` in ``k``, or ``width`` mean level spacings at each
        point when ``A_c`` is given.
    edges : {"renormalize", "reflect"}
        ``renormalize`` truncates the kernel at the ends of the grid and
        rescales it to unit mass.  ``reflect`` mirrors the series about its
        ends, which gives a symmetric doubly stochastic operator and so keeps
        the series mean exactly (fixed-width kernels on a uniform grid).
    """
    k = series.k
    y = series.nb.astype(float)
    step = _uniform_step(k)
    if edges not in ("renormalize", "reflect"):
        raise ValueError(f"unknown edge mode {edges!r}")
    if kernel == "gaussian":
        w = _gaussian_weights(width / step)
        covered = np.sum(np.abs(k - k[len(k) // 2]) <= 2.0 * width)
        out = _apply_fixed(y, w, edges)
    elif kernel == "boxcar":
        if A_c is None:
            half = int(round(0.5 * width / step))
            w = np.ones(2 * half + 1) / (2 * half + 1)
            covered = w.size
            out = _apply_fixed(y, w, edges)
        else:
            if edges == "reflect":
                raise ValueError("reflect edges need a fixed-width kernel")
            half_width = 0.5 * width * mean_level_spacing(A_c, k)
            mask = np.abs(k[None, :] - k[:, None]) <= half_width[:, None]
            covered = int(mask.sum(axis=1).min())
            out = (mask @ y) / mask.sum(axis=1)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    if covered < 10:
        warnings.warn(f"only {covered} samples under the smoothing kernel", RuntimeWarning, stacklevel=2)
    return SmoothedSeries(series, kernel, float(width), edges, k.copy(), out, A_c)


def _apply_fixed(y, w, edges):
    if edges == "reflect":
        if (len(w) - 1) // 2 >= len(y):
            raise ValueError("kernel wider than the series")
        # scipy's 'reflect' mirrors about the outer sample edges (d c b a | a b c d)
        return ndimage.correlate1d(y, w, mode="reflect")
    num = ndimage.correlate1d(y, w, mode="constant", cval=0.0)
    den = ndimage.correlate1d(np.ones_like(y), w, mode="constant", cval=0.0)
    return num / den


def window_grid(k_center: float, r: float, A_c: float, sample_count: int) -> np.ndarray:
    """``sample_count`` uniform wavenumbers spanning ``r`` level spacings around ``k_center``."""
    half = 0.5 * r * mean_level_spacing(A_c, k_center)
    return np.linspace(k_center - half, k_center + half, sample_count)


def windowed_average(series: ModeCountSeries, k_center: float, r: float, A_c: float):
    """Boxcar mean of ``N_B`` over ``r`` level spacings centred at ``k_center``.

    Returns
    -------
    mean, stderr : float
        ``stderr`` is the plain standard error of the samples in the window.
    count : int
    """
    half = 0.5 * r * mean_level_spacing(A_c, k_center)
    sel = np.abs(series.k - k_center) <= half * (1 + 1e-12)
    vals = series.nb[sel].astype(float)
    if vals.size == 0:
        raise ValueError(f"no samples within {r} level spacings of k={k_center}")
    err = vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else float("nan")
    return float(vals.mean()), float(err), int(vals.size)


def window_convergence(series: ModeCountSeries, k_center: float, r_values, A_c: float):
    """``(r, mean, stderr, count)`` rows of :func:`windowed_average` for each ``r``."""
    return np.array([(r, *windowed_average(series, k_center, r, A_c)) for r in r_values])


# ---------------------------------------------------------------------------
# square-root law


@dataclass(frozen=True)
class SemiclassicalPrediction:
    """Leading semiclassical count of forward Bloch modes."""

    A_c: float
    D1: float
    L: float
    g: float = G_MIRROR
    c0: float = 0.0

    @property
    def slope(self) -> float:
        """Coefficient ``a`` of ``sqrt(k)``."""
        return math.sqrt(self.g * self.A_c * self.D1 / (2.0 * np.pi)) / self.L

    @property
    def liouville_measure(self) -> float:
        return liouville_measure(self.A_c)

    def heisenberg_time(self, k: float) -> float:
        return heisenberg_time(self.A_c, k)

    def slope_variance(self, k):
        """Variance ``g D1 / (A_c k)`` of the band slopes ``L dk/dtheta``."""
        return self.g * self.D1 / (self.A_c * np.asarray(k, dtype=float))


def predict_nb(prediction: SemiclassicalPrediction, k):
    """``a sqrt(k) + c0`` for the diffusive cell.

    A cell with ballistic channels (invariant tori of the flow) would add a
    term linear in ``k`` here, proportional to the mean speed along the
    channel over the tori; the geometries treated here have none.
    """
    if not prediction.D1 > 0:
        raise ValueError("D1 must be positive")
    k = np.asarray(k, dtype=float)
    out = prediction.slope * np.sqrt(k) + prediction.c0
    return float(out) if out.ndim == 0 else out


def d1_from_slope(a: float, A_c: float, L: float, g: float = G_MIRROR) -> float:
    """Invert ``a = sqrt(g A_c D1 / 2 pi) / L``."""
    return 2.0 * np.pi * L * L * a * a / (g * A_c)


@dataclass
class SqrtFit:
    a: float
    c0: float
    covariance: np.ndarray
    D1_quantum: float
    D1_err: float
    residual_norm: float
    linear_residual_norm: float
    n_points: int
    k_range: tuple

    @property
    def preferred(self) -> str:
        """``"sqrt"`` or ``"linear"``: the two-parameter law with the smaller residual."""
        return "sqrt" if self.residual_norm <= self.linear_residual_norm else "linear"

    def report_rows(self):
        yield "a", self.a
        yield "c0", self.c0
        yield "var_a", self.covariance[0, 0]
        yield "var_c0", self.covariance[1, 1]
        yield "cov_a_c0", self.covariance[0, 1]
        yield "D1_quantum", self.D1_quantum
        yield "D1_quantum_err", self.D1_err
        yield "residual_norm", self.residual_norm
        yield "linear_residual_norm", self.linear_residual_norm
        yield "n_points", self.n_points

    def to_csv(self, path, header_lines=(), extra=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["quantity", "value"])
            for name, value in list(self.report_rows()) + list(extra):
                w.writerow([name, repr(float(value))])


def _lstsq(x, y):
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    dof = max(len(y) - x.shape[1], 1)
    cov = np.linalg.inv(x.T @ x) * (resid @ resid) / dof
    return coef, cov, float(np.linalg.norm(resid))


def fit_sqrt_law(smoothed, g: float = G_MIRROR, A_c: float = 1.0, L: float = 1.0,
                 k_range=None, n_trend_bins: int = 4) -> SqrtFit:
    """Least-squares fit of ``a sqrt(k) + c0`` and the implied ``D1``.

    ``smoothed`` is a :class:`SmoothedSeries` or a ``(k, values)`` pair.  The
    covariance is the ordinary least-squares one scaled by the residual
    variance; neighbouring smoothed values are correlated, so it is a lower
    bound on the true uncertainty.

    Raises
    ------
    ValueError
        If the series spans less than a factor 4 in ``k`` or its trend (means
        over ``n_trend_bins`` consecutive blocks) decreases anywhere.
    """
    if isinstance(smoothed, SmoothedSeries):
        k, y = smoothed.k, smoothed.values
    else:
        k, y = (np.asarray(v, dtype=float) for v in smoothed)
    if k_range is not None:
        sel = (k >= k_range[0]) & (k <= k_range[1])
        k, y = k[sel], y[sel]
    if k.size < 3 or k.max() / k.min() < 4.0:
        raise ValueError("the fit needs a series spanning at least a factor 4 in k")
    blocks = np.array([b.mean() for b in np.array_split(y, n_trend_bins)])
    if np.any(np.diff(blocks) < 0):
        raise ValueError(f"series trend is not monotone (block means {np.round(blocks, 3).tolist()})")
    (a, c0), cov, res = _lstsq(np.c_[np.sqrt(k), np.ones_like(k)], y)
    _, _, res_lin = _lstsq(np.c_[k, np.ones_like(k)], y)
    d1 = d1_from_slope(a, A_c, L, g)
    d1_err = 2.0 * d1 * math.sqrt(cov[0, 0]) / abs(a) if a != 0 else float("inf")
    return SqrtFit(float(a), float(c0), cov, d1, d1_err, res, res_lin, int(k.size),
                   (float(k.min()), float(k.max())))


# ---------------------------------------------------------------------------
# band slopes


@dataclass
class SlopeStatistics:
    """Level-averaged moments of the band slopes ``u = L dk/dtheta`` in a window.

    At fixed ``k`` a band with slope ``u`` is met with probability
    proportional to ``|u|`` relative to a level average (uniform in
    ``theta``), so every sample carries weight ``1/|u|``.  Samples are rescaled
    to the window centre with ``u sqrt(k / k_center)``.
    """

    k_center: float
    u: np.ndarray
    k: np.ndarray
    variance: float
    variance_err: float
    prediction: float
    kurtosis: float
    kurtosis_err: float
    unweighted_variance: float
    n_dropped: int
    weighting: str = "level"
    histogram: tuple = field(default=(None, None), repr=False)

    @property
    def ratio(self) -> float:
        return self.variance / self.prediction

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["k", "u", "u_scaled", "weight"])
            scaled = self.u * np.sqrt(self.k / self.k_center)
            for k, u, s in zip(self.k, self.u, scaled):
                w.writerow([repr(float(k)), repr(float(u)), repr(float(s)), repr(1.0 / abs(float(s)))])


def _weighted_moments(u, weighting):
    if weighting == "level":
        w = 1.0 / np.abs(u)
    elif weighting == "crossing":
        w = np.ones_like(u)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    m2 = np.sum(w * u**2) / np.sum(w)
    m4 = np.sum(w * u**4) / np.sum(w)
    return m2, m4 / (m2 * m2)


def band_slope_statistics(slopes, D1: float, A_c: float, g: float = G_MIRROR, k_window=None,
                          weighting: str = "level", n_batches: int = 20, bins: int = 41) -> SlopeStatistics:
    """Variance and kurtosis of band slopes against ``g D1 / (A_c k_center)``.

    ``slopes`` is a :class:`~bloch_chain.bloch.BandSlopes`.  Errors come from
    a delete-one-batch jackknife over contiguous blocks of wavenumbers, which
    keeps the slopes of one ``k`` together.
    """
    k_all, u_all = np.asarray(slopes.k, float), np.asarray(slopes.u, float)
    if k_window is not None:
        sel = (k_all >= k_window[0]) & (k_all <= k_window[1])
        k_all, u_all = k_all[sel], u_all[sel]
    good = np.isfinite(u_all) & (u_all != 0)
    k_all, u_all = k_all[good], u_all[good]
    if u_all.size < 2 * n_batches:
        raise ValueError(f"only {u_all.size} slopes in the window")
    k_center = 0.5 * (k_all.min() + k_all.max()) if k_window is None else 0.5 * (k_window[0] + k_window[1])
    scaled = u_all * np.sqrt(k_all / k_center)
    var, kurt = _weighted_moments(scaled, weighting)
    order = np.argsort(k_all, kind="stable")
    blocks = np.array_split(order, n_batches)
    reps = []
    for j in range(n_batches):
        keep = np.concatenate([b for i, b in enumerate(blocks) if i != j])
        reps.append(_weighted_moments(scaled[keep], weighting))
    reps = np.array(reps)
    jk = np.sqrt((n_batches - 1) / n_batches * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0))
    w = 1.0 / np.abs(scaled) if weighting == "level" else np.ones_like(scaled)
    hist = np.histogram(scaled, bins=bins, weights=w, density=True)
    return SlopeStatistics(
        k_center=float(k_center),
        u=u_all,
        k=k_all,
        variance=float(var),
        variance_err=float(jk[0]),
        prediction=float(g * D1 / (A_c * k_center)),
        kurtosis=float(kurt),
        kurtosis_err=float(jk[1]),
        unweighted_variance=float(np.mean(scaled**2)),
        n_dropped=int(getattr(slopes, "n_dropped", 0)) + int(np.sum(~good)),
        weighting=weighting,
        histogram=hist,
    )
