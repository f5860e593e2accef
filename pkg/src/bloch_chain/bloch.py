"""Bloch modes of the periodic channel and the count of forward-propagating ones.

With ``a`` the lead amplitudes at the left end of a cell and ``b`` those at
the right end, a Bloch mode satisfies ``b = lam * a``.  Eliminating ``b``
from the cell scattering relations gives the pencil

    M1 v = lam M2 v,   M1 = [[t, 0], [-r, I]],   M2 = [[I, -r'], [0, t']],

for ``v = (a+, a-)``.  ``M2`` is singular as soon as closed channels are
kept, so the pencil is handled by QZ and never reduced to ``M2^-1 M1``.  The
Bloch phase is ``theta = arg(lam)``; with this convention ``theta`` grows
with ``k`` on bands carrying positive flux.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .geometry import WaveguideProfile
from .modal import CellScattering, ModeBasis, cell_scattering

log = logging.getLogger(__name__)

INF_TOL = 1e-8
UNIMODULAR_TOL = 1e-6
FLUX_TOL = 1e-10
SYMMETRY_TOL = 1e-6

PROPAGATING = "propagating"
EVANESCENT = "evanescent"
DEGENERATE = "zero-or-infinity"

# per-point flags written to the sweep outputs
AMBIGUOUS = "ambiguous-modulus"
WEAK_FLUX = "weak-flux"
ASYMMETRIC = "asymmetric-spectrum"
FLUX_IMBALANCE = "flux-imbalance"
REFINED = "refined"


class AmbiguousSpectrumError(RuntimeError):
    """Classification of some eigenvalue is not trustworthy at this ``k``."""


def assemble_pencil(scattering: CellScattering):
    """Return ``(M1, M2)`` built from the four blocks of one cell."""
    r, t, rp, tp = scattering.blocks
    n = r.shape[0]
    eye = np.eye(n, dtype=complex)
    zero = np.zeros((n, n), dtype=complex)
    m1 = np.block([[t, zero], [-r, eye]])
    m2 = np.block([[eye, -rp], [zero, tp]])
    return m1, m2


def mode_flux(basis: ModeBasis, vector) -> float:
    """Longitudinal flux ``Im int psi* dpsi/dx dy`` of a field given by lead amplitudes.

    ``vector`` stacks the right- and left-going amplitudes ``(a+, a-)``.  An
    open channel contributes ``beta (|a+|^2 - |a-|^2)``; a closed channel with
    ``beta = i kappa`` contributes ``2 kappa Im(conj(a+) a-)``.
    """
    v = np.asarray(vector)
    n = basis.size
    ap, am = v[:n], v[n:]
    p = basis.n_prop
    beta = basis.beta
    flux = np.sum(beta[:p].real * (np.abs(ap[:p]) ** 2 - np.abs(am[:p]) ** 2))
    kappa = beta[p:].imag
    flux += np.sum(2.0 * kappa * np.imag(np.conj(ap[p:]) * am[p:]))
    return float(flux)


@dataclass
class BlochSpectrum:
    """Eigenpairs of the cell pencil at one wavenumber.

    ``eigvals``, ``vectors`` (columns, unit norm), ``kind``, ``theta`` and
    ``flux`` refer to the finite nonzero eigenvalues; ``n_degenerate`` counts
    those at zero or infinity.  ``theta`` and ``flux`` are NaN for
    non-propagating modes.
    """

    k: float
    eigvals: np.ndarray
    vectors: np.ndarray
    kind: np.ndarray
    theta: np.ndarray
    flux: np.ndarray
    n_degenerate: int
    unimodular_tol: float
    symmetry_residual: float
    flags: list = field(default_factory=list)

    @property
    def propagating(self) -> np.ndarray:
        return np.flatnonzero(self.kind == PROPAGATING)

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.flux[self.propagating] > 0))

    @property
    def n_negative(self) -> int:
        return int(np.sum(self.flux[self.propagating] < 0))

    @property
    def ambiguous(self) -> bool:
        return AMBIGUOUS in self.flags or WEAK_FLUX in self.flags

    def positive_phases(self) -> np.ndarray:
        idx = self.propagating
        return np.sort(self.theta[idx][self.flux[idx] > 0])


def reciprocal_residual(eigvals) -> float:
    """Largest relative mismatch between the multisets ``{lam}`` and ``{1/lam}``."""
    lam = np.asarray(eigvals, dtype=complex)
    if lam.size == 0:
        return 0.0
    inv = 1.0 / lam
    cost = np.abs(lam[:, None] - inv[None, :]) / np.maximum(np.abs(lam[:, None]), np.abs(inv[None, :]))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].max())


def solve_bloch(m1, m2, unimodular_tol: float = UNIMODULAR_TOL, *, basis: ModeBasis,
                k: float | None = None, inf_tol: float = INF_TOL,
                symmetry_window: float | None = None) -> BlochSpectrum:
    """Generalized eigenpairs of ``(M1, M2)`` and their classification.

    Parameters
    ----------
    m1, m2 : ndarray
        Pencil from :func:`assemble_pencil`.
    unimodular_tol : float
        ``||lam| - 1| <= tol`` counts as propagating.  Moduli within ten times
        the tolerance but outside it set the ``ambiguous-modulus`` flag.
    basis : ModeBasis
        Lead basis, needed for the flux.
    inf_tol : float
        Eigenvalues with ``|lam| < inf_tol`` or ``|lam| > 1/inf_tol`` are set
        aside as numerically zero or infinite.
    symmetry_window : float, optional
        Check the ``lam -> 1/lam`` symmetry only for ``window <= |lam| <= 1/window``.
        Default: all finite nonzero eigenvalues.
    """
    (alpha, beta), vecs = scipy.linalg.eig(m1, m2, homogeneous_eigvals=True)
    a_abs, b_abs = np.abs(alpha), np.abs(beta)
    finite = (b_abs > inf_tol * a_abs) & (a_abs > inf_tol * b_abs)
    lam = alpha[finite] / beta[finite]
    vecs = vecs[:, finite]
    vecs = vecs / np.linalg.norm(vecs, axis=0)
    mod = np.abs(lam)
    dev = np.abs(mod - 1.0)
    kind = np.where(dev <= unimodular_tol, PROPAGATING, EVANESCENT).astype(object)
    flags = []
    if np.any((dev > unimodular_tol) & (dev <= 10.0 * unimodular_tol)):
        flags.append(AMBIGUOUS)
    theta = np.full(lam.size, np.nan)
    flux = np.full(lam.size, np.nan)
    for i in np.flatnonzero(kind == PROPAGATING):
        theta[i] = np.angle(lam[i])
        flux[i] = mode_flux(basis, vecs[:, i])
        if abs(flux[i]) < FLUX_TOL:
            flags.append(WEAK_FLUX)
    if symmetry_window is None:
        checked = lam
    else:
        checked = lam[(mod >= symmetry_window) & (mod <= 1.0 / symmetry_window)]
    sym = reciprocal_residual(checked)
    if sym > SYMMETRY_TOL:
        flags.append(ASYMMETRIC)
    if np.sum(flux > 0) != np.sum(flux < 0):
        flags.append(FLUX_IMBALANCE)
    return BlochSpectrum(
        k=float("nan") if k is None else float(k),
        eigvals=lam,
        vectors=vecs,
        kind=kind,
        theta=theta,
        flux=flux,
        n_degenerate=int(np.sum(~finite)),
        unimodular_tol=unimodular_tol,
        symmetry_residual=sym,
        flags=sorted(set(flags)),
    )


def bloch_spectrum(scattering: CellScattering, unimodular_tol: float = UNIMODULAR_TOL,
                   **kwargs) -> BlochSpectrum:
    """Pencil assembly plus :func:`solve_bloch` for one cell."""
    m1, m2 = assemble_pencil(scattering)
    return solve_bloch(m1, m2, unimodular_tol, basis=scattering.basis, k=scattering.k, **kwargs)


def count_modes(spectrum: BlochSpectrum, allow_ambiguous: bool = False) -> int:
    """Number of propagating Bloch modes with positive flux."""
    if spectrum.ambiguous and not allow_ambiguous:
        raise AmbiguousSpectrumError(
            f"classification ambiguous at k={spectrum.k:.12g}: {', '.join(spectrum.flags)}"
        )
    return spectrum.n_positive


# ---------------------------------------------------------------------------
# sweeps


def cutoffs_below(k_max: float, width: float) -> np.ndarray:
    n = np.arange(1, int(k_max * width / np.pi) + 2)
    return n * np.pi / width


def avoid_cutoffs(grid, width: float = 1.0, shift: float = 1e-9) -> np.ndarray:
    """Copy of ``grid`` with points closer than ``shift`` to a cutoff ``n pi / width`` moved up by ``shift``."""
    grid = np.array(grid, dtype=float)
    cut = cutoffs_below(grid.max() + shift, width)
    near = np.min(np.abs(grid[:, None] - cut[None, :]), axis=1) < shift
    grid[near] += shift
    return grid


def make_k_grid(k_min: float, k_max: float, dk: float, width: float = 1.0,
                shift: float | None = None) -> np.ndarray:
    """Uniform grid ``k_min, k_min + dk, ...`` kept away from the lead cutoffs ``n pi / width``.

    A point closer than ``shift`` to a cutoff is moved up by ``shift``
    (default ``1e-6 dk``).
    """
    if not (dk > 0 and k_max >= k_min > 0):
        raise ValueError("need 0 < k_min <= k_max and dk > 0")
    if shift is None:
        shift = 1e-6 * dk
    count = int(math.floor((k_max - k_min) / dk + 1e-9)) + 1
    return avoid_cutoffs(k_min + dk * np.arange(count), width, shift)


@dataclass
class SolverParams:
    """Truncation and tolerances shared by every point of a sweep."""

    n_evan: int | None = None
    n_slices: int | None = None
    unimodular_tol: float = UNIMODULAR_TOL
    inf_tol: float = INF_TOL
    symmetry_window: float | None = 1e-4
    method: str = "coupled"
    refine_steps: int = 3
    refine_shift: float = 1e-5

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PointResult:
    k: float
    nb: int
    flags: list
    theta: np.ndarray
    flux_sign: np.ndarray
    n_evan: int
    n_slices: int
    unitarity: float
    symmetry_residual: float


def _scattering(profile, k, params: SolverParams, cache=None):
    if cache is not None:
        return cache.get(profile, k, params.n_evan, params.n_slices, method=params.method)
    return cell_scattering(profile, k, params.n_evan, params.n_slices, method=params.method)


def solve_point(profile: WaveguideProfile, k: float, params: SolverParams | None = None,
                cache=None) -> PointResult:
    """Count forward Bloch modes at ``k``, nudging ``k`` up when the classification is ambiguous.

    Each retry moves ``k`` by ``refine_shift * k``-scaled steps; the point
    keeps the ``refined`` flag and, if no retry helps, the ambiguity flags.
    """
    params = params or SolverParams()
    kk = float(k)
    refined = False
    for attempt in range(params.refine_steps + 1):
        cs = _scattering(profile, kk, params, cache)
        spec = bloch_spectrum(cs, params.unimodular_tol, inf_tol=params.inf_tol,
                              symmetry_window=params.symmetry_window)
        if not spec.ambiguous or attempt == params.refine_steps:
            break
        refined = True
        kk = float(k) + (attempt + 1) * params.refine_shift * 2.0 * np.pi / max(float(k), 1.0)
    flags = list(spec.flags) + ([REFINED] if refined else [])
    idx = spec.propagating
    return PointResult(
        k=float(k),
        nb=spec.n_positive,
        flags=flags,
        theta=spec.theta[idx],
        flux_sign=np.sign(spec.flux[idx]).astype(int),
        n_evan=cs.basis.n_evan,
        n_slices=cs.n_slices,
        unitarity=cs.unitarity_residual(),
        symmetry_residual=spec.symmetry_residual,
    )


@dataclass
class ModeCountSeries:
    """``N_B`` sampled on a wavenumber grid, with per-point flags."""

    k: np.ndarray
    nb: np.ndarray
    dk: float
    flags: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)
        self.nb = np.asarray(self.nb, dtype=int)
        if not self.flags:
            self.flags = [[] for _ in self.k]
        if np.any(self.nb < 0):
            raise ValueError("mode counts must be nonnegative")

    def __len__(self):
        return self.k.size

    @property
    def flagged(self) -> np.ndarray:
        return np.array([bool(f) for f in self.flags])

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["k", "N_B", "flags"])
            for k, nb, fl in zip(self.k, self.nb, self.flags):
                w.writerow([repr(float(k)), int(nb), "|".join(fl)])

    @classmethod
    def from_csv(cls, path, dk=None, metadata=None) -> "ModeCountSeries":
        ks, nbs, flags = [], [], []
        with open(path) as fh:
            rows = csv.reader(line for line in fh if not line.startswith("#"))
            next(rows)
            for k, nb, fl in rows:
                ks.append(float(k))
                nbs.append(int(nb))
                flags.append([f for f in fl.split("|") if f])
        if dk is None:
            dk = float(np.median(np.diff(ks))) if len(ks) > 1 else float("nan")
        return cls(np.array(ks), np.array(nbs), dk, flags, dict(metadata or {}))


@dataclass
class SweepResult:
    series: ModeCountSeries
    points: list

    def band_rows(self):
        """``(k, theta, flux_sign)`` for every propagating mode of every point."""
        for p in self.points:
            for th, sg in zip(p.theta, p.flux_sign):
                yield p.k, float(th), int(sg)

    def bands_to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["k", "theta", "flux_sign"])
            for k, th, sg in self.band_rows():
                w.writerow([repr(k), repr(th), sg])


def _solve_star(args):
    return solve_point(*args)


def sweep(profile: WaveguideProfile, k_grid, params: SolverParams | None = None,
          workers: int = 1, cache=None, progress=None) -> SweepResult:
    """Solve every grid point; results are ordered by ``k`` whatever the worker count."""
    params = params or SolverParams()
    k_grid = np.asarray(k_grid, dtype=float)
    jobs = [(profile, float(k), params, cache) for k in k_grid]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_solve_star, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    else:
        points = []
        for i, job in enumerate(jobs):
            points.append(_solve_star(job))
            if progress is not None:
                progress(i + 1, len(jobs))
    dk = float(np.median(np.diff(k_grid))) if k_grid.size > 1 else float("nan")
    meta = {"A2": profile.A2, **params.as_dict()}
    series = ModeCountSeries(
        k=k_grid,
        nb=[p.nb for p in points],
        dk=dk,
        flags=[p.flags for p in points],
        metadata=meta,
    )
    for p in points:
        if p.flags:
            log.info("k=%.12g flagged: %s", p.k, ", ".join(p.flags))
    return SweepResult(series, points)


def band_points(profile: WaveguideProfile, k_grid, params: SolverParams | None = None,
                workers: int = 1, cache=None, both_signs: bool = False):
    """``(theta, k)`` of every positive-flux propagating mode over ``k_grid``.

    With ``both_signs`` the negative-flux partners are included as well.
    """
    res = sweep(profile, k_grid, params, workers=workers, cache=cache)
    out = []
    for p in res.points:
        for th, sg in zip(p.theta, p.flux_sign):
            if sg > 0 or both_signs:
                out.append((float(th), p.k))
    return out


# ---------------------------------------------------------------------------
# finite-difference audit


def phase_velocity_signs(profile: WaveguideProfile, k: float, dk: float = 1e-6,
                         params: SolverParams | None = None):
    """Compare flux signs with the sign of ``d theta / dk`` from a forward difference.

    Propagating eigenvectors at ``k`` and ``k + dk`` are paired by maximal
    overlap ``|v1^H v2|`` (optimal assignment).

    Returns
    -------
    flux_sign, dtheta_sign : ndarray of int
        One entry per propagating mode at ``k``.
    """
    params = params or SolverParams()
    cs0 = cell_scattering(profile, k, params.n_evan, params.n_slices, method=params.method)
    n_evan = cs0.basis.n_evan
    n_slices = cs0.n_slices
    cs1 = cell_scattering(profile, k + dk, n_evan, n_slices, method=params.method)
    s0 = bloch_spectrum(cs0, params.unimodular_tol, inf_tol=params.inf_tol)
    s1 = bloch_spectrum(cs1, params.unimodular_tol, inf_tol=params.inf_tol)
    i0, i1 = s0.propagating, s1.propagating
    if i0.size != i1.size:
        raise AmbiguousSpectrumError(
            f"propagating count changes between k={k:.12g} and k+dk; move off the band edge"
        )
    if i0.size == 0:
        return np.zeros(0, int), np.zeros(0, int)
    overlap = np.abs(s0.vectors[:, i0].conj().T @ s1.vectors[:, i1])
    rows, cols = linear_sum_assignment(-overlap)
    dtheta = np.angle(s1.eigvals[i1[cols]] / s0.eigvals[i0[rows]])
    return np.sign(s0.flux[i0[rows]]).astype(int), np.sign(dtheta).astype(int)


# ---------------------------------------------------------------------------
# band slopes


@dataclass
class BandSlopes:
    """Slopes ``u = L dk/dtheta`` of every band met at the sampled wavenumbers."""

    k: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    flux_sign: np.ndarray
    n_dropped: int
    L: float

    def __len__(self):
        return self.k.size


def _circular(d):
    return (d + np.pi) % (2.0 * np.pi) - np.pi


def band_slopes(profile: WaveguideProfile, k_grid, params: SolverParams | None = None,
                step: float = 1e-6, continuity: float = 0.2, cache=None) -> BandSlopes:
    """Band slopes from matched forward differences at each grid wavenumber.

    The spectrum at ``k`` is paired with the one at ``k + step`` by
    nearest-``theta`` assignment; pairs further apart than ``continuity``
    (radians), or points whose propagating count changes, are dropped and
    counted, never interpolated.
    """
    params = params or SolverParams()
    ks, th, us, sg = [], [], [], []
    dropped = 0
    for k in np.asarray(k_grid, dtype=float):
        cs0 = _scattering(profile, k, params, cache)
        s0 = bloch_spectrum(cs0, params.unimodular_tol, inf_tol=params.inf_tol)
        cs1 = cell_scattering(profile, k + step, cs0.basis.n_evan, cs0.n_slices, method=params.method)
        s1 = bloch_spectrum(cs1, params.unimodular_tol, inf_tol=params.inf_tol)
        i0, i1 = s0.propagating, s1.propagating
        if i0.size != i1.size or s0.ambiguous or s1.ambiguous:
            dropped += i0.size
            continue
        if i0.size == 0:
            continue
        dist = np.abs(_circular(s1.theta[i1][None, :] - s0.theta[i0][:, None]))
        rows, cols = linear_sum_assignment(dist)
        for r, c in zip(rows, cols):
            d = _circular(s1.theta[i1[c]] - s0.theta[i0[r]])
            if abs(d) > continuity or d == 0.0:
                dropped += 1
                continue
            ks.append(k)
            th.append(s0.theta[i0[r]])
            us.append(profile.L * step / d)
            sg.append(int(np.sign(s0.flux[i0[r]])))
    return BandSlopes(np.array(ks), np.array(th), np.array(us), np.array(sg, dtype=int), dropped, profile.L)
