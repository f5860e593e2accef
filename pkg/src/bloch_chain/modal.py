"""Scattering matrices of one cell of the channel.

The field is expanded in the local hard-wall sine modes of each cross-section

    phi_n(x, y) = sqrt(2 / h) sin(n pi (y - lower) / h),   n = 1..N,

with longitudinal wavenumbers ``beta_n = sqrt(k^2 - (n pi / h)^2)`` (branch
``Im beta >= 0``).  Two solvers are provided:

* ``coupled`` (default): the truncated local-mode equations integrated by a
  symmetric split step.  Both substeps are exactly flux conserving.
* ``staircase``: slices of constant cross-section matched through the sine
  modes of the common aperture.  Simple, but it converges slowly for sloped
  walls.

Pieces are chained with the Redheffer star product, so every exponential that
appears is ``exp(i beta dx)`` with ``|.| <= 1``.

Amplitudes are referenced at the two ends of the cell.  Following the usual
convention the four blocks act as

    b+ = t a+ + r' b-,        a- = r a+ + t' b-,

with ``a`` the amplitudes on the left end and ``b`` on the right end.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .geometry import WaveguideProfile

log = logging.getLogger(__name__)

CUTOFF_GUARD = 1e-9


class CutoffError(ValueError):
    """Wavenumber sits on a lead cutoff ``n pi / W``."""

    def __init__(self, k, n, width):
        self.k = k
        self.n = n
        self.cutoff = n * np.pi / width
        super().__init__(
            f"k={k!r} is within {CUTOFF_GUARD:g} of the lead cutoff {n}*pi/W={self.cutoff!r}; "
            "shift k by a small fraction of the sampling step"
        )


class ConvergenceError(RuntimeError):
    """Truncated scattering matrix violates far-field flux conservation."""


def longitudinal_wavenumbers(k: float, width: float, n_modes: int) -> np.ndarray:
    """``beta_n`` for ``n = 1..n_modes``: real positive if open, ``i kappa`` if closed."""
    n = np.arange(1, n_modes + 1)
    return np.sqrt(k * k - (n * np.pi / width) ** 2 + 0j)


@dataclass(frozen=True)
class ModeBasis:
    """Truncated lead basis at wavenumber ``k``."""

    k: float
    width: float
    n_prop: int
    n_evan: int
    beta: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.n_prop + self.n_evan

    @property
    def propagating(self) -> slice:
        return slice(0, self.n_prop)


def build_basis(profile_or_width, k: float, n_evan: int) -> ModeBasis:
    """Lead basis: all open channels of the cell end plus ``n_evan`` closed ones.

    Raises
    ------
    CutoffError
        If ``k`` lies within 1e-9 of a cutoff ``n pi / W``.
    """
    if not k > 0:
        raise ValueError("k must be positive")
    if n_evan < 0:
        raise ValueError("n_evan must be nonnegative")
    if isinstance(profile_or_width, WaveguideProfile):
        width = profile_or_width.lead_width
    else:
        width = float(profile_or_width)
    n_near = int(round(k * width / np.pi))
    if n_near >= 1 and abs(k - n_near * np.pi / width) < CUTOFF_GUARD:
        raise CutoffError(k, n_near, width)
    n_prop = int(np.floor(k * width / np.pi))
    beta = longitudinal_wavenumbers(k, width, n_prop + n_evan)
    return ModeBasis(float(k), width, n_prop, int(n_evan), beta)


def _integral_cos(c, d, y0, y1):
    """Integral of cos(c y + d) over [y0, y1], stable as c -> 0."""
    span = y1 - y0
    mid = 0.5 * (y0 + y1)
    return span * np.cos(c * mid + d) * np.sinc(c * span / (2.0 * np.pi))


def overlap_matrix(left, right, n_left: int, n_right: int | None = None) -> np.ndarray:
    """Closed-form overlaps ``O_mn = int phi_m^left phi_n^right dy`` over the common interval.

    ``left`` and ``right`` are ``(lo, hi)`` cross-sections.
    """
    if n_right is None:
        n_right = n_left
    lo1, hi1 = left
    lo2, hi2 = right
    y0, y1 = max(lo1, lo2), min(hi1, hi2)
    if not y1 > y0:
        raise ValueError(f"cross-sections {left} and {right} do not overlap")
    w1, w2 = hi1 - lo1, hi2 - lo2
    if lo1 == lo2 and hi1 == hi2 and n_left == n_right:
        return np.eye(n_left)
    a = (np.arange(1, n_left + 1) * np.pi / w1)[:, None]
    b = (np.arange(1, n_right + 1) * np.pi / w2)[None, :]
    # sin(a (y - lo1)) sin(b (y - lo2)) = [cos((a-b) y - a lo1 + b lo2) - cos((a+b) y - a lo1 - b lo2)] / 2
    diff = _integral_cos(a - b, -a * lo1 + b * lo2, y0, y1)
    summ = _integral_cos(a + b, -a * lo1 - b * lo2, y0, y1)
    return (diff - summ) / np.sqrt(w1 * w2)


# ---------------------------------------------------------------------------
# scattering-matrix algebra; an S-matrix is a tuple (r, t, rp, tp)


def star(sa, sb):
    """Redheffer star product: ``sa`` on the left, ``sb`` on the right."""
    ra, ta, rpa, tpa = sa
    rb, tb, rpb, tpb = sb
    n = ra.shape[0]
    # F = (I - rp_a r_b)^-1
    f = np.linalg.inv(np.eye(n) - rpa @ rb)
    ft = f @ ta
    t = tb @ ft
    r = ra + tpa @ (rb @ ft)
    rpf = rpa @ tpb
    rp = rpb + tb @ (f @ rpf)
    tp = tpa @ (tpb + rb @ (f @ rpf))
    return r, t, rp, tp


def _propagate(s, phase):
    """Append a uniform slice with diagonal propagator ``phase`` on the right of ``s``."""
    r, t, rp, tp = s
    return r, phase[:, None] * t, phase[:, None] * rp * phase[None, :], tp * phase[None, :]


def junction(left, right, beta_left, beta_right, n_modes):
    """S-matrix of an abrupt step between two cross-sections (zero length).

    The aperture field is expanded in the sine modes of the common interval;
    continuity of the field (with zero on the exposed wall faces) and of its
    normal derivative over the aperture gives, with ``B = diag(beta)``,

        G = Ma^T Ba Ma + Mb^T Bb Mb,   r = 2 Ma G^-1 Ma^T Ba - I,   t = 2 Mb G^-1 Ma^T Ba, ...
    """
    if left == right:
        z = np.zeros((n_modes, n_modes), dtype=complex)
        eye = np.eye(n_modes, dtype=complex)
        return z, eye, z.copy(), eye.copy()
    aperture = (max(left[0], right[0]), min(left[1], right[1]))
    ma = overlap_matrix(left, aperture, n_modes)
    mb = overlap_matrix(right, aperture, n_modes)
    ua = ma.T * beta_left[None, :]
    ub = mb.T * beta_right[None, :]
    g = ma.T @ (beta_left[:, None] * ma) + mb.T @ (beta_right[:, None] * mb)
    sol = np.linalg.solve(g, np.hstack([ua, ub]))
    ga, gb = sol[:, :n_modes], sol[:, n_modes:]
    eye = np.eye(n_modes)
    r = 2.0 * ma @ ga - eye
    t = 2.0 * mb @ ga
    tp = 2.0 * ma @ gb
    rp = 2.0 * mb @ gb - eye
    return r, t, rp, tp


def coupling_generators(n_modes: int):
    """Constant matrices ``P, Q`` of the local-basis coupling ``A = (h1'/h) P + (h'/h) Q``.

    ``A_nm = int (d phi_n / dx) phi_m dy`` for the sine modes of ``[h1, h2]``,
    ``h = h2 - h1``; both generators are antisymmetric.
    """
    n = np.arange(1, n_modes + 1, dtype=float)[:, None]
    m = np.arange(1, n_modes + 1, dtype=float)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        odd = (n + m) % 2 == 1
        p = np.where(odd, 4.0 * n * m / (n * n - m * m), 0.0)
        sign = np.where(odd, -1.0, 1.0)
        q = np.where(n != m, 2.0 * n * m * sign / (m * m - n * n), 0.0)
    return p, q


def basis_rotation(a_dx):
    """Cayley map ``(I - X/2)^-1 (I + X/2)``: orthogonal for antisymmetric ``X``."""
    eye = np.eye(len(a_dx))
    return np.linalg.solve(eye - 0.5 * a_dx, eye + 0.5 * a_dx)


def rotation_junction(rot, beta_left, beta_right):
    """Junction where the modal field and its x-derivative both transform by ``rot``.

    Same algebra as :func:`junction` with overlaps ``(rot^T, I)``.
    """
    n = len(beta_left)
    ua = rot * beta_left[None, :]
    g = ua @ rot.T + np.diag(beta_right)
    sol = np.linalg.solve(g, np.hstack([ua, np.diag(beta_right)]))
    ga, gb = sol[:, :n], sol[:, n:]
    eye = np.eye(n)
    r = 2.0 * rot.T @ ga - eye
    t = 2.0 * ga
    tp = 2.0 * rot.T @ gb
    rp = 2.0 * gb - eye
    return r, t, rp, tp


def mirrored(s):
    """S-matrix of the left-right mirror image."""
    r, t, rp, tp = s
    return rp, tp, r, t


# ---------------------------------------------------------------------------


@dataclass
class CellScattering:
    """Near-field blocks ``r, t, r', t'`` of one cell at wavenumber ``k``."""

    k: float
    basis: ModeBasis
    r: np.ndarray
    t: np.ndarray
    rp: np.ndarray
    tp: np.ndarray
    n_slices: int = 0

    @property
    def blocks(self):
        return self.r, self.t, self.rp, self.tp

    def smatrix(self) -> np.ndarray:
        """Full ``2N x 2N`` map (a+, b-) -> (a-, b+)."""
        return np.block([[self.r, self.tp], [self.t, self.rp]])

    def far_field_smatrix(self) -> np.ndarray:
        """Flux-normalised propagating-to-propagating block (``2 n_prop`` square)."""
        p = self.basis.n_prop
        sq = np.sqrt(self.basis.beta[:p].real)
        scale = sq[:, None] / sq[None, :]
        blk = [[self.r[:p, :p], self.tp[:p, :p]], [self.t[:p, :p], self.rp[:p, :p]]]
        return np.block([[b * scale for b in row] for row in blk])

    def unitarity_residual(self) -> float:
        s = self.far_field_smatrix()
        if s.size == 0:
            return 0.0
        return float(np.max(np.abs(s.conj().T @ s - np.eye(len(s)))))

    def reciprocity_residual(self) -> float:
        s = self.far_field_smatrix()
        if s.size == 0:
            return 0.0
        return float(np.max(np.abs(s - s.T)))

    def mirror_residual(self) -> float:
        """``max(|r - r'|, |t - t'|)`` over all channels."""
        return float(max(np.max(np.abs(self.r - self.rp)), np.max(np.abs(self.t - self.tp))))


SLICES_PER_WAVELENGTH = 40


def default_slices(profile: WaveguideProfile, k: float) -> int:
    """``max(200, 40 slices per free wavelength along the cell)``, rounded up to even."""
    n = max(200, int(np.ceil(SLICES_PER_WAVELENGTH * profile.L * k / (2.0 * np.pi))))
    return n + (n % 2)


def default_evanescent(profile: WaveguideProfile, k: float) -> int:
    """Closed channels kept: 100 at ``k = 150 pi``, scaled down linearly, at least 20."""
    return max(20, int(np.ceil(100.0 * k / (150.0 * np.pi))))


def _slice_edges(profile: WaveguideProfile, n_slices: int) -> np.ndarray:
    return np.linspace(-0.5 * profile.L, 0.5 * profile.L, n_slices + 1)


def _staircase(profile, k, n_modes, edges, left_lead, right_lead):
    """Fold lead -> slices -> lead into a single S-matrix."""
    mids = 0.5 * (edges[:-1] + edges[1:])
    lengths = np.diff(edges)
    lo = profile.lower(mids)
    hi = profile.upper(mids)
    prev = left_lead
    prev_beta = longitudinal_wavenumbers(k, prev[1] - prev[0], n_modes)
    s = None
    for j in range(len(mids)):
        cur = (float(lo[j]), float(hi[j]))
        cur_beta = longitudinal_wavenumbers(k, cur[1] - cur[0], n_modes)
        jn = junction(prev, cur, prev_beta, cur_beta, n_modes)
        s = jn if s is None else star(s, jn)
        s = _propagate(s, np.exp(1j * cur_beta * lengths[j]))
        prev, prev_beta = cur, cur_beta
    right_beta = longitudinal_wavenumbers(k, right_lead[1] - right_lead[0], n_modes)
    jn = junction(prev, right_lead, prev_beta, right_beta, n_modes)
    return star(s, jn)


@lru_cache(maxsize=16)
def _ritz_generators(n_modes: int):
    """Constant matrices of the exact local-basis energy ``D = int dx(phi_m) dx(phi_n) dy``.

    With ``a = h1'`` and ``g = h2' - h1'``, ``h^2 D = a^2 Daa + a g Dag + g^2 Dgg``.
    Returned as the completeness defects ``D - A A^T`` split the same way.
    """
    nodes, weights = np.polynomial.legendre.leggauss(4 * n_modes + 64)
    eta = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    m = np.arange(1, n_modes + 1)[:, None]
    s = np.sqrt(2.0) * np.sin(m * np.pi * eta)
    c = np.sqrt(2.0) * np.cos(m * np.pi * eta)
    mc = m * np.pi * c
    # h^(3/2) dx(phi_m) = -(g/2) s_m - m pi (a + g eta) c_m
    grad_a = mc
    grad_g = 0.5 * s + eta * mc
    daa = (grad_a * w) @ grad_a.T
    dag = (grad_a * w) @ grad_g.T
    dag = dag + dag.T
    dgg = (grad_g * w) @ grad_g.T
    p, q = coupling_generators(n_modes)
    return daa - p @ p.T, dag - p @ q.T - q @ p.T, dgg - q @ q.T


def _coupled(profile, k, n_modes, edges):
    """Split-step integration of the truncated coupled-mode equations.

    ``c' = A c + d``, ``d' = A d - (K^2 - Delta) c`` with ``c``, ``d`` the
    projections of the field and of its x-derivative on the local modes and
    ``Delta`` the completeness defect of the truncated basis (Ritz form of the
    energy, which keeps the truncation error small).  Slices propagate exactly
    in the eigenbasis of the midpoint ``K^2 - Delta``; between slice midpoints
    the basis rotation ``exp(int A dx)`` acts as a junction (symmetric
    splitting, second order in the slice length).
    """
    p_gen, q_gen = coupling_generators(n_modes)
    e_aa, e_ag, e_gg = _ritz_generators(n_modes)
    n = np.arange(1, n_modes + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    lengths = np.diff(edges)
    # coupling intervals: [edge_0, mid_0], [mid_0, mid_1], ..., [mid_last, edge_last]
    stops = np.concatenate([[edges[0]], mids, [edges[-1]]])
    centres = 0.5 * (stops[:-1] + stops[1:])
    spans = np.diff(stops)

    def local(x):
        h = float(profile.upper(x) - profile.lower(x))
        a = float(profile.lower_slope(x))
        g = float(profile.upper_slope(x)) - a
        return h, a, g

    def generator(x):
        h, a, g = local(x)
        return (a / h) * p_gen + (g / h) * q_gen

    def straight(x):
        # ends and the half-cell interface always carry the plain sine basis
        return np.eye(n_modes), longitudinal_wavenumbers(k, local(x)[0], n_modes)

    def slice_modes(x):
        h, a, g = local(x)
        op = np.diag(k * k - (n * np.pi / h) ** 2) - (a * a * e_aa + a * g * e_ag + g * g * e_gg) / (h * h)
        lam, vec = np.linalg.eigh(-op)
        return vec, np.sqrt(-lam + 0j)

    u_prev, beta_prev = straight(edges[0])
    s = None
    for j in range(len(mids)):
        u, beta = slice_modes(mids[j])
        rot = u.T @ basis_rotation(generator(centres[j]) * spans[j]) @ u_prev
        jn = rotation_junction(rot, beta_prev, beta)
        s = jn if s is None else star(s, jn)
        s = _propagate(s, np.exp(1j * beta * lengths[j]))
        u_prev, beta_prev = u, beta
    u_end, beta_end = straight(edges[-1])
    rot = u_end.T @ basis_rotation(generator(centres[-1]) * spans[-1]) @ u_prev
    return star(s, rotation_junction(rot, beta_prev, beta_end))


METHODS = ("coupled", "staircase")


def _last_slice_interval(profile, edges):
    mid = 0.5 * (edges[-2] + edges[-1])
    return profile.interval(mid)


def half_cell_scattering(profile: WaveguideProfile, k: float, n_evan: int, n_slices: int,
                         method: str = "coupled", use_symmetry: bool = False):
    """Scattering of the halves ``[-L/2, 0]`` and ``[0, L/2]`` of one cell.

    Both halves use the same slice edges as the full cell, and the full-cell
    matrices are by construction ``star(left, right)``.  For the coupled
    scheme the interface basis is the sine basis of the cross-section at
    ``x = 0``; for the staircase it is the cross-section of the slice just
    left of ``x = 0``.  With ``use_symmetry`` (coupled scheme only) the right half is the mirror
    image of the left one, valid because every profile is even in ``x``.
    """
    if n_slices % 2:
        raise ValueError("n_slices must be even to split the cell")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    basis = build_basis(profile, k, n_evan)
    edges = _slice_edges(profile, n_slices)
    half = n_slices // 2
    left_edges, right_edges = edges[: half + 1], edges[half:]
    if method == "coupled":
        left = _coupled(profile, k, basis.size, left_edges)
        if use_symmetry:
            right = mirrored(left)
        else:
            right = _coupled(profile, k, basis.size, right_edges)
        return left, right
    lead = profile.lead_interval
    interface = _last_slice_interval(profile, left_edges)
    left = _staircase(profile, k, basis.size, left_edges, lead, interface)
    right = _staircase(profile, k, basis.size, right_edges, interface, lead)
    return left, right


def direct_cell_scattering(profile: WaveguideProfile, k: float, n_evan: int, n_slices: int,
                           method: str = "coupled") -> CellScattering:
    """Single pass through the whole cell, without the split at ``x = 0``.

    Reference for the half-cell cascade used by :func:`cell_scattering`.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    basis = build_basis(profile, k, n_evan)
    edges = _slice_edges(profile, n_slices)
    if method == "coupled":
        s = _coupled(profile, k, basis.size, edges)
    else:
        lead = profile.lead_interval
        s = _staircase(profile, k, basis.size, edges, lead, lead)
    return CellScattering(float(k), basis, *s, n_slices=n_slices)


def cell_scattering(profile: WaveguideProfile, k: float, n_evan: int | None = None,
                    n_slices: int | None = None, check: bool = True,
                    unitarity_tol: float = 1e-6, method: str = "coupled") -> CellScattering:
    """Near-field scattering blocks of one cell, amplitudes at ``x = -L/2`` and ``x = +L/2``.

    Parameters
    ----------
    profile : WaveguideProfile
    k : float
        Wavenumber; must not sit on a lead cutoff.
    n_evan, n_slices : int, optional
        Truncation; defaults from :func:`default_evanescent` and
        :func:`default_slices`.
    check : bool
        Verify far-field unitarity.
    method : {"coupled", "staircase"}
        Coupled local-mode equations (default) or piecewise-constant slices.

    Raises
    ------
    CutoffError
        If a lead channel is within ``CUTOFF_GUARD`` of its cutoff.
    ConvergenceError
        If the flux-normalised far-field block departs from unitarity by more
        than ``unitarity_tol`` (only when ``check``).
    """
    if n_evan is None:
        n_evan = default_evanescent(profile, k)
    if n_slices is None:
        n_slices = default_slices(profile, k)
    n_slices += n_slices % 2
    basis = build_basis(profile, k, n_evan)
    left, right = half_cell_scattering(profile, k, n_evan, n_slices, method=method,
                                       use_symmetry=(method == "coupled"))
    cs = CellScattering(float(k), basis, *star(left, right), n_slices=n_slices)
    if check:
        res = cs.unitarity_residual()
        if res > unitarity_tol:
            raise ConvergenceError(
                f"far-field unitarity residual {res:.3g} at k={k:.9g} "
                f"(n_evan={n_evan}, n_slices={n_slices}); increase the truncation"
            )
    return cs


class ScatteringCache:
    """On-disk cache of cell scattering blocks, one ``.npz`` per parameter set."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(profile: WaveguideProfile, k: float, n_evan: int, n_slices: int, method: str = "coupled") -> str:
        text = repr((profile.coefficients.tolist(), float(k).hex(), int(n_evan), int(n_slices), method))
        return hashlib.sha1(text.encode()).hexdigest()[:20]

    def path(self, profile, k, n_evan, n_slices, method="coupled") -> Path:
        return self.directory / f"{self.key(profile, k, n_evan, n_slices, method)}.npz"

    def load(self, profile, k, n_evan, n_slices, method="coupled") -> CellScattering | None:
        p = self.path(profile, k, n_evan, n_slices, method)
        if not p.exists():
            return None
        with np.load(p) as z:
            basis = build_basis(profile, k, n_evan)
            return CellScattering(float(k), basis, z["r"], z["t"], z["rp"], z["tp"], n_slices)

    def store(self, cs: CellScattering, profile, method="coupled") -> None:
        p = self.path(profile, cs.k, cs.basis.n_evan, cs.n_slices, method)
        tmp = p.with_name(p.stem + f".{os.getpid()}.tmp.npz")
        np.savez(tmp, r=cs.r, t=cs.t, rp=cs.rp, tp=cs.tp)
        os.replace(tmp, p)

    def get(self, profile, k, n_evan=None, n_slices=None, method="coupled", **kwargs) -> CellScattering:
        """Cached :func:`cell_scattering`; ``None`` truncations take the defaults."""
        if n_evan is None:
            n_evan = default_evanescent(profile, k)
        if n_slices is None:
            n_slices = default_slices(profile, k)
        n_slices += n_slices % 2
        cs = self.load(profile, k, n_evan, n_slices, method)
        if cs is None:
            cs = cell_scattering(profile, k, n_evan, n_slices, method=method, **kwargs)
            self.store(cs, profile, method)
        return cs
