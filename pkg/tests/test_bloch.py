import numpy as np
import pytest
from scipy import integrate

from bloch_chain.bloch import (
    AMBIGUOUS,
    AmbiguousSpectrumError,
    ModeCountSeries,
    SolverParams,
    assemble_pencil,
    bloch_spectrum,
    count_modes,
    make_k_grid,
    mode_flux,
    phase_velocity_signs,
    reciprocal_residual,
    solve_point,
    sweep,
)
from bloch_chain.geometry import cosine_profile, flat_profile
from bloch_chain.modal import build_basis, cell_scattering

FAST = SolverParams(n_evan=20, n_slices=200)


def test_pencil_structure(cosine03):
    cs = cell_scattering(cosine03, 2.5 * np.pi, 3, 200)
    m1, m2 = assemble_pencil(cs)
    n = cs.basis.size
    assert m1.shape == m2.shape == (2 * n, 2 * n)
    assert np.array_equal(m1[:n, n:], np.zeros((n, n)))
    assert np.array_equal(m1[n:, n:], np.eye(n))
    assert np.array_equal(m2[:n, :n], np.eye(n))
    assert np.array_equal(m2[n:, :n], np.zeros((n, n)))
    assert np.array_equal(m1[:n, :n], cs.t) and np.array_equal(m2[n:, n:], cs.tp)


def test_eigenvalues_are_roots_of_determinant(cosine03):
    # small pencil: interpolate det(M1 - lam M2) on the unit circle, compare its roots
    cs = cell_scattering(cosine03, 1.5 * np.pi, 1, 200)
    m1, m2 = assemble_pencil(cs)
    z = np.exp(2j * np.pi * np.arange(64) / 64)
    d = np.array([np.linalg.det(m1 - lam * m2) for lam in z])
    coef = np.fft.fft(d) / 64  # coef[j] multiplies lam^j
    coef = coef[: 2 * cs.basis.size + 1]
    # leading and trailing powers vanish for eigenvalues at infinity and zero
    keep = np.flatnonzero(np.abs(coef) > 1e-9 * np.abs(coef).max())
    roots = np.roots(coef[keep[0]: keep[-1] + 1][::-1])
    spec = bloch_spectrum(cs)
    assert len(roots) == len(spec.eigvals) == 4 - spec.n_degenerate
    assert len(roots) >= 2
    for lam in spec.eigvals:
        assert np.min(np.abs(roots - lam)) / abs(lam) < 1e-6
        # the determinant vanishes relative to its scale on a small circle around lam
        ring = lam + 1e-3 * abs(lam) * np.exp(2j * np.pi * np.arange(8) / 8)
        scale = np.median([abs(np.linalg.det(m1 - v * m2)) for v in ring])
        assert abs(np.linalg.det(m1 - lam * m2)) < 1e-6 * scale


def test_flat_channel_spectrum():
    f = flat_profile()
    k = 2.5 * np.pi
    spec = bloch_spectrum(cell_scattering(f, k, 4, 40))
    beta = build_basis(1.0, k, 4).beta
    prop = spec.propagating
    assert prop.size == 4
    expected = np.sort(np.concatenate([np.angle(np.exp(2j * beta[:2].real)),
                                       np.angle(np.exp(-2j * beta[:2].real))]))
    assert np.allclose(np.sort(spec.theta[prop]), expected, atol=1e-12)
    assert spec.n_positive == spec.n_negative == 2
    ev = spec.eigvals[spec.kind != "propagating"]
    mods = np.sort(np.abs(ev))
    kappa = beta[2:].imag
    finite = np.sort(np.concatenate([np.exp(-2 * kappa), np.exp(2 * kappa)]))
    assert np.allclose(mods, finite[(finite > 1e-8) & (finite < 1e8)], rtol=1e-8)
    assert count_modes(spec) == 2


def test_flat_count_is_open_channels():
    f = flat_profile()
    grid = make_k_grid(np.pi, 12 * np.pi, 0.37147 * np.pi)
    res = sweep(f, grid, FAST)
    assert np.array_equal(res.series.nb, np.floor(grid / np.pi).astype(int))
    assert not res.series.flagged.any()


def test_flux_formula_against_field_quadrature(rng):
    basis = build_basis(1.0, 2.3 * np.pi, 3)
    n = basis.size
    v = rng.normal(size=2 * n) + 1j * rng.normal(size=2 * n)
    beta = basis.beta

    def psi(x, y):
        modes = np.sqrt(2) * np.sin(np.arange(1, n + 1) * np.pi * y)
        amp = v[:n] * np.exp(1j * beta * x) + v[n:] * np.exp(-1j * beta * x)
        return np.sum(amp * modes)

    h = 1e-5

    def integrand(y):
        d = (psi(h, y) - psi(-h, y)) / (2 * h)
        return np.imag(np.conj(psi(0.0, y)) * d)

    ref, _ = integrate.quad(integrand, 0, 1, epsabs=1e-12, limit=200)
    assert mode_flux(basis, v) == pytest.approx(ref, rel=1e-7)


def test_time_reversed_partner(cosine03):
    cs = cell_scattering(cosine03, 5.3 * np.pi, 20, 300)
    spec = bloch_spectrum(cs)
    m1, m2 = assemble_pencil(cs)
    n, p = cs.basis.size, cs.basis.n_prop
    for i in spec.propagating:
        v = spec.vectors[:, i]
        ap, am = v[:n], v[n:]
        rev = np.concatenate([np.r_[np.conj(am[:p]), np.conj(ap[p:])],
                              np.r_[np.conj(ap[:p]), np.conj(am[p:])]])
        lam = np.conj(spec.eigvals[i])
        res = np.linalg.norm(m1 @ rev - lam * (m2 @ rev)) / np.linalg.norm(rev)
        assert res < 1e-9
        assert mode_flux(cs.basis, rev) == pytest.approx(-spec.flux[i], rel=1e-9)


@pytest.mark.parametrize("k", [4.48 * np.pi, 10.33 * np.pi, 14.83 * np.pi])
def test_flux_balance_and_reciprocal_symmetry(cosine03, k):
    cs = cell_scattering(cosine03, k)
    spec = bloch_spectrum(cs, symmetry_window=1e-4)
    assert spec.n_positive == spec.n_negative
    assert spec.symmetry_residual < 1e-8
    prop = spec.propagating
    assert np.max(np.abs(np.abs(spec.eigvals[prop]) - 1)) < 1e-10
    pos = np.sort(spec.theta[prop])
    assert np.allclose(pos, np.sort(-pos), atol=1e-8)


@pytest.mark.parametrize("k", [4.48 * np.pi, 10.33 * np.pi])
def test_flux_sign_matches_phase_velocity(cosine03, k):
    fs, ds = phase_velocity_signs(cosine03, k, params=FAST)
    assert fs.size > 0
    assert np.array_equal(fs, ds)


def test_first_band_opens_with_one_mode():
    p = cosine_profile(0.3)
    ks = np.linspace(1.02, 3.98, 60) * np.pi
    nb = [solve_point(p, k, FAST).nb for k in ks]
    first = int(np.flatnonzero(np.array(nb) > 0)[0])
    assert first > 0
    lo, hi = ks[first - 1], ks[first]
    while hi - lo > 1e-7:
        mid = 0.5 * (lo + hi)
        if solve_point(p, mid, FAST).nb > 0:
            hi = mid
        else:
            lo = mid
    pt = solve_point(p, hi, FAST)
    assert pt.nb == 1
    # a band opens at the center or the edge of the Brillouin zone
    assert np.min(np.abs(np.sin(pt.theta))) < 0.05


def test_count_independent_of_unimodular_tolerance(cosine03):
    for k in (6.1 * np.pi, 11.3 * np.pi):
        counts = {solve_point(cosine03, k, SolverParams(n_evan=20, n_slices=400, unimodular_tol=t)).nb
                  for t in (1e-5, 1e-6, 1e-7)}
        assert len(counts) == 1


def test_scaled_cell_has_same_count():
    p = cosine_profile(0.3)
    big = p.scaled(2.0)
    for k in (5.55 * np.pi, 9.87 * np.pi):
        a = solve_point(p, k, FAST)
        b = solve_point(big, k / 2, FAST)
        assert a.nb == b.nb
        assert np.allclose(np.sort(a.theta), np.sort(b.theta), atol=1e-8)


def test_reciprocal_residual():
    lam = np.array([2.0, 0.5, 1j, -1j, 3 + 1j, 1 / (3 + 1j)])
    assert reciprocal_residual(lam) < 1e-15
    assert reciprocal_residual(np.array([2.0, 0.4])) == pytest.approx(0.2)
    assert reciprocal_residual(np.array([])) == 0.0


def test_ambiguous_spectrum_refused(cosine03):
    spec = bloch_spectrum(cell_scattering(cosine03, 4.3 * np.pi, 10, 200))
    spec.flags.append(AMBIGUOUS)
    with pytest.raises(AmbiguousSpectrumError):
        count_modes(spec)
    assert count_modes(spec, allow_ambiguous=True) == spec.n_positive


def test_k_grid_avoids_cutoffs():
    g = make_k_grid(np.pi, 10 * np.pi, np.pi)
    assert len(g) == 10
    assert np.all(np.abs(g / np.pi - np.round(g / np.pi)) * np.pi > 1e-7)
    assert np.allclose(g, np.pi * np.arange(1, 11), atol=1e-5)
    with pytest.raises(ValueError):
        make_k_grid(2.0, 1.0, 0.1)


def test_series_csv_roundtrip(tmp_path):
    s = ModeCountSeries(np.array([1.0, 2.0, 3.0]), np.array([0, 1, 1]), 1.0,
                        [[], ["refined", "weak-flux"], []])
    s.to_csv(tmp_path / "nb.csv", header_lines=["version=0"])
    back = ModeCountSeries.from_csv(tmp_path / "nb.csv")
    assert np.array_equal(back.k, s.k) and np.array_equal(back.nb, s.nb)
    assert back.flags == s.flags and back.dk == 1.0
    assert list(back.flagged) == [False, True, False]
    with pytest.raises(ValueError):
        ModeCountSeries(np.array([1.0]), np.array([-1]), 1.0)


def test_parallel_sweep_matches_serial(cosine03):
    grid = make_k_grid(3 * np.pi, 6 * np.pi, 0.5 * np.pi)
    a = sweep(cosine03, grid, FAST, workers=1)
    b = sweep(cosine03, grid, FAST, workers=2)
    assert np.array_equal(a.series.nb, b.series.nb)
    rows_a = list(a.band_rows())
    rows_b = list(b.band_rows())
    assert rows_a == rows_b


def test_avoid_cutoffs():
    from bloch_chain.bloch import avoid_cutoffs

    g = np.array([2 * np.pi, 2.5 * np.pi, 20 * np.pi])
    out = avoid_cutoffs(g, 1.0, 1e-7)
    assert np.allclose(out, g + np.array([1e-7, 0.0, 1e-7]), rtol=0, atol=1e-12)
    assert out[1] == g[1]
