import numpy as np
import pytest

from bloch_chain.bloch import BandSlopes, ModeCountSeries
from bloch_chain.semiclassics import (
    G_MIRROR,
    SemiclassicalPrediction,
    band_slope_statistics,
    d1_from_slope,
    fit_sqrt_law,
    heisenberg_time,
    liouville_measure,
    mean_level_spacing,
    predict_nb,
    smooth,
    window_convergence,
    window_grid,
    windowed_average,
)


def series(k, nb):
    k = np.asarray(k, float)
    return ModeCountSeries(k, np.asarray(nb), float(k[1] - k[0]))


def test_level_spacing_examples():
    assert mean_level_spacing(1.3, 50 * np.pi) == pytest.approx(2 / 65)
    assert mean_level_spacing(1.3, 100 * np.pi) == pytest.approx(1 / 65)
    assert np.allclose(mean_level_spacing(2.0, np.array([1.0, 2.0])), [np.pi, np.pi / 2])
    with pytest.raises(ValueError):
        mean_level_spacing(1.0, 0.0)
    assert liouville_measure(1.3) == pytest.approx(2 * np.pi * 1.3)
    assert heisenberg_time(1.3, 10.0) == pytest.approx(13.0)


def test_level_spacing_counts_flat_cell_levels():
    # closed flat cell (width 1, length 2) with Bloch phase theta: k^2 = (n pi)^2 + ((theta + 2 pi m)/2)^2
    k0, dk = 50.37 * np.pi, 6.0  # off the transverse cutoffs n pi
    counts = []
    for theta in np.linspace(-np.pi, np.pi, 400, endpoint=False):
        n = np.arange(1, 60)[:, None]
        m = np.arange(-120, 121)[None, :]
        kk = np.sqrt((n * np.pi) ** 2 + ((theta + 2 * np.pi * m) / 2) ** 2)
        counts.append(np.sum((kk >= k0) & (kk < k0 + dk)))
    expected = dk / mean_level_spacing(2.0, k0 + dk / 2)
    assert np.mean(counts) == pytest.approx(expected, rel=0.02)


def test_smoothing_preserves_constants_and_mass():
    k = np.linspace(1, 100, 500)
    s = series(k, np.full(500, 3))
    for kernel in ("gaussian", "boxcar"):
        out = smooth(s, kernel, width=5.0)
        assert np.allclose(out.values, 3.0, atol=1e-13)
    rng = np.random.default_rng(0)
    noisy = series(k, rng.integers(0, 7, 500))
    for kernel in ("gaussian", "boxcar"):
        out = smooth(noisy, kernel, width=5.0, edges="reflect")
        assert out.values.mean() == pytest.approx(noisy.nb.mean(), abs=1e-12)


def test_boxcar_turns_step_into_ramp():
    k = np.arange(0.0, 200.0)
    nb = (k >= 100).astype(int)
    out = smooth(series(k + 1, nb), "boxcar", width=20.0)
    # 21-point window: ramp from 0 to 1 across [90, 110]
    assert out.values[89] == 0.0 and out.values[110] == pytest.approx(1.0)
    assert out.values[100] == pytest.approx(11 / 21)
    assert np.all(np.diff(out.values) >= -1e-15)


def test_boxcar_in_level_spacings():
    k = np.linspace(10, 20, 1001)
    out = smooth(series(k, (k > 15).astype(int)), "boxcar", width=10.0, A_c=1.0)
    # half width at k: 5 * 2 pi / k
    j = np.argmin(np.abs(k - 15 - 0.5 * 10 * 2 * np.pi / 15.0)) + 2
    assert out.values[j] == pytest.approx(1.0)
    assert out.A_c == 1.0


def test_smoothing_warns_on_coarse_grid():
    k = np.linspace(1, 10, 10)
    with pytest.warns(RuntimeWarning, match="samples"):
        smooth(series(k, np.ones(10, int)), "gaussian", width=1.0)
    with pytest.raises(ValueError):
        smooth(series(k, np.ones(10, int)), "triangle")


def test_windowed_average_plateau():
    A_c, kc = 1.3, 30 * np.pi
    k = window_grid(kc, 300, A_c, 153)
    assert k.size == 153
    assert k[-1] - k[0] == pytest.approx(300 * mean_level_spacing(A_c, kc))
    s = series(k, np.full(153, 4))
    mean, err, n = windowed_average(s, kc, 300, A_c)
    assert (mean, err, n) == (4.0, 0.0, 153)
    rows = window_convergence(s, kc, [100, 200, 300], A_c)
    assert rows.shape == (3, 4) and np.all(rows[:, 1] == 4.0)
    assert rows[0, 3] < rows[1, 3] < rows[2, 3]
    with pytest.raises(ValueError):
        windowed_average(s, kc + 100, 1, A_c)


def test_prediction_scaling():
    p = SemiclassicalPrediction(A_c=1.3, D1=0.45, L=2.0)
    q = SemiclassicalPrediction(A_c=1.3, D1=0.9, L=2.0)
    assert p.g == G_MIRROR == 2
    assert predict_nb(q, 100.0) / predict_nb(p, 100.0) == pytest.approx(np.sqrt(2))
    assert predict_nb(p, 400.0) / predict_nb(p, 100.0) == pytest.approx(2.0)
    assert p.slope == pytest.approx(np.sqrt(2 * 1.3 * 0.45 / (2 * np.pi)) / 2)
    assert d1_from_slope(p.slope, 1.3, 2.0) == pytest.approx(0.45)
    assert p.slope_variance(10.0) == pytest.approx(2 * 0.45 / 13)
    with pytest.raises(ValueError):
        predict_nb(SemiclassicalPrediction(1.3, 0.0, 2.0), 1.0)


def test_fit_recovers_exact_law():
    p = SemiclassicalPrediction(A_c=1.3, D1=0.45, L=2.0, c0=-0.3)
    k = np.linspace(np.pi, 40 * np.pi, 300)
    fit = fit_sqrt_law((k, predict_nb(p, k)), A_c=1.3, L=2.0)
    assert fit.a == pytest.approx(p.slope, rel=1e-10)
    assert fit.c0 == pytest.approx(-0.3, abs=1e-10)
    assert fit.D1_quantum == pytest.approx(0.45, rel=1e-10)
    assert fit.preferred == "sqrt"


def test_fit_with_noise_and_linear_law(rng):
    k = np.linspace(np.pi, 40 * np.pi, 2000)
    y = 0.2 * np.sqrt(k) + rng.normal(0, 0.05, k.size)
    fit = fit_sqrt_law((k, y), A_c=1.0, L=1.0)
    assert abs(fit.a - 0.2) < 4 * np.sqrt(fit.covariance[0, 0])
    lin = fit_sqrt_law((k, k / np.pi), A_c=1.0, L=1.0)
    assert lin.preferred == "linear"


def test_fit_refuses_bad_series():
    k = np.linspace(10, 30, 100)
    with pytest.raises(ValueError, match="factor 4"):
        fit_sqrt_law((k, np.sqrt(k)))
    k = np.linspace(1, 40, 100)
    with pytest.raises(ValueError, match="monotone"):
        fit_sqrt_law((k, np.cos(k / 8)))


def test_fit_csv(tmp_path):
    k = np.linspace(1, 40, 100)
    fit = fit_sqrt_law((k, np.sqrt(k)))
    fit.to_csv(tmp_path / "f.csv", extra=[("D1_classical", 0.45)])
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "quantity,value" and lines[-1].startswith("D1_classical,")


def test_slope_statistics_level_weighting_recovers_gaussian(rng):
    # crossings at fixed k sample |u| times the level density: Rayleigh |u| with random sign
    sigma = 0.07
    n = 40_000
    u = rng.rayleigh(sigma, n) * rng.choice([-1.0, 1.0], n)
    k = np.repeat(np.linspace(36 * np.pi, 40 * np.pi, 100), n // 100)
    # undo the window-centre rescaling so the scaled slopes are the drawn ones
    kc = 38 * np.pi
    slopes = BandSlopes(k, np.zeros(n), u * np.sqrt(kc / k), np.sign(u).astype(int), 0, 2.0)
    st = band_slope_statistics(slopes, D1=0.45, A_c=1.3, k_window=(36 * np.pi, 40 * np.pi))
    assert st.k_center == pytest.approx(kc)
    assert abs(st.variance - sigma**2) < 4 * st.variance_err
    assert abs(st.kurtosis - 3.0) < 4 * st.kurtosis_err
    assert st.prediction == pytest.approx(2 * 0.45 / (1.3 * kc))
    cr = band_slope_statistics(slopes, D1=0.45, A_c=1.3, weighting="crossing")
    assert cr.variance == pytest.approx(2 * sigma**2, rel=0.05)
    with pytest.raises(ValueError):
        band_slope_statistics(slopes, D1=0.45, A_c=1.3, weighting="other")
