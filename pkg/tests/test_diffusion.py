import warnings

import numpy as np
import pytest

from bloch_chain.diffusion import (
    NonGaussianTransportWarning,
    batch_mean,
    diffusion_coefficient,
    displacement_moments,
    jackknife,
    normalized_displacement_histogram,
    transient_cut_from,
    velocity_autocorrelation,
)
from bloch_chain.dynamics import EnsembleRun, run_ensemble, sample_initial_conditions


def synthetic_run(x, vx, times, x0=None, vx0=None):
    n = x.shape[0]
    x0 = np.zeros(n) if x0 is None else x0
    vx0 = vx[:, 0] if vx0 is None else vx0
    z = np.zeros(n)
    return EnsembleRun(np.asarray(times, float), x0, vx0, x, vx, z, z, z)


def brownian(n, times, D=1.0, seed=0):
    rng = np.random.default_rng(seed)
    dt = np.diff(times, prepend=0.0)
    x = np.cumsum(rng.normal(size=(n, len(times))) * np.sqrt(D * dt), axis=1)
    vx = rng.normal(size=(n, len(times)))
    return synthetic_run(x, vx, times)


def test_batch_mean_and_jackknife_of_mean(rng):
    v = rng.normal(size=40_000)
    m, e = batch_mean(v, 20)
    assert m == pytest.approx(v.mean())
    assert e == pytest.approx(1 / np.sqrt(len(v)), rel=0.5)
    jm, je = jackknife(v, np.mean, 20)
    assert jm == pytest.approx(v.mean())
    # for the mean the delete-one-batch jackknife equals the batch-mean error
    assert je == pytest.approx(e, rel=1e-10)
    with pytest.raises(ValueError):
        batch_mean(v[:5], 20)


def test_brownian_recovers_diffusion_constant():
    times = np.arange(0.0, 101.0, 1.0)
    run = brownian(20_000, times, D=1.0)
    est = diffusion_coefficient(run, transient_cut=5.0)
    assert abs(est.D1 - 1.0) < 3 * est.D1_err
    assert abs(est.D1_first - 1.0) < 3 * est.D1_first_err
    assert abs(est.ratio - 1.0) < 3 * est.ratio_err
    assert est.n_times == 95


def test_ballistic_spreading_warns():
    times = np.linspace(0.0, 50.0, 51)
    rng = np.random.default_rng(1)
    v = np.cos(rng.uniform(0, 2 * np.pi, 5000))
    run = synthetic_run(v[:, None] * times, np.repeat(v[:, None], len(times), 1), times)
    with pytest.warns(NonGaussianTransportWarning):
        diffusion_coefficient(run, transient_cut=1.0)


def test_no_warning_for_gaussian():
    run = brownian(5000, np.arange(0.0, 51.0), seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("error", NonGaussianTransportWarning)
        diffusion_coefficient(run, transient_cut=2.0, agreement=4.0)


def test_transient_cut_too_late():
    run = brownian(100, np.arange(0.0, 5.0))
    with pytest.raises(ValueError, match="transient cut"):
        diffusion_coefficient(run, transient_cut=10.0)


def test_autocorrelation_flat_channel_constant():
    # straight channel: vx never changes, C(t) = <cos^2 phi> = 1/2
    rng = np.random.default_rng(2)
    v = np.cos(rng.uniform(0, 2 * np.pi, 50_000))
    times = np.linspace(0, 10, 11)
    run = synthetic_run(v[:, None] * times, np.repeat(v[:, None], 11, 1), times)
    ac = velocity_autocorrelation(run)
    assert np.allclose(ac.C, np.mean(v * v), atol=1e-15)
    assert abs(ac.C[0] - 0.5) < 4 * 0.5 / np.sqrt(len(v) / 2)
    assert ac.decay_time() == float("inf")
    assert ac.noise_floor == pytest.approx(1 / np.sqrt(50_000))


def test_transient_cut_is_ten_decay_times():
    times = np.array([0.0, 1.0, 2.0, 3.0])
    vx0 = np.ones(4)
    vx = np.array([[1, 0.5, 0.0, 0.0]] * 4)
    run = synthetic_run(np.zeros((4, 4)), vx, times, vx0=vx0)
    ac = velocity_autocorrelation(run, n_batches=2)
    assert ac.decay_time() == 2.0
    assert transient_cut_from(ac) == 20.0


def test_short_time_ballistic_moments(cosine03):
    ic = sample_initial_conditions(cosine03, 20_000, seed=4)
    run = run_ensemble(cosine03, ic, [0.0, 0.01])
    mom = displacement_moments(run)
    assert mom.m1[0] == 0.0 and mom.m2[0] == 0.0
    assert np.isnan(mom.D1_t[0])
    # <(vx t)^2> = t^2 / 2 until the first wall hit
    assert mom.m2[1] / 0.01**2 == pytest.approx(0.5, rel=0.02)
    ac = velocity_autocorrelation(run)
    assert ac.C[0] == pytest.approx(0.5, abs=4 * ac.stderr[0] + 1e-3)


def test_histogram_of_gaussian():
    times = np.array([0.0, 4.0])
    rng = np.random.default_rng(8)
    x = np.column_stack([np.zeros(100_000), rng.normal(0.0, np.sqrt(2 * 4.0), 100_000)])
    run = synthetic_run(x, np.zeros_like(x), times)
    h = normalized_displacement_histogram(run, bins=61)
    assert h.t == 4.0
    assert abs(h.variance - 2.0) < 3 * h.variance_err
    assert abs(h.skewness) < 3 * h.skewness_err
    assert h.ks_pvalue > 1e-3
    assert np.trapezoid(h.density, h.centers) == pytest.approx(1.0, abs=0.01)
    asym = normalized_displacement_histogram(run, bins=61, symmetric=False)
    assert abs(asym.mean) < 0.02


def test_csv_outputs(tmp_path):
    run = brownian(200, np.arange(0.0, 21.0))
    ac = velocity_autocorrelation(run)
    ac.to_csv(tmp_path / "ac.csv", header_lines=["version=x"])
    text = (tmp_path / "ac.csv").read_text().splitlines()
    assert text[0] == "# version=x" and text[1] == "t,C,C_err"
    data = np.loadtxt(tmp_path / "ac.csv", delimiter=",", skiprows=2)
    assert data.shape == (21, 3)
    displacement_moments(run).to_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "t,m1,m2,D1_t"
