import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import i0e

from estatics.rice import (LOGI0_SWITCH, RiceMixtureError, _i0_series, _log_i0_asymptotic,
                           fit_rice_mixture, log_i0, rice_logpdf, rice_sample)
from estatics.volume import EchoVolume


def test_rayleigh_case():
    assert rice_logpdf(1.0, 0.0, 1.0) == pytest.approx(-0.5, abs=1e-15)


def test_reference_values():
    # mpmath besseli at 30 digits
    assert rice_logpdf(3.0, 3.0, 1.0) == pytest.approx(-0.9041680747431369, abs=1e-12)
    assert rice_logpdf(1.0, 1.0, 1.0) == pytest.approx(-0.7640856414928214, abs=1e-12)


def test_high_snr_matches_gaussian():
    gauss = -0.5 * math.log(2 * math.pi)
    assert abs(rice_logpdf(100.0, 100.0, 1.0) - gauss) < 1e-3


def test_zero_observation_is_minus_infinity():
    assert rice_logpdf(0.0, 3.0, 1.0) == -np.inf
    out = rice_logpdf(np.array([0.0, 1.0]), 1.0, 1.0)
    assert out[0] == -np.inf and np.isfinite(out[1])


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        rice_logpdf(1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        rice_sample(np.ones(3), -1.0, 0)


def test_log_i0_against_scipy():
    z = np.concatenate([np.linspace(0, 30, 301), np.geomspace(30, 1e6, 50)])
    np.testing.assert_allclose(log_i0(z), np.log(i0e(z)) + z, rtol=1e-13, atol=1e-14)


def test_branches_agree_at_switch():
    z = LOGI0_SWITCH + np.linspace(-2, 2, 41)
    series = np.log(_i0_series(z))
    asym = _log_i0_asymptotic(z)
    assert np.max(np.abs(series - asym)) < 1e-10


@pytest.mark.parametrize("nu", [0.0, 1.0, 5.0, 100.0])
@pytest.mark.parametrize("sigma", [0.5, 1.0, 5.0])
def test_density_normalised(nu, sigma):
    lo, hi = max(0.0, nu - 40 * sigma), nu + 40 * sigma
    mass, _ = integrate.quad(lambda x: math.exp(rice_logpdf(x, nu, sigma)), lo, hi,
                             points=[nu] if nu > lo else None, limit=200, epsabs=1e-12)
    assert abs(mass - 1.0) < 1e-6


def test_sample_degenerate_sigma():
    x = rice_sample(np.full(1000, 50.0), 1e-12, 3)
    assert np.max(np.abs(x - 50.0)) < 1e-9


def test_sample_rayleigh_second_moment():
    x = rice_sample(np.zeros(10**6), 1.0, 11)
    assert np.mean(x * x) == pytest.approx(2.0, rel=0.01)


def test_sample_deterministic():
    nu = np.linspace(0, 10, 500)
    np.testing.assert_array_equal(rice_sample(nu, 2.0, 5), rice_sample(nu, 2.0, 5))
    assert not np.array_equal(rice_sample(nu, 2.0, 5), rice_sample(nu, 2.0, 6))


def _two_class(n=200_000, frac_bg=0.7, nu=100.0, sigma=5.0, seed=0):
    rng = np.random.default_rng(seed)
    levels = np.where(rng.random(n) < frac_bg, 0.0, nu)
    return rice_sample(levels, sigma, seed)


def test_mixture_recovers_sigma():
    fit = fit_rice_mixture(EchoVolume(1e-3, _two_class().reshape(200, 100, 10)))
    assert fit.sigma == pytest.approx(5.0, rel=0.05)
    assert fit.nu[0] < fit.nu[1]
    assert sum(fit.pi) == pytest.approx(1.0)
    assert fit.pi[0] == pytest.approx(0.7, abs=0.01)
    assert not fit.single_class


def test_pure_noise_volume():
    x = rice_sample(np.zeros(50_000), 3.0, 2)
    fit = fit_rice_mixture(x)
    oracle = math.sqrt(np.mean(x * x) / 2.0)
    assert fit.sigma == pytest.approx(3.0, rel=0.05)
    assert fit.sigma == pytest.approx(oracle, rel=1e-6)
    assert fit.pi[0] > 0.99


def test_em_loglik_non_decreasing():
    fit = fit_rice_mixture(_two_class(seed=4), tol=1e-12)
    trace = np.array(fit.trace)
    assert len(trace) > 2
    assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[1:]))


def test_constant_volume_is_degenerate():
    with pytest.raises(RiceMixtureError, match="sigma"):
        fit_rice_mixture(np.full(20_000, 7.0))


def test_too_few_voxels():
    with pytest.raises(ValueError, match="10000"):
        fit_rice_mixture(np.ones(100))


def test_multi_class_mixture():
    rng = np.random.default_rng(1)
    levels = rng.choice([0.0, 30.0, 70.0], p=[0.6, 0.15, 0.25], size=150_000)
    x = rice_sample(levels, 6.0, 1)
    assert fit_rice_mixture(x, n_classes=3).sigma == pytest.approx(6.0, rel=0.03)
