import math

import numpy as np
import pytest
from scipy import integrate, stats

from ptgeo.errors import InvalidInputError
from ptgeo.likelihood import (NoiseHyper, SensorData, log_likelihood, log_likelihood_sensor,
                              marginal_logpdf)

from scenarios import synthetic_inversion

RESIDUALS = np.linspace(-5.0, 5.0, 101)


def quad_marginal(r, alpha, beta):
    """log of int N(r; 0, s2) IG(s2; alpha, beta) ds2, integrated over u = log s2."""
    # log N(r; 0, s2) + log IG(s2; alpha, beta) + log(ds2/du), written out term by term
    c = alpha * math.log(beta) - math.lgamma(alpha) - 0.5 * math.log(2 * math.pi)

    def f(u):
        return math.exp(c - (alpha + 0.5) * u - (beta + 0.5 * r * r) * math.exp(-u))
    mode = np.log(beta / (alpha + 1))
    peak = np.log(r * r + 2 * beta) - np.log(2 * alpha + 1)
    val, _ = integrate.quad(f, mode - 60, mode + 60, epsabs=0, epsrel=1e-12, limit=400,
                            points=[mode, peak])
    return np.log(val)


@pytest.mark.parametrize("alpha,beta", [(5.0, 0.5), (1.25, 1.0), (0.5, 0.05)])
def test_marginal_matches_quadrature(alpha, beta):
    got = marginal_logpdf(RESIDUALS, alpha, beta)
    want = np.array([quad_marginal(r, alpha, beta) for r in RESIDUALS])
    assert np.max(np.abs(got - want)) < 1e-6


def test_cauchy_limit_at_zero():
    # alpha = 0.5: Cauchy with scale sqrt(2 beta) = sqrt(0.1)
    got = marginal_logpdf(0.0, 0.5, 0.05)
    assert got == pytest.approx(np.log(1.0 / (np.pi * np.sqrt(0.1))), abs=1e-12)
    assert got == pytest.approx(quad_marginal(0.0, 0.5, 0.05), abs=1e-6)
    assert got == pytest.approx(stats.cauchy.logpdf(0.0, scale=np.sqrt(0.1)), abs=1e-12)


def test_gaussian_limit():
    sigma2 = 0.3
    a = 1e6
    got = marginal_logpdf(RESIDUALS[::10], a, a * sigma2)
    want = stats.norm.logpdf(RESIDUALS[::10], scale=np.sqrt(sigma2))
    assert np.max(np.abs(got - want)) < 1e-3


def test_student_t_scale():
    a, b = 2.5, 0.7
    got = marginal_logpdf(RESIDUALS, a, b)
    want = stats.t.logpdf(RESIDUALS, df=2 * a, scale=np.sqrt(b / a))
    assert np.allclose(got, want, atol=1e-12)


def test_monotone_and_tail_ordering():
    lp = marginal_logpdf(np.abs(RESIDUALS[50:]), 1.25, 1.0)
    assert np.all(np.diff(lp) < 0)
    # same beta/alpha, smaller alpha has heavier tails
    assert marginal_logpdf(20.0, 0.5, 0.05) > marginal_logpdf(20.0, 5.0, 0.5)


def test_sensor_terms_and_sum():
    data = SensorData([1.0, 2.0, 4.0, 3.0])
    h = NoiseHyper(0.5, 0.05)
    pred = np.array([1.1, 2.0, 3.5, 3.0])
    single = log_likelihood_sensor(pred, data, h)
    r = (pred - data.values) / data.values.std(ddof=1)
    assert single == pytest.approx(marginal_logpdf(r, 0.5, 0.05).sum())
    assert log_likelihood([pred], [data], [h]) == pytest.approx(single)
    assert log_likelihood([pred, pred], [data, data], [h, h]) == pytest.approx(2 * single)
    batch = log_likelihood_sensor(np.stack([pred, data.values]), data, h)
    assert batch.shape == (2,) and batch[1] > batch[0]
    with pytest.raises(InvalidInputError):
        log_likelihood_sensor(pred[:3], data, h)


def test_multichannel_scales():
    vals = np.column_stack([np.arange(5.0), 10 * np.arange(5.0)])
    data = SensorData(vals)
    assert np.allclose(data.scale, [np.std(np.arange(5.0), ddof=1), 10 * np.std(np.arange(5.0), ddof=1)])
    assert log_likelihood_sensor(vals[None], data, NoiseHyper()).shape == (1,)


def test_bad_hyperparameters():
    with pytest.raises(InvalidInputError):
        NoiseHyper(-1.0, 0.05)
    with pytest.raises(InvalidInputError):
        SensorData([])


def test_tempered_posterior():
    post, theta, _ = synthetic_inversion(voxel_res=(6, 6, 20))
    lp = float(post.log_prior(theta))
    ll = float(post.log_likelihood(theta)[0])
    assert post.tempered_log_post(theta, 0.0) == pytest.approx(lp)
    assert post.tempered_log_post(theta, 1.0) == pytest.approx(lp + ll)
    assert post.tempered_log_post(theta, 0.5) == pytest.approx(lp + 0.5 * ll)
    with pytest.raises(InvalidInputError):
        post.tempered_log_post(theta, 1.5)
