import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from ngfield.errors import InvalidParams, MomentUndefined, NonPositiveArgument
from ngfield.gig import GigParams, gig_expect_log, gig_logpdf, gig_moment, gig_sample, log_bessel_k


def oracle(p, a, b):
    """scipy's GIG with density proportional to x^(p-1) exp(-(a x + b / x) / 2)."""
    return stats.geninvgauss(p, math.sqrt(a * b), scale=math.sqrt(b / a))


def quad_expect(p, a, b, f):
    dens = oracle(p, a, b)
    lo, hi = dens.ppf(1e-14), dens.ppf(1 - 1e-14)
    pts = [dens.ppf(q) for q in (0.01, 0.1, 0.5, 0.9, 0.99)]
    val, _ = integrate.quad(lambda x: f(x) * dens.pdf(x), lo, hi, points=pts, limit=400, epsabs=1e-13, epsrel=1e-12)
    return val


def test_log_bessel_k_values():
    assert log_bessel_k(0.5, 2.0) == pytest.approx(0.5 * math.log(math.pi / 4) - 2, abs=1e-12)
    assert log_bessel_k(3, 5.0) == pytest.approx(log_bessel_k(-3, 5.0), abs=1e-14)
    assert log_bessel_k(0, 1.0) == pytest.approx(math.log(0.42102443824070834), abs=1e-12)
    # far tails stay finite
    assert np.isfinite(log_bessel_k(2.0, 1e4))
    assert np.isfinite(log_bessel_k(20.0, 1e-8))
    with pytest.raises(NonPositiveArgument):
        log_bessel_k(1.0, 0.0)


def test_logpdf_examples():
    assert gig_logpdf(GigParams(1, 2, 0), 1.0) == pytest.approx(-1.0, abs=1e-14)
    g = GigParams(-0.5, 2, 2)
    total, _ = integrate.quad(lambda x: math.exp(gig_logpdf(g, x)), 0, np.inf, epsabs=1e-12, epsrel=1e-12)
    assert total == pytest.approx(1.0, abs=1e-8)
    # reciprocal-Gamma branch against scipy
    assert gig_logpdf(GigParams(-2.0, 0.0, 3.0), 0.7) == pytest.approx(
        stats.invgamma(2.0, scale=1.5).logpdf(0.7), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-4, 4), st.floats(0.05, 10), st.floats(0.05, 10))
def test_logpdf_matches_scipy(p, a, b):
    x = np.array([1e-3, 0.3, 1.0, 4.0, 20.0])
    assert np.allclose(gig_logpdf(GigParams(p, a, b), x), oracle(p, a, b).logpdf(x), rtol=1e-9, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-4, 4), st.floats(0.05, 10), st.floats(0.05, 10))
def test_logpdf_finite_on_wide_range(p, a, b):
    x = np.logspace(-8, 8, 17)
    assert np.all(np.isfinite(gig_logpdf(GigParams(p, a, b), x)))


def test_moment_examples():
    assert gig_moment(GigParams(-0.5, 2, 2), 1) == pytest.approx(1.0, abs=1e-14)
    assert gig_moment(GigParams(2, 2, 0), 1) == pytest.approx(2.0, abs=1e-14)
    with pytest.raises(MomentUndefined):
        gig_moment(GigParams(2, 2, 0), -2)
    with pytest.raises(MomentUndefined):
        gig_moment(GigParams(-1, 0, 2), 1)


def test_expect_log_examples():
    assert gig_expect_log(GigParams(1, 2, 0)) == pytest.approx(-0.5772156649015329, abs=1e-12)
    ref = quad_expect(-0.5, 2, 2, math.log)
    assert gig_expect_log(GigParams(-0.5, 2, 2)) == pytest.approx(ref, abs=1e-6)
    g = GigParams([-0.5, 0.3, 2.5], [2, 1, 4], [2, 0.4, 3])
    assert np.allclose(gig_expect_log(g, 1e-5), gig_expect_log(g, 1e-6), atol=1e-6)


def test_invalid_params():
    with pytest.raises(InvalidParams):
        gig_moment(GigParams(1, -1, 1), 1)
    with pytest.raises(InvalidParams):
        gig_sample(GigParams(-1, 1, 0), np.random.default_rng(0))
    assert not GigParams(0, 1, 0).valid()


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 20), st.floats(0.01, 20))
def test_moments_match_quadrature(p, a, b):
    g = GigParams(p, a, b)
    for lam in (1, 2):
        ref = float(oracle(p, a, b).moment(lam))
        assert gig_moment(g, lam) == pytest.approx(ref, rel=1e-8)


def test_gamma_sample_mean():
    x = gig_sample(GigParams(2.0, 2.0, 0.0), np.random.default_rng(1), size=10**6)
    se = math.sqrt(2.0 / 10**6)
    assert abs(x.mean() - 2.0) < 3 * se


def test_inverse_gaussian_sample_mean():
    x = gig_sample(GigParams(-0.5, 2.0, 2.0), np.random.default_rng(2), size=10**6)
    se = math.sqrt(float(gig_moment(GigParams(-0.5, 2, 2), 2)) - 1.0) / 1000.0
    assert abs(x.mean() - 1.0) < 3 * se


def test_sample_seed_replay():
    g = GigParams([0.3, -1.0, 2.0], [1.0, 2.0, 0.5], [0.2, 1.0, 4.0])
    a = gig_sample(g, np.random.default_rng(11))
    b = gig_sample(g, np.random.default_rng(11))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("p,a,b", [
    (0.1, 0.01, 0.01),   # small omega, three-piece hat
    (0.8, 0.2, 0.3),     # ratio of uniforms without shift
    (3.5, 2.0, 1.5),     # ratio of uniforms with shift
    (-2.5, 1.0, 6.0),
    (-0.5, 3.0, 0.7),    # inverse Gaussian
    (1.7, 2.0, 0.0),     # Gamma
    (-1.3, 0.0, 2.0),    # reciprocal Gamma
])
def test_sampler_ks(p, a, b):
    x = gig_sample(GigParams(p, a, b), np.random.default_rng(5), size=20000)
    if b == 0:
        ref = stats.gamma(p, scale=2.0 / a)
    elif a == 0:
        ref = stats.invgamma(-p, scale=b / 2.0)
    else:
        ref = oracle(p, a, b)
    assert stats.kstest(x, ref.cdf).pvalue > 1e-3
    assert np.all(x > 0)


def test_vectorized_sampling_shape():
    g = GigParams(np.linspace(-2, 2, 12).reshape(3, 4), 1.0, 1.0)
    assert gig_sample(g, np.random.default_rng(0)).shape == (3, 4)
