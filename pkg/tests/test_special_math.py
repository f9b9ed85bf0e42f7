import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, special, stats

from dirl.errors import BoundsOverflowError, DimensionError, DomainError
from dirl.special_math import (
    Concentration,
    ConcentrationBounds,
    check_dimension_bounds,
    digamma,
    dirichlet_log_pdf,
    dirichlet_log_sample,
    dirichlet_moments,
    dirichlet_sample,
    expected_log_weight,
    expected_log_weights,
    expected_w_log_w,
    log_gamma,
    log_multivariate_beta,
)

EULER = 0.5772156649015329


# digamma

@pytest.mark.parametrize("x, expected", [
    (1.0, -EULER),
    (2.0, 1.0 - EULER),
    (0.5, -EULER - 2.0 * math.log(2.0)),
])
def test_digamma_known_values(x, expected):
    assert digamma(x) == pytest.approx(expected, abs=1e-12)


def test_digamma_matches_mpmath_across_range():
    xs = np.logspace(-3, 6, 400)
    ref = np.array([float(mpmath.digamma(mpmath.mpf(float(x)))) for x in xs])
    assert np.max(np.abs(digamma(xs) - ref)) < 1e-12


def test_digamma_recurrence_on_grid():
    x = np.linspace(0.01, 100.0, 5001)
    assert np.max(np.abs(digamma(x + 1.0) - digamma(x) - 1.0 / x)) < 1e-12


@given(st.floats(min_value=0.01, max_value=100.0))
def test_digamma_recurrence_property(x):
    assert abs(digamma(x + 1.0) - digamma(x) - 1.0 / x) < 1e-12


def test_digamma_vectorized_shape():
    out = digamma(np.array([[0.5, 1.0], [2.0, 7.5]]))
    assert out.shape == (2, 2)
    np.testing.assert_allclose(out, special.digamma([[0.5, 1.0], [2.0, 7.5]]), atol=1e-12)


@pytest.mark.parametrize("bad", [0.0, -1.0, math.nan])
def test_digamma_rejects_nonpositive(bad):
    with pytest.raises(DomainError):
        digamma(bad)


def test_log_gamma_wrapper():
    assert log_gamma(5.0) == pytest.approx(math.log(24.0), abs=1e-14)


# concentration containers

def test_concentration_sigma_is_sum():
    c = Concentration(np.array([0.3, 0.9, 1.4]))
    assert c.sigma == pytest.approx(2.6, abs=1e-15)
    assert c.n == 3 and len(c) == 3


@pytest.mark.parametrize("a", [[1.0, 0.0], [1.0, -0.5], [math.inf, 1.0]])
def test_concentration_rejects_nonpositive(a):
    with pytest.raises(DomainError):
        Concentration(np.array(a))


def test_concentration_rejects_inconsistent_sigma():
    with pytest.raises(DomainError):
        Concentration(np.array([1.0, 1.0]), sigma=3.0)


def test_concentration_rejects_matrix():
    with pytest.raises(DimensionError):
        Concentration(np.ones((2, 2)))


def test_bounds_validation():
    with pytest.raises(DomainError):
        ConcentrationBounds(a_minus=1.0, a_plus=0.5)
    with pytest.raises(DomainError):
        ConcentrationBounds(a_minus=0.0, a_plus=0.5)


# log multivariate beta

@pytest.mark.parametrize("a, expected", [
    ([1.0, 1.0, 1.0], -math.log(2.0)),
    ([1.0, 1.0], 0.0),
    ([0.5, 0.5], math.log(math.pi)),
])
def test_log_multivariate_beta_examples(a, expected):
    assert log_multivariate_beta(a) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("a", [[0.5, 1.2], [1.6, 0.3], [2.0, 2.0]])
def test_log_beta_matches_quadrature_two_components(a):
    integrand = lambda u: u ** (a[0] - 1.0) * (1.0 - u) ** (a[1] - 1.0)
    value, _ = integrate.quad(integrand, 0.0, 1.0, limit=200)
    assert math.exp(log_multivariate_beta(a)) == pytest.approx(value, rel=1e-3)


def test_log_beta_matches_quadrature_three_components():
    a = np.array([0.5, 1.2, 0.8])
    # substitute u = s**2, v = t**2 to remove the integrable edge singularities
    def integrand(t, s):
        u, v = s * s, t * t
        if u + v >= 1.0:
            return 0.0
        jac = 4.0 * s * t
        return jac * u ** (a[0] - 1) * v ** (a[1] - 1) * (1.0 - u - v) ** (a[2] - 1)
    value, _ = integrate.dblquad(integrand, 0.0, 1.0, 0.0, lambda s: math.sqrt(1.0 - s * s), epsabs=1e-10)
    assert math.exp(log_multivariate_beta(a)) == pytest.approx(value, rel=1e-3)


def test_log_beta_bounds_overflow():
    bounds = ConcentrationBounds(a_minus=0.5, a_plus=1.6)
    with pytest.raises(BoundsOverflowError):
        log_multivariate_beta(np.full(100, 1.0), bounds)
    assert log_multivariate_beta([1.0, 1.0], bounds) == 0.0


# sampling

def test_samples_lie_on_simplex(rng):
    w = dirichlet_sample([0.2, 0.5, 1.6, 0.9], rng, size=5000)
    assert np.all(w > 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_tiny_concentrations_are_clamped_positive(rng):
    w = dirichlet_sample(np.full(100, 0.01), rng, size=200)
    assert w.min() >= 1e-12 * (1 - 1e-9)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(np.log(w)))


def test_log_sample_is_normalized_in_log_space(rng):
    lw = dirichlet_log_sample(np.full(50, 0.05), rng, size=100)
    np.testing.assert_allclose(special.logsumexp(lw, axis=1), 0.0, atol=1e-12)
    assert np.all(np.isfinite(lw))


def test_sampler_is_seeded():
    a = [0.3, 0.9, 1.4]
    w1 = dirichlet_sample(a, np.random.default_rng(7), size=10)
    w2 = dirichlet_sample(a, np.random.default_rng(7), size=10)
    assert np.array_equal(w1, w2)
    assert dirichlet_sample(a, np.random.default_rng(7)).shape == (3,)


def test_uniform_segment(rng):
    w = dirichlet_sample([1.0, 1.0], rng, size=20_000)
    assert stats.kstest(w[:, 0], "uniform").pvalue > 1e-3


def test_marginals_are_beta(rng):
    a = np.array([0.3, 0.9, 1.4])
    w = dirichlet_sample(a, rng, size=20_000)
    for n in range(3):
        p = stats.kstest(w[:, n], stats.beta(a[n], a.sum() - a[n]).cdf).pvalue
        assert p > 1e-3


def _assert_moments(a, w, n_se=3.0):
    mean, var = dirichlet_moments(a)
    n = w.shape[0]
    se_mean = np.sqrt(var / n)
    assert np.all(np.abs(w.mean(axis=0) - mean) <= n_se * se_mean)
    centered = (w - mean) ** 2
    se_var = centered.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(centered.mean(axis=0) - var) <= n_se * se_var)


def test_symmetric_mean(rng):
    w = dirichlet_sample(np.ones(5), rng, size=1_000_000)
    mean, var = dirichlet_moments(np.ones(5))
    np.testing.assert_allclose(mean, 0.2)
    assert np.all(np.abs(w.mean(axis=0) - 0.2) <= 3 * np.sqrt(var / w.shape[0]))


def test_moments_three_components(rng):
    _assert_moments(np.array([0.3, 0.9, 1.4]), dirichlet_sample([0.3, 0.9, 1.4], rng, size=1_000_000))


def test_moment_formulas():
    mean, var = dirichlet_moments([1.0, 3.0])
    np.testing.assert_allclose(mean, [0.25, 0.75])
    np.testing.assert_allclose(var, [0.25 * 0.75 / 5.0] * 2)


# log density

def test_log_pdf_flat():
    assert dirichlet_log_pdf([0.2, 0.3, 0.5], [1, 1, 1]) == pytest.approx(math.log(2.0), abs=1e-12)


def test_log_pdf_beta22():
    assert dirichlet_log_pdf([0.5, 0.5], [2, 2]) == pytest.approx(math.log(1.5), abs=1e-12)


def test_log_pdf_integrates_to_one():
    a = np.array([0.5, 1.2, 0.8])

    def integrand(t, s):
        u, v = s * s, t * t
        if u + v >= 1.0:
            return 0.0
        return 4.0 * s * t * math.exp(dirichlet_log_pdf([u, v, 1.0 - u - v], a))
    value, _ = integrate.dblquad(integrand, 0.0, 1.0, 0.0, lambda s: math.sqrt(1.0 - s * s), epsabs=1e-10)
    assert value == pytest.approx(1.0, abs=1e-3)


def test_log_pdf_matches_scipy(rng):
    a = np.array([0.4, 1.1, 1.6, 0.7])
    w = dirichlet_sample(a, rng, size=20)
    ours = dirichlet_log_pdf(w, a)
    ref = np.array([stats.dirichlet.logpdf(x, a) for x in w])
    np.testing.assert_allclose(ours, ref, rtol=1e-10)


def test_log_pdf_errors():
    with pytest.raises(DomainError):
        dirichlet_log_pdf([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(DomainError):
        dirichlet_log_pdf([0.4, 0.4], [1.0, 1.0])
    with pytest.raises(DimensionError):
        dirichlet_log_pdf([0.5, 0.5], [1.0, 1.0, 1.0])


@given(st.integers(min_value=2, max_value=108), st.integers(min_value=0, max_value=2**32 - 1))
def test_log_pdf_finite_within_bounds(n, seed):
    bounds = ConcentrationBounds(a_minus=0.5, a_plus=1.6)
    assert check_dimension_bounds(bounds, n).ok
    r = np.random.default_rng(seed)
    a = r.uniform(bounds.a_minus, bounds.a_plus, n)
    assert np.isfinite(dirichlet_log_pdf(dirichlet_sample(a, r), a))


# log moments

def test_expected_log_weight_uniform():
    assert expected_log_weight([1.0, 1.0], 0) == pytest.approx(-1.0, abs=1e-12)


def test_expected_log_weight_beta22_quadrature():
    value, _ = integrate.quad(lambda u: math.log(u) * 6.0 * u * (1.0 - u), 0.0, 1.0)
    assert value == pytest.approx(-5.0 / 6.0, abs=1e-12)
    assert expected_log_weight([2.0, 2.0], 0) == pytest.approx(value, abs=1e-12)


def test_expected_log_weight_monte_carlo(rng):
    a = [0.5, 1.5]
    exact = expected_log_weight(a, 0)
    assert exact == pytest.approx(-2.3862944, abs=1e-7)
    lw = dirichlet_log_sample(a, rng, size=1_000_000)[:, 0]
    assert abs(lw.mean() - exact) <= 3 * lw.std(ddof=1) / math.sqrt(lw.size)


def test_expected_log_weights_vector():
    a = np.array([0.3, 0.9, 1.4])
    np.testing.assert_allclose(expected_log_weights(a), [expected_log_weight(a, n) for n in range(3)])


def test_expected_w_log_w_uniform():
    assert expected_w_log_w([1.0, 1.0], 0, 0) == pytest.approx(-0.25, abs=1e-12)
    value, _ = integrate.quad(lambda u: u * math.log(1.0 - u), 0.0, 1.0)
    assert expected_w_log_w([1.0, 1.0], 0, 1) == pytest.approx(value, abs=1e-12)
    assert value == pytest.approx(-0.75, abs=1e-12)


def test_expected_w_log_w_monte_carlo(rng):
    a = [0.4, 0.8, 0.8]
    lw = dirichlet_log_sample(a, rng, size=1_000_000)
    for n, m in [(0, 1), (1, 1), (2, 0)]:
        x = np.exp(lw[:, n]) * lw[:, m]
        assert abs(x.mean() - expected_w_log_w(a, n, m)) <= 3 * x.std(ddof=1) / math.sqrt(x.size)


def test_index_out_of_range():
    with pytest.raises(IndexError):
        expected_log_weight([1.0, 1.0], 2)
    with pytest.raises(IndexError):
        expected_w_log_w([1.0, 1.0], 0, -1)


# dimension bounds

def test_dimension_bound_examples():
    diag = check_dimension_bounds(ConcentrationBounds(a_minus=0.9, a_plus=1.6), 100)
    assert diag.n_max == math.floor(800.0 / (1.6 * math.log(100.0))) == 108
    assert diag.a_minus_min == pytest.approx(math.exp(-1.0), abs=1e-15)
    assert check_dimension_bounds(ConcentrationBounds(a_minus=0.5, a_plus=1.6), 100).ok


def test_dimension_bound_violations_are_reported():
    diag = check_dimension_bounds(ConcentrationBounds(a_minus=0.02, a_plus=1.6), 100)
    assert not diag.ok
    assert len(diag.reasons) == 1 and "a_minus" in diag.reasons[0]
    diag = check_dimension_bounds(ConcentrationBounds(a_minus=0.5, a_plus=1.6), 200)
    assert not diag.ok and len(diag.reasons) == 2


def test_dimension_bound_needs_two_assets():
    with pytest.raises(DomainError):
        check_dimension_bounds(ConcentrationBounds(0.5, 1.6), 1)
