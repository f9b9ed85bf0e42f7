import math

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special

from dirl import policy, special_math
from dirl.errors import (
    BoundaryError,
    DimensionError,
    InfeasibleParametersError,
    InfeasibleSetError,
    InvalidConfigError,
)
from dirl.market import FeaturePanel
from dirl.policy import (
    DEFAULT_BOUNDS,
    ConcentrationWarning,
    PolicyParams,
    concentration_from_features,
    feasibility_violation,
    mean_weights,
    project_feasible,
    score_gradient,
)
from dirl.special_math import ConcentrationBounds, dirichlet_log_pdf, dirichlet_sample
from dirl.verify import centered_panel, gradient_errors

X2 = np.array([[1.0, 0.25], [1.0, -0.25]])


def test_params_validation():
    with pytest.raises(InvalidConfigError):
        PolicyParams([1.0], form="F3")
    with pytest.raises(InvalidConfigError):
        PolicyParams([math.nan])
    p = PolicyParams([1.0, 0.4], form="f2")
    assert p.form == "F2" and p.k == 1
    assert np.array_equal(p.with_theta([2.0, 0.0]).theta, [2.0, 0.0])


def test_concentration_constant_column():
    conc = concentration_from_features(np.ones((2, 1)), PolicyParams([1.0]))
    np.testing.assert_array_equal(conc.a, [1.0, 1.0])
    assert conc.sigma == 2.0


def test_concentration_linear_and_exponential():
    np.testing.assert_allclose(concentration_from_features(X2, PolicyParams([1.0, 0.4])).a, [1.1, 0.9])
    with pytest.warns(ConcentrationWarning):
        a = concentration_from_features(X2, PolicyParams([1.0, 0.4], form="F2")).a
    np.testing.assert_allclose(a, np.exp([1.1, 0.9]))
    np.testing.assert_allclose(a, [3.0042, 2.4596], atol=1e-4)


def test_concentration_accepts_feature_panel():
    panel = FeaturePanel("2001-01", X2, ("a", "b"))
    np.testing.assert_allclose(concentration_from_features(panel, PolicyParams([1.0, 0.4])).a, [1.1, 0.9])


def test_f2_out_of_bounds_warns():
    with pytest.warns(ConcentrationWarning):
        concentration_from_features(X2, PolicyParams([1.0, 0.4], form="F2"))


def test_f1_nonpositive_concentration_raises():
    with pytest.raises(InfeasibleParametersError):
        concentration_from_features(X2, PolicyParams([0.1, 1.0]))


def test_shape_errors():
    with pytest.raises(DimensionError):
        concentration_from_features(X2, PolicyParams([1.0]))
    with pytest.raises(DimensionError):
        concentration_from_features(np.array([[2.0, 0.1], [1.0, 0.0]]), PolicyParams([1.0, 0.0]))


# mean weights

@pytest.mark.parametrize("c", [0.3, 1.0, 1.5])
def test_constant_theta_gives_equal_weights(rng, c):
    X = centered_panel(50, 3, rng)
    alloc = mean_weights(X, PolicyParams([c, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(alloc.w_bar, 1 / 50, rtol=1e-14)
    np.testing.assert_allclose(alloc.tilde_w, 0.0, atol=1e-15)


def test_two_asset_decomposition():
    alloc = mean_weights(X2, PolicyParams([1.0, 0.4]))
    np.testing.assert_allclose(alloc.w_bar, [0.55, 0.45], atol=1e-15)
    np.testing.assert_allclose(alloc.tilde_w, [0.05, -0.05], atol=1e-15)
    np.testing.assert_allclose(alloc.approx_tilde_w, alloc.tilde_w, atol=1e-15)


def test_f1_decomposition_exact_on_centered_panels(rng):
    X = centered_panel(100, 3, rng)
    params = PolicyParams([1.0, 0.3, -0.2, 0.1])
    conc = concentration_from_features(X, params)
    assert conc.sigma == pytest.approx(100 * params.theta[0], rel=1e-14)
    alloc = mean_weights(X, params)
    np.testing.assert_allclose(alloc.w_bar, 1 / 100 + alloc.tilde_w, atol=1e-15)
    assert abs(alloc.tilde_w.sum()) < 1e-12
    assert alloc.approximation_error < 1e-15
    assert np.all(np.abs(alloc.approx_tilde_w) <= alloc.tilt_bound + 1e-15)


def test_f2_approximation_error_is_second_order(rng):
    X = centered_panel(40, 2, rng)
    direction = np.array([0.7, -0.3])
    errs = []
    scales = [1e-1, 1e-2, 1e-3]
    for s in scales:
        theta = np.concatenate([[0.0], s * direction / np.abs(direction).sum()])
        errs.append(mean_weights(X, PolicyParams(theta, form="F2")).approximation_error)
    slope = np.polyfit(np.log(scales), np.log(errs), 1)[0]
    # the first-order tilt is exact up to a quadratic remainder, so errors shrink at least linearly
    assert slope > 1.0
    w = mean_weights(X, PolicyParams([0.0, 1e-6, 0.0], form="F2")).w_bar
    np.testing.assert_allclose(w, 1 / 40, atol=1e-7)


# score function

def test_score_constant_panel_example():
    g = score_gradient([0.5, 0.5], np.ones((2, 1)), PolicyParams([1.0]))
    expected = 2 * special.digamma(2.0) - 2 * special.digamma(1.0) + math.log(0.25)
    assert g.shape == (1,)
    assert g[0] == pytest.approx(expected, abs=1e-12)
    assert g[0] == pytest.approx(0.6137056, abs=1e-7)
    h = 1e-6
    fd = (dirichlet_log_pdf([0.5, 0.5], [1 + h, 1 + h]) - dirichlet_log_pdf([0.5, 0.5], [1 - h, 1 - h])) / (2 * h)
    assert g[0] == pytest.approx(fd, rel=1e-6)


def _fd(w, X, params, h=1e-6):
    out = np.empty(params.theta.size)
    for k in range(out.size):
        e = np.zeros_like(params.theta)
        e[k] = h
        up = concentration_from_features(X, params.with_theta(params.theta + e)).a
        dn = concentration_from_features(X, params.with_theta(params.theta - e)).a
        out[k] = (dirichlet_log_pdf(w, up) - dirichlet_log_pdf(w, dn)) / (2 * h)
    return out


def test_score_f2_matches_finite_differences(rng):
    X = np.hstack([np.ones((3, 1)), rng.uniform(-0.5, 0.5, (3, 2))])
    params = PolicyParams(rng.normal(0, 0.3, 3), form="F2")
    w = rng.dirichlet(np.ones(3))
    g = score_gradient(w, X, params)
    np.testing.assert_allclose(g, _fd(w, X, params), rtol=1e-5)


def test_score_random_cases_both_forms():
    n_bad, worst = gradient_errors(40, np.random.default_rng(99))
    assert n_bad == 0, worst


def test_score_batch_matches_single(rng):
    X = centered_panel(6, 2, rng)
    params = PolicyParams([1.0, 0.4, -0.3])
    W = dirichlet_sample(concentration_from_features(X, params), rng, size=4)
    batch = score_gradient(W, X, params)
    assert batch.shape == (4, 3)
    for b in range(4):
        np.testing.assert_allclose(batch[b], score_gradient(W[b], X, params), rtol=1e-14)


def test_score_has_zero_mean(rng):
    X = centered_panel(8, 2, rng)
    params = PolicyParams([0.9, 0.5, -0.4])
    conc = concentration_from_features(X, params)
    lw = special_math.dirichlet_log_sample(conc, rng, size=200_000)
    g = score_gradient(np.exp(lw), X, params)
    se = g.std(axis=0, ddof=1) / math.sqrt(g.shape[0])
    assert np.all(np.abs(g.mean(axis=0)) <= 3 * se)


def test_centered_log_weight_identity(rng):
    a = rng.uniform(0.2, 1.6, 10)
    w = rng.dirichlet(a)
    s = a.sum()
    for n in range(10):
        lhs = special_math.digamma(s) - special_math.digamma(a[n]) + math.log(w[n])
        rhs = math.log(w[n]) - special_math.expected_log_weight(a, n)
        assert abs(lhs - rhs) < 1e-12


def test_score_rejects_boundary_points():
    with pytest.raises(BoundaryError):
        score_gradient([1.0, 0.0], np.ones((2, 1)), PolicyParams([1.0]))
    with pytest.raises(DimensionError):
        score_gradient([0.2, 0.3, 0.5], np.ones((2, 1)), PolicyParams([1.0]))


def test_faulty_digamma_is_caught_by_fd_check(monkeypatch):
    monkeypatch.setattr(special_math, "digamma", lambda x: special.digamma(x) + 1e-3 * np.asarray(x))
    n_bad, _ = gradient_errors(10, np.random.default_rng(1))
    assert n_bad > 0


# projection

def _qp_oracle(theta_star, X, bounds):
    th = cp.Variable(theta_star.size)
    prob = cp.Problem(cp.Minimize(cp.sum_squares(th - theta_star)),
                      [X @ th >= bounds.a_minus, X @ th <= bounds.a_plus])
    prob.solve(solver=cp.CLARABEL)
    return th.value


def test_feasible_input_unchanged(rng):
    X = centered_panel(20, 2, rng)
    theta = np.array([1.0, 0.2, -0.1])
    assert feasibility_violation(theta, X, DEFAULT_BOUNDS) == 0.0
    np.testing.assert_array_equal(project_feasible(theta, X), theta)


def test_one_dimensional_clamp():
    np.testing.assert_allclose(project_feasible([2.0], np.ones((2, 1))), [1.6], atol=1e-12)
    np.testing.assert_allclose(project_feasible([0.0], np.ones((2, 1))), [0.2], atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_projection_matches_qp_oracle(seed):
    r = np.random.default_rng(seed)
    X = np.hstack([np.ones((3, 1)), r.uniform(-0.5, 0.5, (3, 1))])
    theta_star = r.normal([1.0, 0.0], [1.0, 4.0])
    ours = project_feasible(theta_star, X)
    np.testing.assert_allclose(ours, _qp_oracle(theta_star, X, DEFAULT_BOUNDS), atol=1e-6)


def test_projection_methods_agree_on_larger_panel(rng):
    X = centered_panel(60, 3, rng)
    theta_star = np.array([1.8, 3.0, -2.0, 1.0])
    a = project_feasible(theta_star, X, method="active_set")
    d = project_feasible(theta_star, X, method="dykstra")
    np.testing.assert_allclose(a, d, atol=1e-6)
    np.testing.assert_allclose(a, _qp_oracle(theta_star, X, DEFAULT_BOUNDS), atol=1e-6)


def test_projection_accepts_stacked_duplicates(rng):
    X = centered_panel(10, 1, rng)
    theta_star = np.array([1.0, 5.0])
    np.testing.assert_allclose(project_feasible(theta_star, np.vstack([X, X, X])),
                               project_feasible(theta_star, X), atol=1e-12)


def test_projection_errors():
    X = np.array([[1.0], [-1.0]])
    with pytest.raises(InfeasibleSetError):
        project_feasible([3.0], X)
    with pytest.raises(InvalidConfigError):
        project_feasible([3.0], np.ones((2, 1)), method="simplex")
    with pytest.raises(DimensionError):
        project_feasible([3.0, 1.0], np.ones((2, 1)))


@given(
    st.integers(min_value=0, max_value=2**32 - 1),
    st.integers(min_value=2, max_value=40),
    st.integers(min_value=1, max_value=3),
    st.floats(min_value=0.05, max_value=1.0),
)
def test_projection_is_feasible_and_idempotent(seed, n, k, a_minus):
    r = np.random.default_rng(seed)
    bounds = ConcentrationBounds(a_minus=a_minus, a_plus=a_minus + 1.4)
    X = np.hstack([np.ones((n, 1)), r.uniform(-0.5, 0.5, (n, k))])
    theta_star = r.normal(0.0, 5.0, k + 1)
    once = project_feasible(theta_star, X, bounds)
    a = X @ once
    assert np.all(a >= bounds.a_minus - 1e-9) and np.all(a <= bounds.a_plus + 1e-9)
    np.testing.assert_allclose(project_feasible(once, X, bounds), once, atol=1e-12)


def test_design_matrix_rejects_vectors():
    with pytest.raises(DimensionError):
        policy.design_matrix(np.ones(3))


def test_projection_regression_instance():
    # scipy's nnls returned an infeasible dual on this instance
    r = np.random.default_rng(1_893_297_973)
    bounds = ConcentrationBounds(a_minus=1.0, a_plus=2.4)
    X = np.hstack([np.ones((17, 1)), r.uniform(-0.5, 0.5, (17, 3))])
    theta_star = r.normal(0.0, 5.0, 4)
    np.testing.assert_allclose(project_feasible(theta_star, X, bounds), _qp_oracle(theta_star, X, bounds), atol=1e-6)
