"""Analytical oracles: exact policy gradients, Bellman values on finite chains,
mean-variance optimal linear allocations, cross-sectional regressions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import policy as pol
from .errors import (
    DimensionError,
    DomainError,
    InsufficientHistoryError,
    SingularDesignError,
)
from .market import FactorModelSpec
from .policy import PolicyParams, design_matrix


def _returns_vector(next_returns) -> np.ndarray:
    return np.asarray(getattr(next_returns, "returns", next_returns), dtype=float)


def closed_form_gradient(panel, params: PolicyParams, expected_returns) -> np.ndarray:
    """Exact gradient of one-step expected portfolio return with respect to theta.

    ``sum_n (E r_n - E_pi R) grad a_n / sigma`` with ``E_pi R = (a/sigma)' E r``.
    """
    X = design_matrix(panel)
    conc = pol.concentration_from_features(X, params)
    m = np.asarray(expected_returns, dtype=float)
    if m.shape != (conc.n,):
        raise DimensionError(f"{m.size} expected returns for {conc.n} assets")
    excess = m - (conc.a / conc.sigma) @ m
    return excess @ pol.concentration_jacobian(X, params, conc) / conc.sigma


def subset_gradient(panel, params: PolicyParams, expected_returns, subset) -> tuple[float, float]:
    """Partial derivatives in (theta_0, theta_1) for a bundle of assets, K = 1."""
    X = design_matrix(panel)
    if X.shape[1] != 2:
        raise DimensionError(f"subset gradients are defined for one characteristic, got K={X.shape[1] - 1}")
    idx = np.asarray(subset, dtype=int)
    m = np.asarray(expected_returns, dtype=float)
    if m.shape != (X.shape[0],):
        raise DimensionError(f"{m.size} expected returns for {X.shape[0]} assets")
    g = closed_form_gradient(X[idx], params, m[idx])
    return float(g[0]), float(g[1])


@dataclass(frozen=True)
class FiniteChain:
    """Characteristics evolving as a Markov chain on finitely many panels."""

    states: tuple
    transition: np.ndarray
    horizon: int

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        s = len(self.states)
        if P.shape != (s, s):
            raise DimensionError(f"transition must be {s}x{s}, got {P.shape}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise DomainError("transition rows must be nonnegative and sum to 1")
        if self.horizon < 1:
            raise DomainError("horizon must be at least 1")
        P.setflags(write=False)
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "transition", P)


ExpectedReturns = Callable[[np.ndarray], np.ndarray] | Sequence[np.ndarray]


def _state_rewards(chain: FiniteChain, params: PolicyParams, expected_return_fn: ExpectedReturns) -> np.ndarray:
    out = np.empty(len(chain.states))
    for s, panel in enumerate(chain.states):
        X = design_matrix(panel)
        f = expected_return_fn(X) if callable(expected_return_fn) else expected_return_fn[s]
        out[s] = pol.mean_weights(X, params).w_bar @ np.asarray(f, dtype=float)
    return out


def _check_time(chain: FiniteChain, t: int, s: int) -> None:
    if not 0 <= t < chain.horizon:
        raise DomainError(f"t={t} must lie in [0, {chain.horizon})")
    if not 0 <= s < len(chain.states):
        raise IndexError(f"state {s} out of range")


def bellman_value(chain: FiniteChain, params: PolicyParams, t: int, state_index: int,
                  expected_return_fn: ExpectedReturns, gamma: float = 1.0) -> float:
    """Value of the mean-return criterion from state ``state_index`` at time ``t``.

    Backward recursion ``V(t) = r + gamma P V(t+1)`` from ``V(T-1) = r``,
    where ``r_s`` is the mean-policy expected return in state ``s``.
    ``expected_return_fn`` maps a characteristics matrix to expected
    returns, or is a list of expected-return vectors, one per state.
    """
    _check_time(chain, t, state_index)
    r = _state_rewards(chain, params, expected_return_fn)
    v = r.copy()
    for _ in range(chain.horizon - 1 - t):
        v = r + gamma * chain.transition @ v
    return float(v[state_index])


def bellman_value_direct(chain: FiniteChain, params: PolicyParams, t: int, state_index: int,
                         expected_return_fn: ExpectedReturns, gamma: float = 1.0) -> float:
    """Same value by summing ``gamma^l P^l r`` over the remaining steps."""
    _check_time(chain, t, state_index)
    r = _state_rewards(chain, params, expected_return_fn)
    total = 0.0
    for lag in range(chain.horizon - t):
        total += gamma**lag * (np.linalg.matrix_power(chain.transition, lag) @ r)[state_index]
    return float(total)


@dataclass(frozen=True)
class QuadraticSolution:
    """Mean-variance optimal linear-in-characteristics weights.

    ``theta_star`` meets the budget ``1' X theta = 1`` through the multiplier
    ``scaling_c``. ``theta_star_sherman_morrison`` is the same solution via the
    rank-one inverse, available when the sample covariance of the
    characteristics is diagonal; ``theta_star_centered`` is the closed form for
    zero-mean characteristics.
    """

    theta_star: np.ndarray
    theta_star_unconstrained: np.ndarray
    scaling_c: float
    theta_star_sherman_morrison: np.ndarray | None = None
    theta_star_centered: np.ndarray | None = None


def _gram(X: np.ndarray) -> np.ndarray:
    n, p = X.shape
    if n <= p:
        raise SingularDesignError(f"need more assets than columns, got N={n}, K+1={p}")
    XtX = X.T @ X
    if np.linalg.matrix_rank(XtX) < p:
        raise SingularDesignError("characteristics are collinear")
    return XtX


def lemma1_objective(theta, panel, spec: FactorModelSpec, gamma_risk: float) -> float:
    """Expected portfolio return minus ``gamma/2`` times its variance."""
    X = design_matrix(panel)
    w = X @ np.asarray(theta, dtype=float)
    mean = w @ X @ spec.beta_bar
    xw = X.T @ w
    var = xw @ (spec.sigma_beta_sq * xw) + spec.sigma_eps_sq * (w @ w)
    return float(mean - 0.5 * gamma_risk * var)


def lemma1_solution(panel, spec: FactorModelSpec, gamma_risk: float) -> QuadraticSolution:
    X = design_matrix(panel)
    n, p = X.shape
    if spec.beta_bar.size != p:
        raise DimensionError(f"model has {spec.beta_bar.size} loadings for {p} columns")
    if not gamma_risk > 0:
        raise DomainError("risk aversion must be positive")
    XtX = _gram(X)
    M = spec.sigma_beta_sq[:, None] * XtX + spec.sigma_eps_sq * np.eye(p)
    if np.linalg.matrix_rank(M) < p:
        raise SingularDesignError("the variance operator is singular (zero noise and zero loading variance)")
    ones_proj = np.linalg.solve(XtX, X.T @ np.ones(n))
    u = np.linalg.solve(M, spec.beta_bar) / gamma_risk
    v = np.linalg.solve(M, ones_proj) / gamma_risk
    s = X.sum(axis=0)
    c = (1.0 - s @ u) / (s @ v)
    theta = u + c * v

    xbar = s / n
    sigma_x = (X - xbar).T @ (X - xbar) / n
    sm = centered = None
    if np.allclose(sigma_x, np.diag(np.diag(sigma_x)), rtol=0, atol=1e-12 * max(1.0, np.abs(sigma_x).max())):
        sb = spec.sigma_beta_sq
        d = np.diag(sigma_x) * sb + spec.sigma_eps_sq / n
        dinv = 1.0 / d
        core = np.eye(p) - np.outer(sb * xbar, xbar * dinv) / (1.0 + xbar @ (dinv * sb * xbar))
        base = lambda cc: dinv * (core @ (spec.beta_bar / n + cc * np.linalg.solve(XtX, xbar))) / gamma_risk
        u_sm, v_sm = base(0.0), base(1.0) - base(0.0)
        sm = u_sm + (1.0 - s @ u_sm) / (s @ v_sm) * v_sm
        if np.all(np.abs(xbar[1:]) <= 1e-12):
            centered = np.empty(p)
            centered[0] = 1.0 / n
            centered[1:] = spec.beta_bar[1:] / (gamma_risk * n * (np.diag(sigma_x)[1:] * sb[1:] + spec.sigma_eps_sq / n))
    return QuadraticSolution(theta, u, float(c), sm, centered)


def lemma1_numerical(panel, spec: FactorModelSpec, gamma_risk: float, tol: float = 1e-13,
                     max_iter: int = 200_000) -> np.ndarray:
    """Budget-constrained maximizer by accelerated projected gradient ascent.

    Used as an independent check of :func:`lemma1_solution`: it only needs the
    objective's gradient and the projection onto ``{theta : s' theta = 1}``.
    """
    X = design_matrix(panel)
    XtX = _gram(X)
    A = gamma_risk * (XtX @ (spec.sigma_beta_sq[:, None] * XtX) + spec.sigma_eps_sq * XtX)
    b = XtX @ spec.beta_bar
    s = X.sum(axis=0)

    def project(th):
        return th + (1.0 - s @ th) / (s @ s) * s

    # precondition with the Gram matrix so the step size is well scaled
    L = np.linalg.cholesky(XtX)
    Linv = np.linalg.inv(L)
    A_ = Linv @ A @ Linv.T
    b_ = Linv @ b
    s_ = Linv @ s  # budget in the new coordinates z = L' theta reads s_' z = 1
    step = 1.0 / np.linalg.eigvalsh(A_).max()

    def project_z(z):
        return z + (1.0 - s_ @ z) / (s_ @ s_) * s_

    z = project_z(np.zeros_like(b_))
    y, t_k = z.copy(), 1.0
    for _ in range(max_iter):
        z_new = project_z(y + step * (b_ - A_ @ y))
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
        y = z_new + (t_k - 1.0) / t_new * (z_new - z)
        if np.max(np.abs(z_new - z)) <= tol * max(1.0, np.max(np.abs(z_new))):
            z = z_new
            break
        z, t_k = z_new, t_new
    theta = np.linalg.solve(L.T, z)
    return project(theta)


def cross_sectional_betas(panel, next_returns) -> tuple[np.ndarray, float]:
    """OLS loadings of next-period returns on characteristics, and residual variance."""
    X = design_matrix(panel)
    r = _returns_vector(next_returns)
    if r.shape != (X.shape[0],):
        raise DimensionError(f"{r.size} returns for {X.shape[0]} assets")
    _gram(X)
    beta, *_ = np.linalg.lstsq(X, r, rcond=None)
    resid = r - X @ beta
    n, p = X.shape
    return beta, float(resid @ resid / (n - p))


def scaled_unconstrained_theta(beta_hat, sigma_x_sq, sigma_beta_sq, sigma_eps_sq: float,
                               n_assets: int, gamma_risk: float = 2.0) -> np.ndarray:
    """``(beta_j / (gamma N)) / (s2_X,j s2_beta,j + s2_eps / N)`` per characteristic.

    ``sigma_x_sq[0]`` is 0 for the constant column, which reduces the first
    entry to ``beta_0 / (gamma s2_eps)``.
    """
    b = np.asarray(beta_hat, dtype=float)
    denom = np.asarray(sigma_x_sq, dtype=float) * np.asarray(sigma_beta_sq, dtype=float) + sigma_eps_sq / n_assets
    if np.any(denom <= 0):
        raise DomainError("zero or negative variance in the scaling denominator")
    return b / (gamma_risk * n_assets) / denom


def characteristic_variances(panel) -> np.ndarray:
    """Cross-sectional variance of every column (1/N normalization)."""
    return np.var(design_matrix(panel), axis=0)


def scaled_theta_series(betas, resid_vars, sigma_x_sq, n_assets, window: int = 24,
                        gamma_risk: float = 2.0) -> np.ndarray:
    """Scaled unconstrained thetas month by month.

    The loading variance is the sample variance of the monthly betas over the
    trailing ``window`` months (current month included); earlier months are NaN.
    """
    B = np.asarray(betas, dtype=float)
    T = B.shape[0]
    out = np.full_like(B, np.nan)
    if window < 2:
        raise DomainError("window must be at least 2")
    for t in range(window - 1, T):
        var_b = np.var(B[t - window + 1:t + 1], axis=0, ddof=1)
        out[t] = scaled_unconstrained_theta(B[t], sigma_x_sq[t], var_b, resid_vars[t], n_assets[t], gamma_risk)
    return out


@dataclass(frozen=True)
class SlopeTest:
    slope: float
    intercept: float
    pvalue: float
    n: int


def compare_updates(theta_path, tilde_theta_path) -> list[SlopeTest]:
    """Regress parameter changes on scaled optimal thetas, feature by feature.

    ``theta_path`` has T rows. ``tilde_theta_path`` has T-1 rows aligned
    with the changes ``theta_t - theta_{t-1}``, or T rows whose first row is
    then ignored. Rows with missing values are skipped.
    """
    th = np.asarray(theta_path, dtype=float)
    tt = np.asarray(tilde_theta_path, dtype=float)
    if th.ndim == 1:
        th = th[:, None]
    if tt.ndim == 1:
        tt = tt[:, None]
    delta = np.diff(th, axis=0)
    if tt.shape[0] == th.shape[0]:
        tt = tt[1:]
    return regress_features(tt, delta)


def regress_features(x, y) -> list[SlopeTest]:
    """Column-by-column OLS of ``y`` on ``x`` (same shapes), skipping missing rows."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DimensionError(f"regressor {x.shape} does not align with response {y.shape}")
    out = []
    for k in range(y.shape[1]):
        ok = np.isfinite(x[:, k]) & np.isfinite(y[:, k])
        xk, yk = x[ok, k], y[ok, k]
        if xk.size < 3:
            raise InsufficientHistoryError("at least 3 aligned points are needed")
        # treat round-off wiggle in a constant response as constant
        if np.ptp(yk) <= 1e-12 * max(1e-300, float(np.max(np.abs(yk)))):
            out.append(SlopeTest(0.0, float(yk[0]), 1.0, int(xk.size)))
            continue
        if np.ptp(xk) == 0:
            raise DomainError(f"regressor for feature {k} is constant")
        res = stats.linregress(xk, yk)
        out.append(SlopeTest(float(res.slope), float(res.intercept), float(res.pvalue), int(xk.size)))
    return out


def write_diagnostics_csv(rows, path) -> None:
    """Rows of ``(date, feature, beta_hat, theta_tilde, delta_theta)``."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", "feature", "beta_hat", "theta_tilde", "delta_theta"])
        for date, feat, b, tt, dt in rows:
            writer.writerow([date, feat, *("" if not np.isfinite(v) else repr(float(v)) for v in (b, tt, dt))])
