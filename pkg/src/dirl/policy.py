"""Dirichlet policies driven by asset characteristics.

Two links map a characteristics matrix ``X`` (first column all ones) and a
parameter vector ``theta`` to Dirichlet concentrations:

* ``F1``: ``a = X @ theta`` (linear, needs ``theta`` kept in a feasible set)
* ``F2``: ``a = exp(X @ theta)`` (always positive)
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from . import special_math
from .errors import (
    BoundaryError,
    DimensionError,
    InfeasibleParametersError,
    InfeasibleSetError,
    InvalidConfigError,
)
from .special_math import Concentration, ConcentrationBounds

log = logging.getLogger(__name__)

FORMS = ("F1", "F2")
DEFAULT_BOUNDS = ConcentrationBounds(a_minus=0.2, a_plus=1.6)
FEASIBILITY_TOL = 1e-9


class ConcentrationWarning(UserWarning):
    """F2 concentrations left the configured box (informational only)."""


def design_matrix(panel) -> np.ndarray:
    """Characteristics matrix of a ``FeaturePanel`` or a raw 2-D array."""
    X = np.asarray(getattr(panel, "features", panel), dtype=float)
    if X.ndim != 2 or X.shape[1] < 1:
        raise DimensionError(f"design matrix must be 2-D with at least one column, got {X.shape}")
    return X


@dataclass(frozen=True)
class PolicyParams:
    theta: np.ndarray
    form: str = "F1"
    bounds: ConcentrationBounds = field(default=DEFAULT_BOUNDS)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if theta.size < 1 or not np.all(np.isfinite(theta)):
            raise InvalidConfigError("theta must be a non-empty finite vector")
        form = str(self.form).upper()
        if form not in FORMS:
            raise InvalidConfigError(f"unknown policy form {self.form!r}; expected F1 or F2")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "form", form)

    @property
    def k(self) -> int:
        """Number of non-constant characteristics."""
        return self.theta.size - 1

    def with_theta(self, theta) -> "PolicyParams":
        return PolicyParams(theta, self.form, self.bounds)


@dataclass(frozen=True)
class MeanAllocation:
    """Mean policy weights and their decomposition around ``1/N``.

    ``tilde_w`` is the exact deviation ``w_bar - 1/N``. ``approx_tilde_w`` is
    the characteristics-driven tilt: ``sum_k theta_k x_nk / (N theta_0)`` for
    F1 (equal to ``tilde_w`` on centered panels) and its F2 counterpart
    ``sum_k theta_k x_nk / N``, valid to first order in the non-constant
    parameters. ``tilt_bound`` is the majorant ``|theta_-0|_1 / (2 N |theta_0|)``.
    """

    w_bar: np.ndarray
    tilde_w: np.ndarray
    approx_tilde_w: np.ndarray
    tilt_bound: float

    @property
    def approximation_error(self) -> float:
        return float(np.max(np.abs(self.tilde_w - self.approx_tilde_w)))


def _check_shapes(X: np.ndarray, params: PolicyParams) -> None:
    if X.shape[1] != params.theta.size:
        raise DimensionError(
            f"panel has {X.shape[1]} columns but theta has {params.theta.size} entries"
        )
    if not np.all(X[:, 0] == 1.0):
        raise DimensionError("first characteristic column must be all ones")


def concentration_from_features(panel, params: PolicyParams) -> Concentration:
    X = design_matrix(panel)
    _check_shapes(X, params)
    index = X @ params.theta
    if params.form == "F1":
        if np.any(~(index > 0)):
            bad = int(np.sum(~(index > 0)))
            raise InfeasibleParametersError(
                f"{bad} concentration(s) are not positive under F1; project theta first"
            )
        return Concentration(index)
    a = np.exp(index)
    if np.any(a > params.bounds.a_plus) or np.any(a < params.bounds.a_minus):
        warnings.warn(
            f"F2 concentrations span [{a.min():.4g}, {a.max():.4g}], outside "
            f"[{params.bounds.a_minus}, {params.bounds.a_plus}]",
            ConcentrationWarning,
            stacklevel=2,
        )
    return Concentration(a)


def concentration_jacobian(panel, params: PolicyParams, conc: Concentration | None = None) -> np.ndarray:
    """Rows are ``d a_n / d theta``: ``x_n`` under F1, ``a_n x_n`` under F2."""
    X = design_matrix(panel)
    if params.form == "F1":
        return X
    if conc is None:
        conc = concentration_from_features(X, params)
    return conc.a[:, None] * X


def mean_weights(panel, params: PolicyParams) -> MeanAllocation:
    X = design_matrix(panel)
    conc = concentration_from_features(X, params)
    n = conc.n
    w_bar = conc.a / conc.sigma
    tilt = X[:, 1:] @ params.theta[1:]
    theta0 = params.theta[0]
    if params.form == "F1":
        approx = tilt / (n * theta0)
    else:
        approx = tilt / n
    l1 = float(np.sum(np.abs(params.theta[1:])))
    bound = l1 / (2.0 * n * abs(theta0)) if theta0 != 0 else float("inf")
    return MeanAllocation(w_bar=w_bar, tilde_w=w_bar - 1.0 / n, approx_tilde_w=approx, tilt_bound=bound)


def score_gradient(w, panel, params: PolicyParams) -> np.ndarray:
    """Gradient in ``theta`` of the log policy density at allocation(s) ``w``.

    Accepts a single allocation of shape ``(N,)`` or a batch ``(B, N)`` and
    returns ``(K+1,)`` or ``(B, K+1)`` accordingly.
    """
    X = design_matrix(panel)
    conc = concentration_from_features(X, params)
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != conc.n:
        raise DimensionError(f"allocation has {w.shape[-1]} weights, panel has {conc.n} assets")
    if np.any(~(w > 0)):
        raise BoundaryError("score is undefined on the boundary of the simplex")
    # ln w_n minus its expectation psi(a_n) - psi(sigma)
    centered = np.log(w) - (special_math.digamma(conc.a) - special_math.digamma(conc.sigma))
    return centered @ concentration_jacobian(X, params, conc)


def feasibility_violation(theta, panel, bounds: ConcentrationBounds) -> float:
    """Largest amount by which ``X theta`` leaves ``[a_minus, a_plus]`` (0 if inside)."""
    a = design_matrix(panel) @ np.asarray(theta, dtype=float)
    return float(max(0.0, np.max(bounds.a_minus - a), np.max(a - bounds.a_plus)))


def _halfspaces(X: np.ndarray, bounds: ConcentrationBounds) -> tuple[np.ndarray, np.ndarray]:
    X = np.unique(X, axis=0)
    G = np.vstack([X, -X])
    h = np.concatenate([np.full(len(X), bounds.a_plus), np.full(len(X), -bounds.a_minus)])
    return G, h


def _project_active_set(theta_star: np.ndarray, G: np.ndarray, h: np.ndarray) -> np.ndarray:
    # Least-distance programming: min |z| s.t. G z <= h - G theta*, solved
    # through its NNLS dual (Lawson & Hanson, ch. 23). BVLS is used for the
    # dual because scipy's nnls returns wrong solutions on some of these
    # rank-deficient systems.
    slack = G @ theta_star - h
    E = np.vstack([-G.T, slack[None, :]])
    f = np.zeros(E.shape[0])
    f[-1] = 1.0
    u = lsq_linear(E, f, bounds=(0.0, np.inf), method="bvls", tol=1e-14).x
    r = E @ u - f
    if abs(r[-1]) < 1e-14:
        raise InfeasibleSetError("the feasible parameter set is empty")
    z = -r[:-1] / r[-1]
    theta = theta_star + z
    # polish: exact projection onto the active constraints identified by NNLS
    active = u > 1e-12 * max(1.0, u.max())
    if np.any(active):
        Ga = G[active]
        resid = Ga @ theta_star - h[active]
        lam, *_ = np.linalg.lstsq(Ga @ Ga.T, resid, rcond=None)
        polished = theta_star - Ga.T @ lam
        if np.max(G @ polished - h) <= np.max(G @ theta - h) + 1e-15:
            theta = polished
    return theta


def _project_dykstra(theta_star: np.ndarray, G: np.ndarray, h: np.ndarray,
                     max_iter: int, tol: float) -> np.ndarray:
    norms = np.einsum("ij,ij->i", G, G)
    x = theta_star.copy()
    incr = np.zeros_like(G)
    for _ in range(max_iter):
        x_prev = x.copy()
        for i in range(G.shape[0]):
            y = x + incr[i]
            excess = G[i] @ y - h[i]
            x_new = y - (excess / norms[i]) * G[i] if excess > 0 else y
            incr[i] = y - x_new
            x = x_new
        if np.max(np.abs(x - x_prev)) < tol and np.max(G @ x - h) <= tol:
            return x
    warnings.warn("Dykstra projection hit its iteration cap", RuntimeWarning, stacklevel=3)
    return x


def project_feasible(theta_star, panel, bounds: ConcentrationBounds = DEFAULT_BOUNDS,
                     method: str = "active_set", max_iter: int = 10_000,
                     tol: float = 1e-10) -> np.ndarray:
    """Euclidean projection of ``theta_star`` onto ``{theta : a_minus <= X theta <= a_plus}``.

    ``panel`` may be one panel or several stacked row-wise; duplicated rows
    are dropped. A feasible input is returned unchanged. ``method`` is
    ``"active_set"`` (exact, via NNLS) or ``"dykstra"`` (alternating
    halfspace projections).
    """
    theta_star = np.asarray(theta_star, dtype=float).reshape(-1).copy()
    X = design_matrix(panel)
    if X.shape[1] != theta_star.size:
        raise DimensionError(f"panel has {X.shape[1]} columns, theta has {theta_star.size}")
    if feasibility_violation(theta_star, X, bounds) == 0.0:
        return theta_star
    if np.all(X[:, 0] == 1.0):
        witness = np.zeros_like(theta_star)
        witness[0] = 0.5 * (bounds.a_minus + bounds.a_plus)
        assert feasibility_violation(witness, X, bounds) == 0.0
    G, h = _halfspaces(X, bounds)
    if method == "active_set":
        theta = _project_active_set(theta_star, G, h)
        if np.max(G @ theta - h) <= FEASIBILITY_TOL:
            return theta
        log.warning("active-set projection left a violation of %.3g; falling back to Dykstra",
                    float(np.max(G @ theta - h)))
        return _project_dykstra(theta_star, G, h, max_iter, tol)
    if method == "dykstra":
        return _project_dykstra(theta_star, G, h, max_iter, tol)
    raise InvalidConfigError(f"unknown projection method {method!r}")
