"""Rewards: raw portfolio returns, the differential Sharpe ratio, discounted gains."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, DomainError, InvalidConfigError

REWARD_KINDS = ("return", "diff_sharpe")
VARIANCE_FLOOR = 1e-18
REWARD_CAP = 100.0


def k_factor(kappa: float) -> float:
    return math.sqrt((1.0 - kappa / 2.0) / (1.0 - kappa))


@dataclass(frozen=True)
class SharpeState:
    """Exponentially weighted first and second moments of portfolio returns."""

    mu_hat: float = 0.0
    sigma_sq_hat: float = 0.0
    kappa: float = 0.1
    k_kappa: float = float("nan")

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise DomainError(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.sigma_sq_hat < 0:
            raise DomainError("sigma_sq_hat must be nonnegative")
        k = k_factor(self.kappa)
        if not math.isnan(self.k_kappa) and abs(self.k_kappa - k) > 1e-12:
            raise DomainError(f"k_kappa={self.k_kappa} is inconsistent with kappa={self.kappa}")
        object.__setattr__(self, "k_kappa", k)


@dataclass(frozen=True)
class RewardConfig:
    kind: str = "return"
    kappa: float = 0.1
    gamma: float = 1.0
    cap: float = REWARD_CAP

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise InvalidConfigError(f"reward kind must be one of {REWARD_KINDS}, got {self.kind!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.kappa < 1.0:
            raise InvalidConfigError(f"kappa must lie in (0, 1), got {self.kappa}")
        if not self.cap > 0:
            raise InvalidConfigError("reward cap must be positive")

    def initial_state(self) -> SharpeState:
        return SharpeState(kappa=self.kappa)


def portfolio_return(w, returns) -> float:
    w = np.asarray(w, dtype=float)
    r = np.asarray(getattr(returns, "returns", returns), dtype=float)
    if w.shape != r.shape or w.ndim != 1:
        raise DimensionError(f"weights {w.shape} and returns {r.shape} do not match")
    return float(w @ r)


def sharpe_update(state: SharpeState, rho: float, cap: float = REWARD_CAP) -> tuple[SharpeState, float]:
    """Fold return ``rho`` into the moving moments and return the new reward.

    When the moving variance ``sigma_sq - mu**2`` is at or below 1e-18 the
    reward is ``sign(mu) * cap``; otherwise it is clipped to ``[-cap, cap]``
    so the reward stays continuous as the variance collapses.
    """
    kappa = state.kappa
    mu = kappa * rho + (1.0 - kappa) * state.mu_hat
    s2 = kappa * rho * rho + (1.0 - kappa) * state.sigma_sq_hat
    new = replace(state, mu_hat=mu, sigma_sq_hat=s2)
    var = s2 - mu * mu
    if var <= VARIANCE_FLOOR:
        return new, math.copysign(cap, mu) if mu != 0 else 0.0
    reward = mu / (state.k_kappa * math.sqrt(var))
    return new, max(-cap, min(cap, reward))


def discounted_gains(rewards, gamma: float) -> np.ndarray:
    """``G_t = R_{t+1} + gamma G_{t+1}`` for ``t = 0..T-1``, with ``G_{T-1} = R_T``."""
    r = np.asarray(rewards, dtype=float).reshape(-1)
    if r.size == 0:
        raise DomainError("discounted_gains needs at least one reward")
    if not 0.0 < gamma <= 1.0:
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}")
    g = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + gamma * acc
        g[t] = acc
    return g
