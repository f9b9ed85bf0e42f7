"""REINFORCE with Dirichlet policies and the two walk-forward protocols.

``bootstrap``: each month, E single-step episodes are played on the previous
month (random asset bundle, random allocation, realized return as reward).

``chronological``: each January, E episodes of 12 steps are played on the
preceding year; the learned parameters then stay fixed for 12 months.

In both protocols the out-of-sample portfolio is the mean policy over the
whole available universe.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import policy as pol
from .errors import AlignmentError, InsufficientHistoryError, InvalidConfigError
from .market import MarketDataset, month_of
from .policy import DEFAULT_BOUNDS, PolicyParams, design_matrix
from .rewards import RewardConfig, discounted_gains, sharpe_update
from .special_math import ConcentrationBounds, dirichlet_sample

log = logging.getLogger(__name__)

PROTOCOLS = ("bootstrap", "chronological")
EPISODE_LENGTH = 12
HIST_EDGES = np.linspace(0.0, 3.0, 31)  # bins for N * w_bar


@dataclass(frozen=True)
class LearnConfig:
    n_episodes: int = 500
    learning_rate: float = 0.1
    reward: RewardConfig = field(default_factory=RewardConfig)
    n_assets_per_draw: int = 100
    theta_init: tuple[float, ...] | None = None  # None means all ones
    seed: int = 42
    protocol: str = "bootstrap"
    form: str = "F1"
    bounds: ConcentrationBounds = DEFAULT_BOUNDS
    reinitialize: bool = False
    normalize_gradient: bool = True
    projection_method: str = "active_set"

    def __post_init__(self):
        protocol = {"chrono": "chronological"}.get(self.protocol, self.protocol)
        if protocol not in PROTOCOLS:
            raise InvalidConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        object.__setattr__(self, "protocol", protocol)
        object.__setattr__(self, "form", str(self.form).upper())
        if self.form not in pol.FORMS:
            raise InvalidConfigError(f"policy form must be F1 or F2, got {self.form!r}")
        if not 0.0 < self.learning_rate < 1.0:
            raise InvalidConfigError(f"learning rate must lie in (0, 1), got {self.learning_rate}")
        if self.n_episodes < 0:
            raise InvalidConfigError("n_episodes must be nonnegative")
        if self.n_assets_per_draw < 2:
            raise InvalidConfigError("n_assets_per_draw must be at least 2")
        if self.seed < 0:
            raise InvalidConfigError("seed must be nonnegative")
        if self.theta_init is not None:
            object.__setattr__(self, "theta_init", tuple(float(v) for v in self.theta_init))
        if protocol == "bootstrap" and self.reward.kind != "return":
            raise InvalidConfigError(
                "bootstrap episodes have a single step, so the reward must be the raw return"
            )

    def initial_params(self, k: int) -> PolicyParams:
        theta = np.ones(k + 1) if self.theta_init is None else np.array(self.theta_init)
        if theta.size != k + 1:
            raise InvalidConfigError(f"theta_init has {theta.size} entries, data has K+1={k + 1}")
        return PolicyParams(theta, self.form, self.bounds)


@dataclass
class EpisodeRecord:
    """One played episode: per step the asset bundle, allocation, reward and gain."""

    universe: list[np.ndarray]
    actions: list[np.ndarray]
    rewards: np.ndarray
    gains: np.ndarray
    dates: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.universe)
        if not (len(self.actions) == len(self.rewards) == len(self.gains) == n):
            raise AlignmentError("episode fields must have equal lengths")

    def __len__(self) -> int:
        return len(self.universe)


@dataclass
class BacktestReport:
    dates: list[str]
    monthly_returns: np.ndarray
    ew_returns: np.ndarray
    theta_path: np.ndarray
    turnover: float
    ew_turnover: float
    monthly_turnover: np.ndarray
    max_tilt: np.ndarray  # max_n |w_bar_n - 1/N| * N per month
    weight_histograms: dict[str, list[int]]
    feature_names: tuple[str, ...]
    config: dict

    @property
    def avg_return(self) -> float:
        return float(np.mean(self.monthly_returns))

    @property
    def ew_avg_return(self) -> float:
        return float(np.mean(self.ew_returns))

    @property
    def sharpe(self) -> float:
        return _sharpe(self.monthly_returns)

    @property
    def ew_sharpe(self) -> float:
        return _sharpe(self.ew_returns)

    def ew_pvalue(self) -> float:
        """Two-sided Welch t-test of equal mean monthly return versus EW."""
        if len(self.monthly_returns) < 2:
            return float("nan")
        if np.array_equal(self.monthly_returns, self.ew_returns):
            return 1.0
        return float(stats.ttest_ind(self.monthly_returns, self.ew_returns, equal_var=False).pvalue)

    def summary(self) -> dict:
        return {
            "months": len(self.dates),
            "avg_return": self.avg_return,
            "sharpe": self.sharpe,
            "turnover": self.turnover,
            "ew_avg_return": self.ew_avg_return,
            "ew_sharpe": self.ew_sharpe,
            "ew_turnover": self.ew_turnover,
            "ew_pvalue": self.ew_pvalue(),
            "final_theta": [float(v) for v in self.theta_path[-1]] if len(self.theta_path) else [],
        }


def _sharpe(x: np.ndarray) -> float:
    """Monthly mean over monthly standard deviation (no annualization)."""
    if len(x) < 2:
        return float("nan")
    sd = float(np.std(x, ddof=1))
    return float(np.mean(x)) / sd if sd > 0 else float("nan")


def episode_rng(seed: int, month_index: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, month_index, episode]))


def _project(params: PolicyParams, X: np.ndarray, config: LearnConfig) -> PolicyParams:
    if params.form != "F1":
        return params
    theta = pol.project_feasible(params.theta, X, params.bounds, method=config.projection_method)
    return params if theta is params.theta else params.with_theta(theta)


def normalized_score(score: np.ndarray) -> np.ndarray:
    """Score divided by its largest absolute component (zero stays zero)."""
    top = float(np.max(np.abs(score)))
    return score / top if top > 0 else score


def reinforce_update(params: PolicyParams, episode: EpisodeRecord, panels, config: LearnConfig) -> PolicyParams:
    """Apply ``theta += eta gamma^t G_t g_t`` for every step of ``episode``.

    ``panels[t]`` is the characteristics matrix of the assets in
    ``episode.universe[t]`` (rows in the same order as the allocation). The
    score ``g_t`` is evaluated at the current parameters and optionally
    normalized by its largest component. Under F1 the parameters are
    projected onto the feasible set of all episode panels after each step.
    """
    mats = [design_matrix(p) for p in panels]
    if len(mats) != len(episode):
        raise AlignmentError(f"{len(mats)} panels for an episode of {len(episode)} steps")
    stacked = np.vstack(mats) if params.form == "F1" else None
    gamma = config.reward.gamma
    for t, (X, w, g) in enumerate(zip(mats, episode.actions, episode.gains)):
        if g == 0.0:
            continue
        score = pol.score_gradient(w, X, params)
        if config.normalize_gradient:
            score = normalized_score(score)
        theta = params.theta + config.learning_rate * gamma**t * g * score
        params = params.with_theta(theta)
        if stacked is not None:
            params = _project(params, stacked, config)
    return params


def _play_step(params: PolicyParams, X: np.ndarray, r: np.ndarray, rng: np.random.Generator):
    conc = pol.concentration_from_features(X, params)
    w = dirichlet_sample(conc, rng)
    return w, float(w @ r)


def run_bootstrap_learning(dataset: MarketDataset, date: str, config: LearnConfig,
                           params: PolicyParams | None = None) -> tuple[PolicyParams, list[EpisodeRecord]]:
    """Learn on the month ending at ``date`` with E single-step episodes."""
    if config.reward.kind != "return":
        raise InvalidConfigError("bootstrap learning only supports raw-return rewards")
    t = dataset.index_of(date)
    if t < 1 or t - 1 >= len(dataset.returns):
        raise InsufficientHistoryError(f"no panel and returns for the month before {date}")
    panel, ret = dataset.panels[t - 1], dataset.returns[t - 1]
    if params is None:
        params = config.initial_params(dataset.k)
    X_all, r_all = panel.features, ret.returns
    records = []
    for e in range(config.n_episodes):
        rng = episode_rng(config.seed, t, e)
        idx = rng.choice(panel.n_assets, size=config.n_assets_per_draw, replace=True)
        X, r = X_all[idx], r_all[idx]
        params = _project(params, X, config)
        w, rho = _play_step(params, X, r, rng)
        rec = EpisodeRecord([idx], [w], np.array([rho]), np.array([rho]), [panel.date])
        params = reinforce_update(params, rec, [X], config)
        records.append(rec)
    return params, records


def run_chronological_learning(dataset: MarketDataset, january: str, config: LearnConfig,
                               params: PolicyParams | None = None) -> tuple[PolicyParams, list[EpisodeRecord]]:
    """Learn on the 12 months preceding ``january`` with E episodes of 12 steps."""
    t = dataset.index_of(january)
    if t < EPISODE_LENGTH or t - 1 >= len(dataset.returns):
        raise InsufficientHistoryError(f"12 months of history are needed before {january}")
    if params is None:
        params = config.initial_params(dataset.k)
    months = range(t - EPISODE_LENGTH, t)
    records = []
    for e in range(config.n_episodes):
        rng = episode_rng(config.seed, t, e)
        universe, mats, rets = [], [], []
        for i in months:
            idx = rng.choice(dataset.panels[i].n_assets, size=config.n_assets_per_draw, replace=True)
            universe.append(idx)
            mats.append(dataset.panels[i].features[idx])
            rets.append(dataset.returns[i].returns[idx])
        if params.form == "F1":
            params = _project(params, np.vstack(mats), config)
        actions, rewards = [], []
        state = config.reward.initial_state()
        for X, r in zip(mats, rets):
            w, rho = _play_step(params, X, r, rng)
            if config.reward.kind == "diff_sharpe":
                state, rho = sharpe_update(state, rho, config.reward.cap)
            actions.append(w)
            rewards.append(rho)
        rewards = np.array(rewards)
        rec = EpisodeRecord(universe, actions, rewards, discounted_gains(rewards, config.reward.gamma),
                            [dataset.panels[i].date for i in months])
        params = reinforce_update(params, rec, mats, config)
        records.append(rec)
    return params, records


def drift_weights(w, r) -> np.ndarray:
    """Weights after one period of buy-and-hold: ``w (1 + r) / (1 + w'r)``."""
    w = np.asarray(w, dtype=float)
    r = np.asarray(r, dtype=float)
    return w * (1.0 + r) / (1.0 + float(w @ r))


def rebalance_pairs(allocations) -> tuple[list[np.ndarray], list[np.ndarray], list[int]]:
    """Align consecutive allocations for turnover.

    ``allocations`` is a sequence of ``(asset_ids, w, realized_returns)``.
    Returns, for every allocation after the first, the new weights and the
    drifted previous weights on the union of both universes, along with the
    size of the new universe. Leavers end at 0, entrants start at 0.
    """
    after, before, sizes = [], [], []
    for (ids0, w0, r0), (ids1, w1, _) in zip(allocations, allocations[1:]):
        drifted = dict(zip(ids0, drift_weights(w0, r0)))
        new = dict(zip(ids1, np.asarray(w1, dtype=float)))
        keys = list(dict.fromkeys([*ids1, *ids0]))
        after.append(np.array([new.get(k, 0.0) for k in keys]))
        before.append(np.array([drifted.get(k, 0.0) for k in keys]))
        sizes.append(len(ids1))
    return after, before, sizes


def turnover(weights_after, weights_before, n_assets=None) -> float:
    """Average over dates of ``sum_n |w_t,n - w_t-,n| / N_t``.

    ``n_assets[t]`` defaults to the length of the aligned vectors.
    """
    if len(weights_after) != len(weights_before):
        raise AlignmentError("need one pre-rebalance vector per allocation")
    if not weights_after:
        return 0.0
    total = 0.0
    for t, (a, b) in enumerate(zip(weights_after, weights_before)):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        if a.shape != b.shape:
            raise AlignmentError(f"weight vectors at position {t} are not aligned")
        n = a.size if n_assets is None else n_assets[t]
        total += float(np.sum(np.abs(a - b))) / n
    return total / len(weights_after)


def _histogram(w_bar: np.ndarray) -> np.ndarray:
    scaled = np.clip(w_bar * w_bar.size, HIST_EDGES[0], HIST_EDGES[-1])
    counts, _ = np.histogram(scaled, bins=HIST_EDGES)
    return counts


def _learning_months(dataset: MarketDataset, config: LearnConfig) -> list[int]:
    """Indices of panels at which an out-of-sample allocation is made."""
    n_alloc = len(dataset.returns)
    if config.protocol == "bootstrap":
        return list(range(1, n_alloc))
    first = next((i for i in range(EPISODE_LENGTH, n_alloc) if month_of(dataset.panels[i].date) == 1), None)
    if first is None:
        raise InsufficientHistoryError("no January with 12 months of history in the dataset")
    return list(range(first, n_alloc))


def run_backtest(dataset: MarketDataset, config: LearnConfig) -> BacktestReport:
    months = _learning_months(dataset, config)
    if not months:
        raise InsufficientHistoryError("dataset is too short for a backtest")
    params = config.initial_params(dataset.k)
    dates, rets, ew, thetas, tilts = [], [], [], [], []
    allocations, ew_allocations = [], []
    hist: dict[str, np.ndarray] = {}
    for i in months:
        panel, ret = dataset.panels[i], dataset.returns[i]
        learn_now = config.protocol == "bootstrap" or month_of(panel.date) == 1
        if learn_now and config.n_episodes > 0:
            start = config.initial_params(dataset.k) if config.reinitialize else params
            runner = run_bootstrap_learning if config.protocol == "bootstrap" else run_chronological_learning
            params, _ = runner(dataset, panel.date, config, start)
        params = _project(params, panel.features, config)
        w_bar = pol.mean_weights(panel, params).w_bar
        ew_w = np.full(panel.n_assets, 1.0 / panel.n_assets)
        dates.append(ret.date)
        rets.append(float(w_bar @ ret.returns))
        ew.append(float(ew_w @ ret.returns))
        thetas.append(params.theta.copy())
        tilts.append(float(np.max(np.abs(w_bar - 1.0 / panel.n_assets))) * panel.n_assets)
        allocations.append((panel.asset_ids, w_bar, ret.returns))
        ew_allocations.append((panel.asset_ids, ew_w, ret.returns))
        year = panel.date[:4]
        hist[year] = hist.get(year, np.zeros(HIST_EDGES.size - 1, dtype=int)) + _histogram(w_bar)
        log.debug("%s theta=%s return=%.6f", ret.date, np.round(params.theta, 4), rets[-1])
    after, before, sizes = rebalance_pairs(allocations)
    monthly_turn = np.array([np.sum(np.abs(a - b)) / n for a, b, n in zip(after, before, sizes)])
    ew_after, ew_before, ew_sizes = rebalance_pairs(ew_allocations)
    return BacktestReport(
        dates=dates,
        monthly_returns=np.array(rets),
        ew_returns=np.array(ew),
        theta_path=np.array(thetas),
        turnover=turnover(after, before, sizes),
        ew_turnover=turnover(ew_after, ew_before, ew_sizes),
        monthly_turnover=monthly_turn,
        max_tilt=np.array(tilts),
        weight_histograms={y: [int(c) for c in v] for y, v in hist.items()},
        feature_names=dataset.feature_names,
        config=config_to_dict(config),
    )


def config_to_dict(config: LearnConfig) -> dict:
    return {
        "n_episodes": config.n_episodes,
        "learning_rate": config.learning_rate,
        "reward": {"kind": config.reward.kind, "kappa": config.reward.kappa,
                   "gamma": config.reward.gamma, "cap": config.reward.cap},
        "n_assets_per_draw": config.n_assets_per_draw,
        "theta_init": None if config.theta_init is None else list(config.theta_init),
        "seed": config.seed,
        "protocol": config.protocol,
        "form": config.form,
        "bounds": {"a_minus": config.bounds.a_minus, "a_plus": config.bounds.a_plus,
                   "kappa_max": config.bounds.kappa_max, "delta": config.bounds.delta},
        "reinitialize": config.reinitialize,
        "normalize_gradient": config.normalize_gradient,
        "projection_method": config.projection_method,
    }


def config_from_dict(d: dict) -> LearnConfig:
    d = dict(d)
    if "reward" in d and isinstance(d["reward"], dict):
        d["reward"] = RewardConfig(**d["reward"])
    if "bounds" in d and isinstance(d["bounds"], dict):
        d["bounds"] = ConcentrationBounds(**d["bounds"])
    unknown = set(d) - set(LearnConfig.__dataclass_fields__)
    if unknown:
        raise InvalidConfigError(f"unknown learning options: {sorted(unknown)}")
    return LearnConfig(**d)


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_report_json(report: BacktestReport, path) -> None:
    payload = {
        "summary": {k: _clean(v) if not isinstance(v, list) else v for k, v in report.summary().items()},
        "config": report.config,
        "feature_names": list(report.feature_names),
        "weight_histograms": {"edges_n_times_w": [float(e) for e in HIST_EDGES],
                              "counts": report.weight_histograms},
        "max_tilt": [float(v) for v in report.max_tilt],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report_csv(report: BacktestReport, path) -> None:
    k1 = report.theta_path.shape[1] if report.theta_path.size else 0
    turn = np.concatenate([[0.0], report.monthly_turnover]) if len(report.dates) else []
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", "avg_policy_return", "ew_return", *(f"theta_{k}" for k in range(k1)), "turnover"])
        for t, date in enumerate(report.dates):
            writer.writerow([date, repr(float(report.monthly_returns[t])), repr(float(report.ew_returns[t])),
                             *(repr(float(v)) for v in report.theta_path[t]), repr(float(turn[t]))])


def with_overrides(config: LearnConfig, **kwargs) -> LearnConfig:
    """Copy of ``config`` with the given fields replaced (``None`` values ignored)."""
    kwargs = {k: v for k, v in kwargs.items() if v is not None}
    return replace(config, **kwargs)
