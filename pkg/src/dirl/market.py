"""Characteristics panels, returns, synthetic factor-model markets and CSV I/O.

Dates are ``YYYY-MM`` strings. The return slice paired with the panel dated
``t`` holds returns over ``(t, t+1]`` and is itself dated ``t+1``.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    DegenerateColumnError,
    DimensionError,
    DomainError,
    InsufficientHistoryError,
    InvalidConfigError,
    SchemaError,
)

log = logging.getLogger(__name__)

RETURN_FLOOR = -0.99
INTERVALS = ("centered", "unit")
NOISE_LAWS = ("gaussian", "student-t")


def parse_month(date: str) -> tuple[int, int]:
    try:
        year, month = str(date).split("-")
        y, m = int(year), int(month)
    except ValueError as exc:
        raise SchemaError(f"date {date!r} is not in YYYY-MM form") from exc
    if not (1 <= m <= 12) or len(year) != 4 or len(month) != 2:
        raise SchemaError(f"date {date!r} is not in YYYY-MM form")
    return y, m


def add_months(date: str, k: int) -> str:
    y, m = parse_month(date)
    idx = y * 12 + (m - 1) + k
    return f"{idx // 12:04d}-{idx % 12 + 1:02d}"


def month_of(date: str) -> int:
    return parse_month(date)[1]


@dataclass(frozen=True)
class FeaturePanel:
    """Characteristics ``X_t`` (N x (K+1), first column ones) at one date."""

    date: str
    features: np.ndarray
    asset_ids: tuple[str, ...]
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.array(self.features, dtype=float)
        if X.ndim != 2 or X.shape[1] < 1:
            raise DimensionError(f"features must be a 2-D matrix, got shape {X.shape}")
        if not np.all(X[:, 0] == 1.0):
            raise DimensionError("first characteristic column must be all ones")
        ids = tuple(str(a) for a in self.asset_ids)
        if len(ids) != X.shape[0]:
            raise DimensionError(f"{len(ids)} asset ids for {X.shape[0]} rows")
        names = tuple(self.feature_names) or ("cst",) + tuple(f"x{k}" for k in range(1, X.shape[1]))
        if len(names) != X.shape[1] or names[0] != "cst":
            raise DimensionError("feature_names must have K+1 labels starting with 'cst'")
        parse_month(self.date)
        X.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "asset_ids", ids)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_assets(self) -> int:
        return self.features.shape[0]

    @property
    def k(self) -> int:
        return self.features.shape[1] - 1

    def subset(self, index) -> "FeaturePanel":
        index = np.asarray(index, dtype=int)
        return FeaturePanel(self.date, self.features[index],
                            tuple(self.asset_ids[i] for i in index), self.feature_names)


@dataclass(frozen=True)
class ReturnSlice:
    """Total returns over ``(date - 1 month, date]`` for the listed assets."""

    date: str
    returns: np.ndarray
    asset_ids: tuple[str, ...]

    def __post_init__(self):
        r = np.array(self.returns, dtype=float).reshape(-1)
        ids = tuple(str(a) for a in self.asset_ids)
        if len(ids) != r.size:
            raise DimensionError(f"{len(ids)} asset ids for {r.size} returns")
        if np.any(~(r > -1.0)):
            raise DomainError("returns must be finite and greater than -1")
        parse_month(self.date)
        r.setflags(write=False)
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "asset_ids", ids)

    def subset(self, index) -> "ReturnSlice":
        index = np.asarray(index, dtype=int)
        return ReturnSlice(self.date, self.returns[index], tuple(self.asset_ids[i] for i in index))


@dataclass(frozen=True)
class FactorModelSpec:
    """Linear factor model ``r = X beta + eps`` with random loadings.

    ``beta ~ N(beta_bar, diag(sigma_beta_sq))`` is redrawn every period when
    ``randomize`` is set. Idiosyncratic noise has variance ``sigma_eps_sq``
    and is Gaussian or a Student-t with ``nu`` degrees of freedom rescaled to
    that variance.
    """

    beta_bar: np.ndarray
    sigma_beta_sq: np.ndarray
    sigma_eps_sq: float
    noise_law: str = "gaussian"
    nu: float = 5.0
    randomize: bool = True

    def __post_init__(self):
        bb = np.array(self.beta_bar, dtype=float).reshape(-1)
        sb = np.array(self.sigma_beta_sq, dtype=float).reshape(-1)
        if bb.size < 1 or sb.size != bb.size:
            raise InvalidConfigError("beta_bar and sigma_beta_sq must have the same length K+1")
        if not (np.all(np.isfinite(bb)) and np.all(np.isfinite(sb))):
            raise InvalidConfigError("factor model parameters must be finite")
        if np.any(sb < 0):
            raise InvalidConfigError("loading variances must be nonnegative")
        if sb[0] != 0:
            raise InvalidConfigError("the constant loading is not randomized: sigma_beta_sq[0] must be 0")
        if not (self.sigma_eps_sq >= 0) or not math.isfinite(self.sigma_eps_sq):
            raise InvalidConfigError("sigma_eps_sq must be a nonnegative finite number")
        if self.noise_law not in NOISE_LAWS:
            raise InvalidConfigError(f"noise_law must be one of {NOISE_LAWS}")
        if self.noise_law == "student-t" and not self.nu > 2:
            raise InvalidConfigError("student-t noise needs nu > 2 for a finite variance")
        bb.setflags(write=False)
        sb.setflags(write=False)
        object.__setattr__(self, "beta_bar", bb)
        object.__setattr__(self, "sigma_beta_sq", sb)
        object.__setattr__(self, "sigma_eps_sq", float(self.sigma_eps_sq))

    @property
    def k(self) -> int:
        return self.beta_bar.size - 1


@dataclass(frozen=True)
class MarketDataset:
    """Monthly panels with the returns that follow each of them.

    ``returns[i]`` is realized over ``(panels[i].date, panels[i].date + 1]``
    on exactly the assets of ``panels[i]``. The last panel may lack returns.
    """

    panels: tuple[FeaturePanel, ...]
    returns: tuple[ReturnSlice, ...]
    dropped_rows: int = 0
    betas: tuple[np.ndarray, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        panels, returns = tuple(self.panels), tuple(self.returns)
        if not panels:
            raise AlignmentError("dataset has no panels")
        if len(returns) not in (len(panels), len(panels) - 1):
            raise AlignmentError(f"{len(returns)} return slices for {len(panels)} panels")
        for prev, cur in zip(panels, panels[1:]):
            if cur.date != add_months(prev.date, 1):
                raise AlignmentError(f"panel dates must be consecutive months: {prev.date} -> {cur.date}")
        k = panels[0].k
        for p, r in zip(panels, returns):
            if p.k != k:
                raise AlignmentError(f"panel {p.date} has {p.k} characteristics, expected {k}")
            if r.date != add_months(p.date, 1):
                raise AlignmentError(f"returns dated {r.date} do not follow panel {p.date}")
            if r.asset_ids != p.asset_ids:
                raise AlignmentError(f"returns dated {r.date} are not on the assets of panel {p.date}")
        object.__setattr__(self, "panels", panels)
        object.__setattr__(self, "returns", returns)

    @property
    def dates(self) -> list[str]:
        return [p.date for p in self.panels]

    @property
    def k(self) -> int:
        return self.panels[0].k

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.panels[0].feature_names

    def index_of(self, date: str) -> int:
        for i, p in enumerate(self.panels):
            if p.date == date:
                return i
        raise KeyError(f"date {date} not in dataset")

    def n_return_periods(self) -> int:
        return len(self.returns)


def preprocess_uniform(raw_panel: FeaturePanel, interval: str = "centered") -> FeaturePanel:
    """Replace each non-constant column by its cross-sectional rank on a grid.

    Ranks map to ``(rank - 1)/(N - 1)`` on ``[0, 1]`` (``unit``) or that
    value minus one half (``centered``). Ties are broken by asset id.
    """
    if interval not in INTERVALS:
        raise InvalidConfigError(f"interval must be one of {INTERVALS}")
    X = np.array(raw_panel.features, dtype=float)
    n = X.shape[0]
    if n < 2:
        raise DimensionError("rank preprocessing needs at least two assets")
    if np.any(~np.isfinite(X)):
        raise SchemaError("raw characteristics contain missing values")
    ids = np.array(raw_panel.asset_ids)
    grid = np.arange(n) / (n - 1)
    if interval == "centered":
        grid = grid - 0.5
    for k in range(1, X.shape[1]):
        col = X[:, k]
        if np.unique(col).size < 2:
            raise DegenerateColumnError(
                f"column {raw_panel.feature_names[k]!r} at {raw_panel.date} has fewer than 2 distinct values"
            )
        order = np.lexsort((ids, col))
        out = np.empty(n)
        out[order] = grid
        X[:, k] = out
    return FeaturePanel(raw_panel.date, X, raw_panel.asset_ids, raw_panel.feature_names)


def _draw_noise(spec: FactorModelSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    scale = math.sqrt(spec.sigma_eps_sq)
    if spec.noise_law == "gaussian":
        return scale * rng.standard_normal(n)
    return scale * math.sqrt((spec.nu - 2.0) / spec.nu) * rng.standard_t(spec.nu, size=n)


def generate_synthetic(spec: FactorModelSpec, n_assets: int, n_periods: int, k_features: int,
                       rng: np.random.Generator, start: str = "2000-01",
                       interval: str = "centered", redraw_prob: float = 1.0) -> MarketDataset:
    """Simulate ``n_periods`` monthly panels with next-month returns.

    Characteristics are uniform draws rank-transformed onto the grid. With
    ``redraw_prob < 1`` each column is redrawn with that probability per
    month and otherwise carried over, which makes characteristics persistent.
    """
    if n_assets < 2 or n_periods < 2:
        raise DomainError("n_assets and n_periods must both be at least 2")
    if k_features != spec.k:
        raise DimensionError(f"model has {spec.k} characteristics, asked for {k_features}")
    if not 0.0 <= redraw_prob <= 1.0:
        raise InvalidConfigError("redraw_prob must lie in [0, 1]")
    ids = tuple(f"A{n:05d}" for n in range(n_assets))
    names = ("cst",) + tuple(f"x{k}" for k in range(1, k_features + 1))
    sd_beta = np.sqrt(spec.sigma_beta_sq)
    raw = rng.random((n_assets, k_features))
    panels, slices, betas = [], [], []
    truncated = 0
    date = start
    for t in range(n_periods):
        if t > 0 and k_features:
            redraw = rng.random(k_features) < redraw_prob
            raw[:, redraw] = rng.random((n_assets, int(redraw.sum())))
        X = np.hstack([np.ones((n_assets, 1)), raw])
        panel = preprocess_uniform(FeaturePanel(date, X, ids, names), interval)
        beta = spec.beta_bar + sd_beta * rng.standard_normal(spec.k + 1) if spec.randomize else spec.beta_bar.copy()
        r = panel.features @ beta + _draw_noise(spec, n_assets, rng)
        low = r < RETURN_FLOOR
        if np.any(low):
            truncated += int(low.sum())
            r = np.where(low, RETURN_FLOOR, r)
        panels.append(panel)
        slices.append(ReturnSlice(add_months(date, 1), r, ids))
        betas.append(beta)
        date = add_months(date, 1)
    if truncated:
        warnings.warn(f"{truncated} simulated returns truncated at {RETURN_FLOOR}", RuntimeWarning, stacklevel=2)
    return MarketDataset(tuple(panels), tuple(slices), 0, tuple(betas))


REQUIRED_COLUMNS = ("date", "asset_id", "ret_fwd")


def _to_float(text: str, where: str) -> float:
    if text.strip() == "":
        return math.nan
    try:
        return float(text)
    except ValueError as exc:
        raise SchemaError(f"unparseable number {text!r} at {where}") from exc


def load_csv(path) -> MarketDataset:
    """Read a ``date,asset_id,ret_fwd,<features>`` file.

    Rows with a missing characteristic are dropped (counted in
    ``dropped_rows``), as are rows with a missing forward return on a date
    where other assets have one. Only the last date may lack returns
    entirely. Characteristics are used as written, without re-ranking.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration as exc:
            raise SchemaError(f"{path} is empty") from exc
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path} lacks the required column {col!r}")
        if header[:3] != list(REQUIRED_COLUMNS):
            raise SchemaError(f"{path}: header must start with date,asset_id,ret_fwd")
        names = header[3:]
        by_date: dict[str, list[tuple[str, float, list[float]]]] = {}
        seen = set()
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{lineno} has {len(row)} fields, expected {len(header)}")
            date, asset = row[0].strip(), row[1].strip()
            parse_month(date)
            if (date, asset) in seen:
                raise AlignmentError(f"{path}:{lineno} duplicates asset {asset} at {date}")
            seen.add((date, asset))
            ret = _to_float(row[2], f"{path}:{lineno}")
            feats = [_to_float(v, f"{path}:{lineno}") for v in row[3:]]
            if any(math.isnan(v) for v in feats):
                dropped += 1
                continue
            by_date.setdefault(date, []).append((asset, ret, feats))
    if not by_date:
        raise SchemaError(f"{path} has no usable rows")
    dates = sorted(by_date, key=parse_month)
    panels, slices = [], []
    for i, date in enumerate(dates):
        rows = by_date[date]
        has_ret = [not math.isnan(r) for _, r, _ in rows]
        last = i == len(dates) - 1
        if not any(has_ret):
            if not last:
                raise AlignmentError(f"no forward returns at {date} although later dates exist")
        elif not all(has_ret):
            dropped += sum(1 for h in has_ret if not h)
            rows = [row for row, h in zip(rows, has_ret) if h]
        ids = tuple(a for a, _, _ in rows)
        X = np.hstack([np.ones((len(rows), 1)), np.array([f for _, _, f in rows], dtype=float).reshape(len(rows), -1)])
        panels.append(FeaturePanel(date, X, ids, ("cst", *names)))
        if any(has_ret):
            slices.append(ReturnSlice(add_months(date, 1), [r for _, r, _ in rows], ids))
    if dropped:
        log.info("dropped %d incomplete rows from %s", dropped, path)
    return MarketDataset(tuple(panels), tuple(slices), dropped)


def save_csv(dataset: MarketDataset, path) -> None:
    """Write ``dataset`` in the schema read by :func:`load_csv` (lossless floats)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", "asset_id", "ret_fwd", *dataset.feature_names[1:]])
        for i, panel in enumerate(dataset.panels):
            rets = dataset.returns[i].returns if i < len(dataset.returns) else None
            for n, asset in enumerate(panel.asset_ids):
                ret = format(rets[n], ".17g") if rets is not None else ""
                writer.writerow([panel.date, asset, ret, *(format(v, ".17g") for v in panel.features[n, 1:])])


def sample_universe(dataset: MarketDataset, date: str, n_assets: int, rng: np.random.Generator,
                    with_replacement: bool = True) -> np.ndarray:
    """Row indices of ``n_assets`` assets drawn from the panel at ``date``."""
    panel = dataset.panels[dataset.index_of(date)]
    if n_assets < 1:
        raise DomainError("n_assets must be positive")
    if not with_replacement and n_assets > panel.n_assets:
        raise DomainError(f"cannot draw {n_assets} distinct assets out of {panel.n_assets}")
    return rng.choice(panel.n_assets, size=n_assets, replace=with_replacement)


def realized_pac(panel: FeaturePanel, next_returns, feature: int) -> float:
    """Cross-sectional mean of ``r_{t+1,n} x_{t,n}^{(k)}``."""
    if isinstance(next_returns, ReturnSlice):
        if next_returns.asset_ids != panel.asset_ids:
            raise AlignmentError("returns and characteristics cover different assets")
        if next_returns.date != add_months(panel.date, 1):
            raise AlignmentError(f"returns dated {next_returns.date} do not follow panel {panel.date}")
        r = next_returns.returns
    else:
        r = np.asarray(next_returns, dtype=float)
        if r.shape != (panel.n_assets,):
            raise AlignmentError(f"{r.size} returns for {panel.n_assets} assets")
    if not 0 <= feature <= panel.k:
        raise IndexError(f"feature {feature} out of range for K={panel.k}")
    return float(np.mean(r * panel.features[:, feature]))


def realized_pac_annual(dataset: MarketDataset, date: str, feature: int) -> float:
    """Average of the monthly realized PAC over the 12 panels ending at ``date``."""
    end = dataset.index_of(date)
    if end < 11 or end >= len(dataset.returns):
        raise InsufficientHistoryError(f"12 months of panels with returns are needed up to {date}")
    return float(np.mean([realized_pac(dataset.panels[i], dataset.returns[i], feature)
                          for i in range(end - 11, end + 1)]))
