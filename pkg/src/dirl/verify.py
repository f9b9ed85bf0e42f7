"""Acceptance checks shared by ``dirl verify`` and the test suite.

Each check returns a :class:`CheckResult`; nothing here raises on a failed
tolerance. Seeds are fixed in advance and never tuned.
"""

from __future__ import annotations

import math
import tempfile
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from . import analytics, market, policy, reinforce, special_math
from .market import FactorModelSpec
from .policy import PolicyParams
from .special_math import ConcentrationBounds

SEED = 20261015


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    known_failure: bool = False  # documented as unattainable; excluded from the exit status

    def line(self) -> str:
        tag = "PASS" if self.passed else ("FAIL (known)" if self.known_failure else "FAIL")
        return f"[{tag}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


@dataclass(frozen=True)
class Scale:
    quick: bool = False

    @property
    def n_se(self) -> float:
        return 5.0 if self.quick else 3.0

    def n(self, full: int, quick: int) -> int:
        return quick if self.quick else full


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


def centered_panel(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random panel whose columns are permutations of the centered rank grid."""
    grid = np.linspace(-0.5, 0.5, n)
    cols = [rng.permutation(grid) for _ in range(k)]
    return np.column_stack([np.ones(n), *cols]) if k else np.ones((n, 1))


def orthogonal_centered_panel(n: int) -> np.ndarray:
    """Two zero-mean, mutually orthogonal +/-0.5 columns (``n`` divisible by 4)."""
    if n % 4:
        raise ValueError("n must be a multiple of 4")
    c1 = np.tile([0.5, 0.5, -0.5, -0.5], n // 4)
    c2 = np.tile([0.5, -0.5, 0.5, -0.5], n // 4)
    return np.column_stack([np.ones(n), c1, c2])


# 1. moment identities ---------------------------------------------------------

def _moment_z_scores(a: np.ndarray, n_draws: int, rng: np.random.Generator, chunk: int) -> np.ndarray:
    """z-scores of five Monte-Carlo moments against their closed forms (indices 0 and 1)."""
    conc = special_math.Concentration(a)
    mean, var = special_math.dirichlet_moments(conc)
    exact = np.array([
        mean[0],
        var[0],
        special_math.expected_log_weight(conc, 0),
        special_math.expected_w_log_w(conc, 0, 0),
        special_math.expected_w_log_w(conc, 0, 1),
    ])
    # Aggregation property: (W_0, W_1, rest) ~ Dir(a_0, a_1, sigma - a_0 - a_1).
    sim = a if a.size <= 5 else np.array([a[0], a[1], conc.sigma - a[0] - a[1]])
    s1 = np.zeros(5)
    s2 = np.zeros(5)
    count = 0
    w0_all = []
    while count < n_draws:
        m = min(chunk, n_draws - count)
        logw = special_math.dirichlet_log_sample(sim, rng, size=m)
        l0, l1 = logw[:, 0], logw[:, 1]
        w0 = np.exp(l0)
        stats_ = np.column_stack([w0, w0, l0, w0 * l0, w0 * l1])
        s1 += stats_.sum(axis=0)
        s2 += (stats_**2).sum(axis=0)
        w0_all.append(w0)
        count += m
    w0 = np.concatenate(w0_all)
    est = s1 / count
    se = np.sqrt(np.maximum(s2 / count - est**2, 0.0) / count)
    dev = w0 - w0.mean()
    est[1] = dev @ dev / (count - 1)
    m4 = np.mean(dev**4)
    se[1] = math.sqrt(max(m4 - est[1] ** 2, 0.0) / count)
    return (est - exact) / se


def check_moment_identities(scale: Scale = Scale()) -> CheckResult:
    def run():
        rng = np.random.default_rng(SEED)
        dims = [2] * 20 + [5] * 20 + [100] * 10
        n_draws = scale.n(1_000_000, 100_000)
        worst, zs = 0.0, []
        for dim in dims:
            a = rng.uniform(0.2, 1.6, dim)
            z = _moment_z_scores(a, n_draws, rng, chunk=200_000)
            zs.append(z)
            worst = max(worst, float(np.max(np.abs(z))))
        zs = np.concatenate(zs)
        n_out = int(np.sum(np.abs(zs) > scale.n_se))
        ks = stats.kstest(zs, "norm").pvalue
        return n_out == 0, (
            f"{zs.size} moments, max |z| = {worst:.2f} (limit {scale.n_se:g}), "
            f"{n_out} outside; KS p-value of z vs N(0,1) = {ks:.3f}"
        )

    return _timed("moment identities", run)


# 2. score gradient -----------------------------------------------------------

def _fd_gradient(w, X, params: PolicyParams, h: float) -> np.ndarray:
    g = np.empty(params.theta.size)
    for k in range(params.theta.size):
        e = np.zeros_like(params.theta)
        e[k] = h
        up = special_math.dirichlet_log_pdf(w, policy.concentration_from_features(X, params.with_theta(params.theta + e)))
        dn = special_math.dirichlet_log_pdf(w, policy.concentration_from_features(X, params.with_theta(params.theta - e)))
        g[k] = (up - dn) / (2 * h)
    return g


def _random_policy_case(form: str, rng: np.random.Generator):
    n = int(rng.integers(2, 21))
    k = int(rng.integers(0, 5))
    X = np.column_stack([np.ones(n), rng.uniform(-0.5, 0.5, (n, k))])
    if form == "F1":
        theta = np.concatenate([[rng.uniform(0.6, 1.4)], rng.normal(0, 0.3, k)])
        theta = policy.project_feasible(theta, X, policy.DEFAULT_BOUNDS)
    else:
        theta = rng.normal(0, 0.5, k + 1)
    params = PolicyParams(theta, form)
    w = special_math.dirichlet_sample(policy.concentration_from_features(X, params), rng)
    return X, params, w


def gradient_errors(n_cases: int, rng: np.random.Generator, h: float = 1e-6) -> tuple[int, float]:
    """Count of components failing the tolerance and worst relative error."""
    bad, worst = 0, 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", policy.ConcentrationWarning)
        for form in ("F1", "F2"):
            for _ in range(n_cases):
                X, params, w = _random_policy_case(form, rng)
                g = policy.score_gradient(w, X, params)
                fd = _fd_gradient(w, X, params, h)
                err = np.abs(g - fd)
                small = np.abs(fd) < 1e-3
                rel = err / np.maximum(np.abs(fd), 1e-300)
                fail = np.where(small, err >= 1e-8, rel >= 1e-5)
                bad += int(fail.sum())
                worst = max(worst, float(np.max(np.where(small, 0.0, rel))))
    return bad, worst


def check_score_gradient(scale: Scale = Scale()) -> CheckResult:
    def run():
        rng = np.random.default_rng(SEED + 2)
        bad, worst = gradient_errors(scale.n(100, 30), rng)
        return bad == 0, f"{bad} failing components, worst relative error {worst:.2e} (limit 1e-5)"

    return _timed("score gradient vs finite differences", run)


# 3. policy gradient theorem --------------------------------------------------

def check_policy_gradient_theorem(scale: Scale = Scale()) -> CheckResult:
    def run():
        rng = np.random.default_rng(SEED + 3)
        X = centered_panel(10, 2, rng)
        params = PolicyParams([1.0, 0.8, -0.5], "F1")
        m = X @ np.array([0.0, 0.05, -0.03])
        exact = analytics.closed_form_gradient(X, params, m)
        n_ep = scale.n(100_000, 20_000)
        W = special_math.dirichlet_sample(policy.concentration_from_features(X, params), rng, size=n_ep)
        contrib = policy.score_gradient(W, X, params) * (W @ m)[:, None]
        mc = contrib.mean(axis=0)
        se = contrib.std(axis=0, ddof=1) / math.sqrt(n_ep)
        z = (mc - exact) / se
        cos = float(mc @ exact / (np.linalg.norm(mc) * np.linalg.norm(exact)))
        ok = cos > 0.99 and bool(np.all(np.abs(z) <= scale.n_se))
        return ok, f"cosine {cos:.5f} (limit 0.99), max |z| = {np.max(np.abs(z)):.2f} (limit {scale.n_se:g})"

    return _timed("policy gradient theorem", run)


# 4. Bellman recursion --------------------------------------------------------

def bellman_fixture():
    rng = np.random.default_rng(SEED + 4)
    states = (centered_panel(5, 1, rng), centered_panel(5, 1, rng))
    chain = analytics.FiniteChain(states, [[0.7, 0.3], [0.4, 0.6]], horizon=3)
    params = PolicyParams([1.0, 0.6], "F1")
    betas = [np.array([0.01, 0.04]), np.array([-0.005, -0.02])]
    f = [states[s] @ betas[s] for s in range(2)]
    return chain, params, f


def check_bellman(scale: Scale = Scale()) -> CheckResult:
    def run():
        chain, params, f = bellman_fixture()
        v = analytics.bellman_value(chain, params, 0, 0, f)
        direct = analytics.bellman_value_direct(chain, params, 0, 0, f)
        rng = np.random.default_rng(SEED + 5)
        n_roll = scale.n(100_000, 20_000)
        concs = [policy.concentration_from_features(X, params) for X in chain.states]
        state = np.zeros(n_roll, dtype=int)
        total = np.zeros(n_roll)
        P = chain.transition
        for t in range(chain.horizon):
            for s in range(len(chain.states)):
                sel = state == s
                W = special_math.dirichlet_sample(concs[s], rng, size=int(sel.sum()))
                total[sel] += W @ f[s]
            if t < chain.horizon - 1:
                u = rng.random(n_roll)
                state = np.where(u < P[state, 0], 0, 1)
        mc, se = total.mean(), total.std(ddof=1) / math.sqrt(n_roll)
        z = (mc - v) / se
        ok = abs(v - direct) <= 1e-10 and abs(z) <= scale.n_se
        return ok, f"|recursion - direct| = {abs(v - direct):.1e} (limit 1e-10), rollout z = {z:.2f} (limit {scale.n_se:g})"

    return _timed("Bellman recursion", run)


# 5. optimal quadratic allocation --------------------------------------------

def check_quadratic_allocation(scale: Scale = Scale()) -> CheckResult:
    def run():
        rng = np.random.default_rng(SEED + 6)
        worst = 0.0
        for _ in range(20):
            n, k = int(rng.integers(6, 21)), int(rng.integers(1, 4))
            X = np.column_stack([np.ones(n), rng.uniform(-0.5, 0.5, (n, k)) + rng.uniform(-0.2, 0.2, k)])
            spec = FactorModelSpec(rng.normal(0, 0.02, k + 1), np.r_[0.0, rng.uniform(0.001, 0.05, k)],
                                   rng.uniform(0.001, 0.01))
            g = rng.uniform(1.0, 5.0)
            exact = analytics.lemma1_solution(X, spec, g).theta_star
            num = analytics.lemma1_numerical(X, spec, g)
            worst = max(worst, float(np.max(np.abs(exact - num)) / np.max(np.abs(exact))))
        n = 100
        Xc = orthogonal_centered_panel(n)
        spec = FactorModelSpec([0.01, 0.01, -0.02], [0.0, 0.04, 0.01], 0.0025)
        sol = analytics.lemma1_solution(Xc, spec, 2.0)
        exact0 = (sol.theta_star_centered is not None and sol.theta_star_centered[0] == 1.0 / n
                  and abs(sol.theta_star[0] - 1.0 / n) <= 1e-12
                  and bool(np.allclose(sol.theta_star, sol.theta_star_centered, rtol=1e-10, atol=0)))
        path = []
        for dec in range(7):
            s = FactorModelSpec(spec.beta_bar, spec.sigma_beta_sq * 10.0**dec, spec.sigma_eps_sq)
            path.append(np.abs(analytics.lemma1_solution(Xc, s, 2.0).theta_star[1:]))
        path = np.array(path)
        mono = bool(np.all(np.diff(path, axis=0) < 0)) and bool(np.all(path[-1] < 1e-4 * path[0]))
        ok = worst <= 1e-6 and exact0 and mono
        return ok, (f"max relative gap to numerical maximizer {worst:.1e} (limit 1e-6), "
                    f"theta0 = 1/N exactly: {exact0}, monotone decay over 6 decades: {mono}")

    return _timed("optimal quadratic allocation", run)


# 6. equally weighted decomposition -------------------------------------------

def check_ew_decomposition(scale: Scale = Scale()) -> CheckResult:
    def run():
        rng = np.random.default_rng(SEED + 7)
        worst_f1 = 0.0
        for _ in range(50):
            n, k = int(rng.integers(2, 200)), int(rng.integers(1, 6))
            X = centered_panel(n, k, rng)
            theta = policy.project_feasible(np.r_[1.0, rng.normal(0, 0.3, k)], X, policy.DEFAULT_BOUNDS)
            alloc = policy.mean_weights(X, PolicyParams(theta, "F1"))
            worst_f1 = max(worst_f1, float(np.max(np.abs(alloc.w_bar - 1.0 / n - alloc.approx_tilde_w))),
                           abs(float(np.sum(alloc.approx_tilde_w))))
        X = centered_panel(100, 3, rng)
        direction = rng.normal(0, 1, 3)
        direction /= np.abs(direction).sum()
        norms = np.array([1e-1, 1e-2, 1e-3])
        errs = np.array([policy.mean_weights(X, PolicyParams(np.r_[0.3, s * direction], "F2")).approximation_error
                         for s in norms])
        slope = float(np.polyfit(np.log(norms), np.log(errs), 1)[0])
        ok = worst_f1 <= 1e-12 and slope >= 0.9
        return ok, f"F1 identity error {worst_f1:.1e} (limit 1e-12), F2 log-log slope {slope:.3f} (limit 0.9)"

    return _timed("equally weighted decomposition", run)


# 7. qualitative 1/N reproduction ---------------------------------------------

ZERO_PAC_SPEC = FactorModelSpec([0.01, 0.0, 0.0, 0.0], [0.0, 4e-4, 4e-4, 4e-4], 0.01)


def zero_pac_dataset(n_periods: int = 246, n_assets: int = 200, seed: int = SEED + 8) -> market.MarketDataset:
    return market.generate_synthetic(ZERO_PAC_SPEC, n_assets, n_periods, 3, np.random.default_rng(seed))


def check_one_over_n(scale: Scale = Scale()) -> CheckResult:
    def run():
        ds = zero_pac_dataset(scale.n(246, 60))
        cfg = reinforce.LearnConfig(n_episodes=scale.n(500, 100))
        rep = reinforce.run_backtest(ds, cfg)
        frac = float(np.mean(rep.max_tilt < 0.5))
        p = rep.ew_pvalue()
        ok = frac >= 0.9 and p > 0.1
        return ok, (f"{frac:.1%} of {len(rep.dates)} months within 0.5/N of 1/N (limit 90%), "
                    f"t-test p = {p:.3f} (limit > 0.1), avg {rep.avg_return:.5f} vs EW {rep.ew_avg_return:.5f}")

    return _timed("1/N reproduction on zero-PAC data", run)


# 8. signal detection ---------------------------------------------------------

SIGNAL_SPEC = FactorModelSpec([0.01, 0.05, 0.0], [0.0, 0.0, 0.0], 0.01)


def check_signal_detection(scale: Scale = Scale()) -> CheckResult:
    def run():
        ds = market.generate_synthetic(SIGNAL_SPEC, 200, 13, 2, np.random.default_rng(SEED + 9))
        theta0 = (1.0, 0.0, 0.0)
        n_seeds = 20
        ups = []
        for seed in range(n_seeds):
            cfg = reinforce.LearnConfig(n_episodes=scale.n(500, 200), seed=seed, theta_init=theta0)
            rep = reinforce.run_backtest(ds, cfg)
            ups.append(rep.theta_path[-1][1] > theta0[1])
        frac = float(np.mean(ups))
        return frac >= 0.95, f"theta_1 ended above its start in {sum(ups)}/{n_seeds} seeds (limit 95%)"

    return _timed("signal detection", run)


# 9. turnover -----------------------------------------------------------------

def check_turnover(scale: Scale = Scale()) -> CheckResult:
    def run():
        flat = FactorModelSpec([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0.0)
        ds = market.generate_synthetic(flat, 50, 24, 2, np.random.default_rng(SEED + 10))
        cfg = reinforce.LearnConfig(n_episodes=0, theta_init=(1.0, 0.0, 0.0))
        rep = reinforce.run_backtest(ds, cfg)
        frozen = rep.turnover == 0.0 and np.array_equal(rep.monthly_returns, rep.ew_returns)
        hand = reinforce.turnover([np.array([0.5, 0.5])], [np.array([0.6, 0.4])])
        # 0.6 and 0.4 are not binary fractions; the exact result on the stored inputs is 1 ulp below 0.1
        ok = frozen and abs(hand - 0.1) <= 1e-15
        return ok, f"frozen EW turnover {rep.turnover!r}, returns equal EW: {frozen}, hand fixture {hand!r} (expected 0.1)"

    return _timed("turnover", run)


# 10. high-dimension bounds ---------------------------------------------------

def check_dimension_bounds(scale: Scale = Scale()) -> CheckResult:
    def run():
        b = ConcentrationBounds(a_minus=0.5, a_plus=1.6)
        diag = special_math.check_dimension_bounds(b, 100)
        n_max = special_math.check_dimension_bounds(ConcentrationBounds(0.9, 1.6), 100).n_max
        ok = diag.ok and n_max == 108 and abs(diag.a_minus_min - math.exp(-1)) < 1e-15
        return ok, f"implied N <= {n_max} (expected 108), a_minus >= {diag.a_minus_min:.6f}, bounds ok: {diag.ok}"

    return _timed("high-dimension bound formulas", run)


def check_log_beta_range(scale: Scale = Scale()) -> CheckResult:
    """|log B(a)| <= kappa_max for random vectors inside bounds that pass the rule of thumb.

    Known to fail: the rule of thumb only caps the smallest possible scale
    N a_+ / delta, while any vector with entries in [0.5, 1.6] at N = 100 has
    scale above 50 and hence log Gamma(sigma) well beyond 100.
    """
    def run():
        b = ConcentrationBounds(a_minus=0.5, a_plus=1.6)
        assert special_math.check_dimension_bounds(b, 100).ok
        rng = np.random.default_rng(SEED + 11)
        logs = np.array([special_math.log_multivariate_beta(rng.uniform(b.a_minus, b.a_plus, 100))
                         for _ in range(scale.n(10_000, 1_000))])
        inside = float(np.mean(np.abs(logs) <= b.kappa_max))
        return inside == 1.0, (f"|log B| <= {b.kappa_max:g} for {inside:.1%} of {logs.size} vectors "
                               f"(observed range {logs.min():.1f} .. {logs.max():.1f})")

    res = _timed("log Beta within kappa_max inside passing bounds", run)
    res.known_failure = True
    return res


# 11. determinism -------------------------------------------------------------

def check_determinism(scale: Scale = Scale()) -> CheckResult:
    def run():
        from . import cli

        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            data = tmp / "data.csv"
            code = cli.main(["generate", "--out", str(data), "--n-assets", "60", "--periods", "30",
                             "--features", "2", "--seed", "5"])
            outs = []
            for run_id in ("a", "b"):
                out = tmp / run_id
                code |= cli.main(["backtest", "--data", str(data), "--out-dir", str(out), "--episodes", "20",
                                  "--seed", "7", "--n-draw", "30"])
                outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        same = outs[0] == outs[1] and len(outs[0]) >= 2
        return code == 0 and same, f"{len(outs[0])} report files byte-identical across runs: {same}"

    return _timed("determinism", run)


CHECKS: dict[str, Callable[[Scale], CheckResult]] = {
    "moments": check_moment_identities,
    "gradient": check_score_gradient,
    "pgt": check_policy_gradient_theorem,
    "bellman": check_bellman,
    "quadratic": check_quadratic_allocation,
    "decomposition": check_ew_decomposition,
    "one_over_n": check_one_over_n,
    "signal": check_signal_detection,
    "turnover": check_turnover,
    "bounds": check_dimension_bounds,
    "log_beta_range": check_log_beta_range,
    "determinism": check_determinism,
}


def run_checks(names=None, quick: bool = False, report: Callable[[str], None] | None = print) -> list[CheckResult]:
    scale = Scale(quick)
    results = []
    for name in names or CHECKS:
        res = CHECKS[name](scale)
        results.append(res)
        if report:
            report(res.line())
    return results
