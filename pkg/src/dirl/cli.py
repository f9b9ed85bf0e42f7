"""Command-line entry point: ``dirl generate|backtest|diagnose|verify``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 failed
verification. Options may come from a JSON file (``--config``); explicit
flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analytics, market, reinforce, verify
from .errors import (
    AlignmentError,
    DegenerateColumnError,
    DimensionError,
    DomainError,
    InsufficientHistoryError,
    InvalidConfigError,
    SchemaError,
    SingularDesignError,
)
from .rewards import RewardConfig
from .special_math import ConcentrationBounds

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
DATA_ERRORS = (SchemaError, AlignmentError, DegenerateColumnError, InsufficientHistoryError,
               SingularDesignError, FileNotFoundError, IsADirectoryError)
CONFIG_ERRORS = (InvalidConfigError, DomainError, DimensionError)

log = logging.getLogger("dirl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dirl", description="Dirichlet-policy REINFORCE for characteristics-based portfolios")
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with default options")
    common.add_argument("--seed", type=int, help="seed of every random stream")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="simulate a factor-model dataset")
    gen.add_argument("--out", type=Path, required=True, help="CSV file to write")
    gen.add_argument("--n-assets", type=int)
    gen.add_argument("--periods", type=int)
    gen.add_argument("--features", type=int)
    gen.add_argument("--beta-bar", type=_floats, help="K+1 mean loadings, constant first")
    gen.add_argument("--sigma-beta-sq", type=_floats, help="K+1 loading variances (first must be 0)")
    gen.add_argument("--sigma-eps-sq", type=float)
    gen.add_argument("--noise", choices=market.NOISE_LAWS)
    gen.add_argument("--nu", type=float)
    gen.add_argument("--start", help="first date, YYYY-MM")
    gen.add_argument("--interval", choices=market.INTERVALS)
    gen.add_argument("--redraw-prob", type=float, help="monthly probability of redrawing a characteristic")

    bt = sub.add_parser("backtest", parents=[common], help="walk-forward learning and allocation")
    bt.add_argument("--data", type=Path, required=True)
    bt.add_argument("--out-dir", type=Path, required=True)
    _learn_flags(bt)

    dg = sub.add_parser("diagnose", parents=[common], help="PAC, cross-sectional betas and scaled thetas")
    dg.add_argument("--data", type=Path, required=True)
    dg.add_argument("--out-dir", type=Path, required=True)
    dg.add_argument("--window", type=int, default=24, help="months for the loading-variance estimate")
    dg.add_argument("--gamma-risk", type=float, default=2.0)
    dg.add_argument("--theta-path", type=Path, help="backtest CSV whose theta columns are compared")

    vf = sub.add_parser("verify", parents=[common], help="run the acceptance checks")
    vf.add_argument("--quick", action="store_true", help="smaller samples, 5-SE tolerances")
    vf.add_argument("--only", action="append", choices=sorted(verify.CHECKS), help="run only this check")
    return parser


def _learn_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--episodes", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--gamma", type=float, help="reward discount in (0, 1]")
    p.add_argument("--reward", choices=("return", "diff_sharpe"))
    p.add_argument("--protocol", choices=("bootstrap", "chrono", "chronological"))
    p.add_argument("--policy", type=str.upper, choices=("F1", "F2"))
    p.add_argument("--a-min", type=float)
    p.add_argument("--a-max", type=float)
    p.add_argument("--theta-init", type=_floats)
    p.add_argument("--n-draw", type=int, help="assets drawn per episode step")
    p.add_argument("--reinitialize", action="store_true", default=None)


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise InvalidConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InvalidConfigError("config file must hold a JSON object")
    return cfg


def _pick(flag, cfg: dict, key: str, default=None):
    return flag if flag is not None else cfg.get(key, default)


def learn_config(args, cfg: dict) -> reinforce.LearnConfig:
    learn = dict(cfg.get("learn", {}))
    reward = dict(learn.pop("reward", {}))
    bounds = dict(learn.pop("bounds", {}))
    reward_cfg = RewardConfig(
        kind=_pick(args.reward, reward, "kind", "return"),
        kappa=_pick(args.kappa, reward, "kappa", 0.1),
        gamma=_pick(args.gamma, reward, "gamma", 1.0),
    )
    bounds_cfg = ConcentrationBounds(
        a_minus=_pick(args.a_min, bounds, "a_minus", 0.2),
        a_plus=_pick(args.a_max, bounds, "a_plus", 1.6),
        kappa_max=bounds.get("kappa_max", 100.0),
        delta=bounds.get("delta", 8.0),
    )
    overrides = {
        "n_episodes": args.episodes,
        "learning_rate": args.eta,
        "protocol": args.protocol,
        "form": args.policy,
        "theta_init": args.theta_init,
        "n_assets_per_draw": args.n_draw,
        "reinitialize": args.reinitialize,
        "seed": _pick(args.seed, cfg, "seed"),
    }
    learn.update({k: v for k, v in overrides.items() if v is not None})
    learn["reward"] = reward_cfg
    learn["bounds"] = bounds_cfg
    unknown = set(learn) - set(reinforce.LearnConfig.__dataclass_fields__)
    if unknown:
        raise InvalidConfigError(f"unknown learning options: {sorted(unknown)}")
    return reinforce.LearnConfig(**learn)


def cmd_generate(args, cfg: dict) -> int:
    model = dict(cfg.get("model", {}))
    k = _pick(args.features, model, "features", 3)
    beta_bar = _pick(args.beta_bar, model, "beta_bar", [0.01] + [0.0] * k)
    sigma_beta_sq = _pick(args.sigma_beta_sq, model, "sigma_beta_sq", [0.0] + [4e-4] * k)
    spec = market.FactorModelSpec(
        beta_bar=beta_bar,
        sigma_beta_sq=sigma_beta_sq,
        sigma_eps_sq=_pick(args.sigma_eps_sq, model, "sigma_eps_sq", 0.01),
        noise_law=_pick(args.noise, model, "noise_law", "gaussian"),
        nu=_pick(args.nu, model, "nu", 5.0),
    )
    n_assets = _pick(args.n_assets, model, "n_assets", 200)
    periods = _pick(args.periods, model, "periods", 246)
    seed = _pick(args.seed, cfg, "seed", 42)
    ds = market.generate_synthetic(
        spec, n_assets, periods, k, np.random.default_rng(seed),
        start=_pick(args.start, model, "start", "2000-01"),
        interval=_pick(args.interval, model, "interval", "centered"),
        redraw_prob=_pick(args.redraw_prob, model, "redraw_prob", 1.0),
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    market.save_csv(ds, args.out)
    pacs = [np.mean([market.realized_pac(p, r, j) for p, r in zip(ds.panels, ds.returns)]) for j in range(k + 1)]
    print(f"wrote {args.out}: N={n_assets} K={k} T={periods}")
    for name, pac in zip(ds.feature_names, pacs):
        print(f"  mean realized PAC {name}: {pac:.6f}")
    return EXIT_OK


def cmd_backtest(args, cfg: dict) -> int:
    config = learn_config(args, cfg)
    ds = market.load_csv(args.data)
    report = reinforce.run_backtest(ds, config)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    reinforce.write_report_json(report, args.out_dir / "report.json")
    reinforce.write_report_csv(report, args.out_dir / "report.csv")
    s = report.summary()
    print(f"months {s['months']}  protocol {config.protocol}  policy {config.form}")
    print(f"avg return {s['avg_return']:.6f} (EW {s['ew_avg_return']:.6f}, diff {s['avg_return'] - s['ew_avg_return']:+.6f})")
    print(f"sharpe     {s['sharpe']:.4f} (EW {s['ew_sharpe']:.4f}, diff {s['sharpe'] - s['ew_sharpe']:+.4f})")
    print(f"turnover   {s['turnover']:.6f} (EW {s['ew_turnover']:.6f})")
    print(f"t-test vs EW p-value {s['ew_pvalue']:.4f}")
    return EXIT_OK


def _read_theta_path(path: Path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SchemaError(f"{path} has no rows")
    cols = sorted((c for c in rows[0] if c.startswith("theta_")), key=lambda c: int(c.split("_")[1]))
    if not cols:
        raise SchemaError(f"{path} has no theta_ columns")
    return [r["date"] for r in rows], np.array([[float(r[c]) for c in cols] for r in rows])


def cmd_diagnose(args, cfg: dict) -> int:
    ds = market.load_csv(args.data)
    n_ret = len(ds.returns)
    if n_ret < args.window:
        raise InsufficientHistoryError(f"need at least {args.window} months with returns")
    betas, resid, sx, ns = [], [], [], []
    for p, r in zip(ds.panels[:n_ret], ds.returns):
        b, s2 = analytics.cross_sectional_betas(p, r)
        betas.append(b)
        resid.append(s2)
        sx.append(analytics.characteristic_variances(p))
        ns.append(p.n_assets)
    tilde = analytics.scaled_theta_series(betas, resid, sx, ns, args.window, args.gamma_risk)
    dates = [r.date for r in ds.returns]
    delta = np.full_like(tilde, np.nan)
    tests = []
    if args.theta_path is not None:
        th_dates, th = _read_theta_path(args.theta_path)
        pos = {d: i for i, d in enumerate(dates)}
        aligned = np.full_like(tilde, np.nan)
        for i, d in enumerate(th_dates):
            if d in pos:
                aligned[pos[d]] = th[i]
        delta[1:] = np.diff(aligned, axis=0)
        ok = np.all(np.isfinite(delta) & np.isfinite(tilde), axis=1)
        if ok.sum() >= 3:
            tests = analytics.regress_features(tilde[ok], delta[ok])
    rows = [(d, name, betas[t][j], tilde[t][j], delta[t][j])
            for t, d in enumerate(dates) for j, name in enumerate(ds.feature_names)]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    analytics.write_diagnostics_csv(rows, args.out_dir / "diagnostics.csv")
    pac_monthly = {name: [market.realized_pac(p, r, j) for p, r in zip(ds.panels, ds.returns)]
                   for j, name in enumerate(ds.feature_names)}
    pac_annual = {}
    for j, name in enumerate(ds.feature_names):
        pac_annual[name] = {ds.panels[i].date: market.realized_pac_annual(ds, ds.panels[i].date, j)
                            for i in range(11, n_ret) if market.month_of(ds.panels[i].date) == 12}
    summary = {
        "mean_beta": {n: float(np.mean([b[j] for b in betas])) for j, n in enumerate(ds.feature_names)},
        "mean_pac": {n: float(np.mean(v)) for n, v in pac_monthly.items()},
        "annual_pac": pac_annual,
        "slope_tests": {n: {"slope": t.slope, "intercept": t.intercept, "pvalue": t.pvalue, "n": t.n}
                        for n, t in zip(ds.feature_names, tests)},
    }
    (args.out_dir / "diagnostics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                   encoding="utf-8")
    for name in ds.feature_names:
        print(f"{name}: mean beta {summary['mean_beta'][name]:+.6f}  mean PAC {summary['mean_pac'][name]:+.6f}")
    for name, t in zip(ds.feature_names, tests):
        print(f"{name}: slope of dtheta on theta_tilde {t.slope:+.4f} (p = {t.pvalue:.3f}, n = {t.n})")
    return EXIT_OK


def cmd_verify(args, cfg: dict) -> int:
    results = verify.run_checks(args.only, quick=args.quick)
    failed = [r.name for r in results if not r.passed and not r.known_failure]
    known = [r.name for r in results if not r.passed and r.known_failure]
    passed = len(results) - len(failed) - len(known)
    print(f"{passed}/{len(results)} checks passed" + (f", {len(known)} known failure(s): {', '.join(known)}" if known else ""))
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"generate": cmd_generate, "backtest": cmd_backtest, "diagnose": cmd_diagnose, "verify": cmd_verify}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DIRL_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"dirl: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CONFIG_ERRORS as exc:
        print(f"dirl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"dirl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
