import json
import logging

import numpy as np
import pytest
from scipy import special

from dirl import cli, special_math
from dirl.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VERIFY, main


@pytest.fixture
def small_data(tmp_path):
    path = tmp_path / "data.csv"
    code = main(["generate", "--out", str(path), "--n-assets", "10", "--periods", "24", "--features", "2",
                 "--seed", "1"])
    assert code == EXIT_OK
    return path


@pytest.fixture
def flat_data(tmp_path):
    path = tmp_path / "flat.csv"
    code = main(["generate", "--out", str(path), "--n-assets", "12", "--periods", "10", "--features", "2",
                 "--beta-bar", "0,0,0", "--sigma-beta-sq", "0,0,0", "--sigma-eps-sq", "0"])
    assert code == EXIT_OK
    return path


def test_generate_row_count(small_data):
    lines = small_data.read_text().splitlines()
    assert lines[0] == "date,asset_id,ret_fwd,x1,x2"
    assert len(lines) == 10 * 24 + 1


def test_generate_is_byte_identical(small_data, tmp_path):
    again = tmp_path / "again.csv"
    main(["generate", "--out", str(again), "--n-assets", "10", "--periods", "24", "--features", "2", "--seed", "1"])
    assert again.read_bytes() == small_data.read_bytes()


def test_generate_rejects_negative_variance(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path / "x.csv"), "--features", "1", "--sigma-eps-sq", "-0.1"])
    assert code == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_generate_reads_model_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 9, "model": {"n_assets": 5, "periods": 3, "features": 1,
                                                     "beta_bar": [0.01, 0.02], "sigma_beta_sq": [0, 0]}}))
    out = tmp_path / "m.csv"
    assert main(["generate", "--out", str(out), "--config", str(cfg)]) == EXIT_OK
    assert len(out.read_text().splitlines()) == 16


def test_frozen_backtest_is_equal_weight(flat_data, tmp_path):
    out = tmp_path / "bt"
    code = main(["backtest", "--data", str(flat_data), "--out-dir", str(out), "--episodes", "0",
                 "--theta-init", "1,0,0"])
    assert code == EXIT_OK
    summary = json.loads((out / "report.json").read_text())["summary"]
    assert summary["turnover"] == 0.0
    assert summary["avg_return"] == summary["ew_avg_return"]


def test_backtests_are_reproducible(small_data, tmp_path):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["backtest", "--data", str(small_data), "--out-dir", str(out), "--episodes", "5",
                     "--n-draw", "10", "--seed", "3"]) == EXIT_OK
        reports.append(((out / "report.json").read_bytes(), (out / "report.csv").read_bytes()))
    assert reports[0] == reports[1]


def test_backtest_rejects_single_step_sharpe(small_data, tmp_path, capsys):
    code = main(["backtest", "--data", str(small_data), "--out-dir", str(tmp_path / "x"), "--reward", "diff_sharpe"])
    assert code == EXIT_CONFIG
    assert "single step" in capsys.readouterr().err


def test_backtest_chronological_with_config_file(small_data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 4, "learn": {"n_episodes": 2, "protocol": "chronological",
                                                    "n_assets_per_draw": 10, "reward": {"kind": "diff_sharpe"}}}))
    out = tmp_path / "bt"
    assert main(["backtest", "--data", str(small_data), "--out-dir", str(out), "--config", str(cfg)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["protocol"] == "chronological"
    assert report["config"]["seed"] == 4
    assert report["config"]["reward"]["kind"] == "diff_sharpe"


def test_unknown_learn_option(small_data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learn": {"episodez": 3}}))
    assert main(["backtest", "--data", str(small_data), "--out-dir", str(tmp_path / "x"),
                 "--config", str(cfg)]) == EXIT_CONFIG


def test_bad_config_file(small_data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    assert main(["backtest", "--data", str(small_data), "--out-dir", str(tmp_path / "x"),
                 "--config", str(cfg)]) == EXIT_CONFIG


def test_missing_data_file(tmp_path):
    assert main(["backtest", "--data", str(tmp_path / "none.csv"), "--out-dir", str(tmp_path)]) == EXIT_DATA


def test_malformed_data_file(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("asset_id,ret_fwd\nA,0.1\n")
    assert main(["backtest", "--data", str(bad), "--out-dir", str(tmp_path)]) == EXIT_DATA


def test_usage_error_exit_code(capsys):
    assert main(["backtest"]) == EXIT_CONFIG
    assert main(["nonsense"]) == EXIT_CONFIG


def test_diagnose_writes_outputs(tmp_path):
    data = tmp_path / "d.csv"
    main(["generate", "--out", str(data), "--n-assets", "30", "--periods", "40", "--features", "2",
          "--beta-bar", "0.01,0.03,0", "--sigma-beta-sq", "0,1e-4,1e-4", "--sigma-eps-sq", "1e-4"])
    bt = tmp_path / "bt"
    assert main(["backtest", "--data", str(data), "--out-dir", str(bt), "--episodes", "5", "--n-draw", "20"]) == EXIT_OK
    out = tmp_path / "diag"
    assert main(["diagnose", "--data", str(data), "--out-dir", str(out), "--window", "12",
                 "--theta-path", str(bt / "report.csv")]) == EXIT_OK
    rows = (out / "diagnostics.csv").read_text().splitlines()
    assert rows[0] == "date,feature,beta_hat,theta_tilde,delta_theta"
    assert len(rows) == 1 + 40 * 3
    summary = json.loads((out / "diagnostics.json").read_text())
    assert summary["mean_beta"]["x1"] == pytest.approx(0.03, abs=0.01)
    assert set(summary["slope_tests"]) == {"cst", "x1", "x2"}


def test_diagnose_needs_window(small_data, tmp_path):
    assert main(["diagnose", "--data", str(small_data), "--out-dir", str(tmp_path), "--window", "50"]) == EXIT_DATA


def test_verify_gradient_check_passes(capsys):
    assert main(["verify", "--quick", "--only", "gradient"]) == EXIT_OK
    assert "[PASS]" in capsys.readouterr().out


def test_verify_catches_faulty_digamma(monkeypatch, capsys):
    monkeypatch.setattr(special_math, "digamma", lambda x: special.digamma(x) + 1e-3 * np.asarray(x))
    assert main(["verify", "--quick", "--only", "gradient"]) == EXIT_VERIFY
    assert "[FAIL]" in capsys.readouterr().out


def test_verify_known_failure_does_not_fail_run(capsys):
    assert main(["verify", "--quick", "--only", "log_beta_range"]) == EXIT_OK
    assert "known failure" in capsys.readouterr().out


def test_log_level_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("DIRL_LOG", "debug")
    root = logging.getLogger()
    saved = root.level, list(root.handlers)
    root.handlers.clear()
    try:
        main(["generate", "--out", str(tmp_path / "x.csv"), "--n-assets", "4", "--periods", "2", "--features", "1"])
        assert root.level == logging.DEBUG
    finally:
        root.handlers[:] = saved[1]
        root.setLevel(saved[0])


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "dirl", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "backtest" in res.stdout
    assert cli.build_parser().prog == "dirl"
