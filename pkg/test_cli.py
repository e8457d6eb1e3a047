#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
命令行入口测试：退出码与 run -> attack -> report 流程
"""

import json
import os

import pandas as pd
import pytest

from cli.app import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from great.core import selftest
from great.core.attacks import SWEEP_COLUMNS
from great.core.config_manager import OUTPUT_ROOT_ENV
from great.core.metrics_manager import REPORT_FILE
from great.core.selftest import CheckResult

TINY = {
    "pipeline": "baseline",
    "dataset": {"kind": "synthetic_classification", "n_train": 32, "n_test": 16, "classes": 3, "shape": [4]},
    "model": {"builder": "mlp", "hidden": [6]},
    "training": {"epochs": 1, "batch_size": 16},
    "attacks": {"epsilons": [0.0, 0.1], "specs": [{"k": 1}], "n_eval": 16},
}


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "runs"))
    return tmp_path / "runs"


def _write_config(tmp_path, name, **overrides):
    data = dict(TINY, output_dir=name, **overrides)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def _payload(capsys):
    return json.loads(capsys.readouterr().out)


def test_run_attack_report_flow(tmp_path, output_root, capsys):
    assert main(["run", "--config", _write_config(tmp_path, "base")]) == EXIT_OK
    payload = _payload(capsys)
    assert payload["success"] is True
    checkpoint = payload["runs"][0]["checkpoint_paths"][0]

    sweep_path = tmp_path / "attack.csv"
    code = main(["attack", "--checkpoint", checkpoint, "--epsilons", "0,0.05", "--k", "3",
                 "--mode", "targeted-worst", "--n-eval", "8", "--output", str(sweep_path)])
    assert code == EXIT_OK
    assert _payload(capsys)["success"] is True
    frame = pd.read_csv(sweep_path)
    assert list(frame.columns) == SWEEP_COLUMNS
    assert set(frame["attack"]) == {"ifgsm"}
    assert list(frame["method"].unique()) == ["model"]

    assert main(["report", "--dir", str(output_root)]) == EXIT_OK
    assert _payload(capsys)["methods"] == ["baseline"]
    assert (output_root / REPORT_FILE).exists()


def test_run_rejects_bad_configs(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pipeline": "baseline", "surprise": True}), encoding="utf-8")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert _payload(capsys)["success"] is False

    first = _write_config(tmp_path, "same")
    second = tmp_path / "copy.json"
    second.write_text(open(first, encoding="utf-8").read(), encoding="utf-8")
    assert main(["run", "--config", first, "--config", str(second)]) == EXIT_CONFIG


def test_run_numerical_abort_exit_code(tmp_path, monkeypatch, capsys):
    from great.core import pipeline_runner
    from great.core.tape import NonFiniteError

    def explode(*args, **kwargs):
        raise NonFiniteError("梯度含 NaN", kind="backward")

    monkeypatch.setattr(pipeline_runner, "supervised_step", explode)
    assert main(["run", "--config", _write_config(tmp_path, "nan")]) == EXIT_NUMERICAL
    assert _payload(capsys)["success"] is False


def test_run_value_error_exit_code(tmp_path, monkeypatch, capsys):
    """流水线内部抛出的 ValueError 归为配置错误，不能以异常栈退出"""
    from great.core import pipeline_runner

    def mismatch(*args, **kwargs):
        raise ValueError("输入形状 (16, 4) 与模型不匹配")

    monkeypatch.setattr(pipeline_runner, "supervised_step", mismatch)
    assert main(["run", "--config", _write_config(tmp_path, "shape")]) == EXIT_CONFIG
    payload = _payload(capsys)
    assert payload["success"] is False
    assert "形状" in payload["error"]


def test_attack_errors(tmp_path, capsys):
    assert main(["attack", "--checkpoint", str(tmp_path / "missing.ckpt")]) == EXIT_CONFIG
    capsys.readouterr()
    assert main(["attack", "--checkpoint", str(tmp_path / "x.ckpt"), "--epsilons", "-1"]) == EXIT_CONFIG


def test_report_without_sweeps(tmp_path, capsys):
    assert main(["report", "--dir", str(tmp_path)]) == EXIT_CONFIG
    assert _payload(capsys)["success"] is False


def test_selftest_exit_codes(monkeypatch, capsys):
    assert main(["selftest", "--suite", "invariants"]) == EXIT_OK
    checks = _payload(capsys)["checks"]
    assert checks and all(c["passed"] for c in checks)

    monkeypatch.setitem(selftest.SUITES, "invariants",
                        lambda: [CheckResult("invariants", "总是失败", 1.0, 0.0, False)])
    assert main(["selftest", "--suite", "invariants"]) == EXIT_NUMERICAL
    assert _payload(capsys)["success"] is False


@pytest.mark.slow
def test_parallel_runs(tmp_path, output_root, capsys):
    configs = [_write_config(tmp_path, f"seed{seed}", seed=seed) for seed in (0, 1)]
    assert main(["run", "--jobs", "2", "--config", configs[0], "--config", configs[1]]) == EXIT_OK
    runs = _payload(capsys)["runs"]
    assert [os.path.basename(r["output_dir"]) for r in runs] == ["seed0", "seed1"]
