import json

import numpy as np
import pytest

from lab.harness.config_manager import validate_config
from lab.harness.data_models import ExperimentReport
from lab.harness.report_store import ReportStore
from lab.main import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR, EXIT_VERDICT_FAILED, main
from lab.report_templates import ReportTemplates
from lab.verdicts import evaluate_verdicts

TARGET = {"family": "bump_mixture", "components": [{"center": [0.4], "width": 0.3}], "floor_fraction": 0.3}


@pytest.fixture(autouse=True)
def data_dir(tmp_path, monkeypatch):
    path = tmp_path / "data"
    monkeypatch.setenv("LAB_DATA_DIR", str(path))
    monkeypatch.delenv("LAB_WORKERS", raising=False)
    return path


def _write_config(path, **fields):
    path.write_text(json.dumps(dict({"experiment": "T-DECAY", "target": TARGET}, **fields)), encoding="utf-8")
    return path


def _stored_t_decay(out_dir, rate):
    cfg = validate_config({"experiment": "T-DECAY", "target": TARGET})
    gap = 9.8676
    rows = [{"T": T, "terminal_error": 0.1 + 0.1 / T, "init_error": float(np.exp(-rate * T)), "exact_start_error": 0.1,
             "truncation_error": 0.09, "truncation_budget": 0.12, "spectral_gap": gap}
            for T in (0.5, 1.0, 1.5, 2.0)]
    report = ExperimentReport(
        experiment="T-DECAY",
        claim=ReportTemplates.claim("T-DECAY"),
        config=cfg.model_dump(mode="json"),
        rows=rows,
        verdicts=evaluate_verdicts(cfg, rows),
    )
    ReportStore(out_dir).write_report(report, ReportTemplates.build_markdown(report))
    return report


def test_list_experiments(capsys):
    assert main(["list-experiments"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("SCORE-SWEEP", "T-DECAY", "MOSER-EXACT", "OSC-CONVERGE", "ODE-VS-SDE", "NEURAL-TRANSFER"):
        assert name in out


def test_missing_config_is_a_config_error(tmp_path):
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG_ERROR


def test_invalid_config_is_a_config_error(tmp_path):
    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{not json", encoding="utf-8")
    assert main(["run", str(bad_json)]) == EXIT_CONFIG_ERROR
    bad_value = _write_config(tmp_path / "bad_value.json", solver={"dt": 0})
    assert main(["run", str(bad_value)]) == EXIT_CONFIG_ERROR


def test_check_recomputes_stored_verdicts(tmp_path, capsys):
    _stored_t_decay(tmp_path / "run", rate=2 * 9.8676)
    assert main(["check", str(tmp_path / "run")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "T-DECAY" in out
    assert "不一致" not in out


def test_check_reports_failures_and_tampering(tmp_path, capsys):
    report = _stored_t_decay(tmp_path / "run", rate=2.0)
    assert main(["check", str(tmp_path / "run" / "report.json")]) == EXIT_VERDICT_FAILED
    capsys.readouterr()

    # 存储的判定被改写为全部通过
    tampered = report.model_copy(update={
        "verdicts": [v.model_copy(update={"passed": True}) for v in report.verdicts],
    })
    ReportStore(tmp_path / "run").write_report(tampered, "")
    assert main(["check", str(tmp_path / "run")]) == EXIT_VERDICT_FAILED
    assert "不一致" in capsys.readouterr().out


def test_check_missing_report(tmp_path):
    assert main(["check", str(tmp_path / "nowhere")]) == EXIT_CONFIG_ERROR


@pytest.mark.slow
def test_run_writes_outputs(tmp_path, capsys):
    config = _write_config(tmp_path / "t_decay.json", grid={"cells": [16]}, solver={"dt": 0.01},
                           horizons=[0.1, 0.2])
    out_dir = tmp_path / "out"
    code = main(["run", str(config), "--out", str(out_dir), "--workers", "2", "--seed", "5"])
    assert code in (EXIT_OK, EXIT_VERDICT_FAILED)
    assert (out_dir / "results.csv").is_file()
    assert json.loads((out_dir / "effective_config.json").read_text(encoding="utf-8"))["seed"] == 5
    assert "📁" in capsys.readouterr().out


@pytest.mark.slow
def test_failing_run_is_a_runtime_error(tmp_path):
    config = _write_config(tmp_path / "t_decay.json", grid={"cells": [16]}, solver={"dt": 0.06},
                           horizons=[0.1, 0.2])
    assert main(["run", str(config), "--out", str(tmp_path / "out")]) == EXIT_RUNTIME_ERROR


def test_check_corrupted_report(tmp_path):
    (tmp_path / "report.json").write_text("{oops", encoding="utf-8")
    assert main(["check", str(tmp_path)]) == EXIT_CONFIG_ERROR


def test_setup_failure_is_a_runtime_error(tmp_path):
    target = dict(TARGET, floor_fraction=0.0)
    config = _write_config(tmp_path / "osc.json", experiment="OSC-CONVERGE", target=target,
                           grid={"cells": [16]}, solver={"dt": 0.01}, T=0.2, m=4, N_list=[1, 2])
    assert main(["run", str(config), "--out", str(tmp_path / "out")]) == EXIT_RUNTIME_ERROR
