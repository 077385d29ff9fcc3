import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from rapsolve.cli import run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _report(path):
    return json.loads(path.read_text(encoding="utf-8"))


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_solve_scalar_demo(tmp_path):
    assert run(["solve", "--config", str(CONFIGS / "quadratic_demo.json"), "--out", str(tmp_path)]) == 0
    header, data = _rows(tmp_path / "psi.csv")
    assert header == ["t", "xi_1", "psi_1"]
    npt.assert_allclose(data[:, 1], 0.0, atol=1e-14)
    assert np.max(np.abs(data[:, 2])) > 0.02
    rep = _report(tmp_path / "solve_report.json")
    assert rep["schema_version"] == 1
    assert rep["runs"][0]["residual_ok"]


def test_solve_nu_list(tmp_path):
    code = run(["solve", "--config", str(CONFIGS / "quadratic_demo.json"), "--out", str(tmp_path),
                "--nu", "0.05,0.025"])
    assert code == 0
    assert (tmp_path / "psi_nu=0.05.csv").exists()
    assert (tmp_path / "psi_nu=0.025.csv").exists()


def test_malformed_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 1,\n  "nu": 0.1,,\n}', encoding="utf-8")
    out = tmp_path / "out"
    assert run(["solve", "--config", str(bad), "--out", str(out)]) == 1
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err
    assert _report(out / "error_report.json")["kind"] == "config"


def test_schema_violation(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"schema_version": 2}), encoding="utf-8")
    assert run(["solve", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_missing_config(tmp_path):
    assert run(["solve", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
    assert (tmp_path / "error_report.json").exists()


def test_delay_gate(tmp_path):
    cfg = str(CONFIGS / "delay_demo.json")
    assert run(["solve-delay", "--config", cfg, "--out", str(tmp_path / "ok")]) == 0
    assert run(["solve-delay", "--config", cfg, "--out", str(tmp_path / "bad"), "--nu", "0.3"]) == 2
    rep = _report(tmp_path / "bad" / "error_report.json")
    assert rep["kind"] == "hypothesis"
    assert rep["report"]["binding"] == "contraction"
    assert rep["report"]["nu0"] == pytest.approx(0.25)
    assert "contraction" in rep["error"]


def test_unknown_command(capsys):
    assert run(["frobnicate"]) == 64
    assert "usage: rapsolve" in capsys.readouterr().err
    assert run([]) == 64


def test_unknown_command_subprocess(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rapsolve", "frobnicate"], capture_output=True,
                          text=True, cwd=tmp_path)
    assert proc.returncode == 64
    assert "commands:" in proc.stderr


def test_deterministic_csv(tmp_path):
    cfg = str(CONFIGS / "quadratic_demo.json")
    for name in ("a", "b"):
        assert run(["solve", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "psi.csv").read_bytes() == (tmp_path / "b" / "psi.csv").read_bytes()


def test_signal_scan(tmp_path):
    assert run(["signal-scan", "--config", str(CONFIGS / "signal_sin.json"), "--out", str(tmp_path)]) == 0
    _, data = _rows(tmp_path / "defects.csv")
    assert data[0, 1] <= 1e-10
    assert data[1, 1] == pytest.approx(2.0, abs=1e-3)
    rep = _report(tmp_path / "signal_report.json")
    assert abs(rep["ergodic_mean"][0]) <= 1e-3
    assert (tmp_path / "scan.csv").exists()


def test_dichotomy(tmp_path):
    assert run(["dichotomy", "--config", str(CONFIGS / "dichotomy_diag.json"), "--out", str(tmp_path)]) == 0
    rep = _report(tmp_path / "dichotomy_report.json")
    assert rep["verify_passed"]
    npt.assert_allclose(rep["P"], [[1.0, 0.0], [0.0, 0.0]], atol=1e-12)
    assert (tmp_path / "verify.csv").exists()


def test_average(tmp_path):
    assert run(["average", "--config", str(CONFIGS / "averaging_demo.json"), "--out", str(tmp_path)]) == 0
    rep = _report(tmp_path / "averaging_report.json")
    assert abs(rep["x0"][0]) <= 1e-8
    assert rep["hyperbolic"]
    assert all(r["residual_ok"] for r in rep["runs"])
    header, data = _rows(tmp_path / "reduced_trace.csv")
    assert header[0] == "nu" and data.shape[0] == 2
    assert (tmp_path / "phi_nu=0.05.csv").exists()


def test_demo_brusselator(tmp_path):
    assert run(["demo", "brusselator", "--out", str(tmp_path), "--svg"]) == 0
    for name in ("brusselator.csv", "brusselator_report.json", "brusselator.svg"):
        assert (tmp_path / name).exists()
    assert run(["demo", "lorenz", "--out", str(tmp_path)]) == 1


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("RAPSOLVE_THREADS", "0")
    assert run(["solve", "--out", str(tmp_path)]) == 1
