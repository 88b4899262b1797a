import json
from pathlib import Path

import pytest

from mfgfem.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 2


def test_solve_writes_artifacts(tmp_path):
    assert main(["solve", str(CONFIGS / "crowd_1d.json"), "--out", str(tmp_path), "--n", "16"]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["converged"]
    assert (tmp_path / "u.csv").read_text().startswith("t,vertex_id,x,value")
    assert (tmp_path / "report.json").read_text() == json.dumps(rep, indent=2, sort_keys=True) + "\n"


def test_solve_nonconvergence_exit_code(tmp_path):
    raw = json.loads((CONFIGS / "manufactured_1d.json").read_text())
    raw["solver"] = {"method": "picard", "max_outer": 1}
    p = tmp_path / "p.json"
    p.write_text(json.dumps(raw))
    assert main(["solve", str(p), "--out", str(tmp_path)]) == 3
    assert not json.loads((tmp_path / "report.json").read_text())["converged"]


def test_missing_file_and_bad_config(tmp_path):
    assert main(["solve", str(tmp_path / "nope.json")]) == 2
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"schema": "mfgfem.problem/1", "typo": 1}))
    assert main(["solve", str(p), "--out", str(tmp_path)]) == 2


def test_converge_needs_three_levels(tmp_path, capsys):
    raw = json.loads((CONFIGS / "study_1d.json").read_text())
    raw["h"] = [0.125]
    p = tmp_path / "s.json"
    p.write_text(json.dumps(raw))
    assert main(["converge", str(p), "--out", str(tmp_path)]) == 2
    assert "need ≥ 3 levels" in capsys.readouterr().err


def test_converge_passes(tmp_path):
    raw = json.loads((CONFIGS / "study_1d.json").read_text())
    raw["h"] = raw["h"][:4]
    p = tmp_path / "s.json"
    p.write_text(json.dumps(raw))
    assert main(["converge", str(p), "--out", str(tmp_path), "--threads", "2"]) == 0
    rep = json.loads((tmp_path / "convergence.json").read_text())
    assert rep["flags"]["quasi_optimal_pass"]
    assert (tmp_path / "convergence.csv").exists()


def test_heat_bench_defaults(tmp_path):
    assert main(["heat-bench", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("heat_*.csv"))) == 6
    summary = json.loads((tmp_path / "heat_bench.json").read_text())
    assert summary["pass"]


def test_stability_and_jacobian_check(tmp_path):
    prob = str(CONFIGS / "manufactured_1d.json")
    assert main(["stability", prob, "--out", str(tmp_path), "--n", "16"]) == 0
    st = json.loads((tmp_path / "stability.json").read_text())
    assert st["stable"] and st["margin"] > 0
    assert main(["jacobian-check", prob, "--out", str(tmp_path), "--n", "16", "--seed", "7"]) == 0
    jc = json.loads((tmp_path / "jacobian_check.json").read_text())
    assert jc["pass"] and len(jc["relative_errors"]) == 20


def test_jacobian_check_failure_exit_code(tmp_path):
    prob = str(CONFIGS / "crowd_1d.json")
    assert main(["jacobian-check", prob, "--out", str(tmp_path), "--n", "8", "--tol", "1e-20"]) == 1


def test_bad_threads():
    assert main(["heat-bench", "--threads", "0"]) == 2
