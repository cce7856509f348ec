import json

import numpy as np
import pytest

from qfbsde.cli import emit_plot_data, load_config, main, validate_config

MINIMAL = {
    "scenario": "minimal",
    "driver": {"preset": "zero"},
    "terminal": {"preset": "constant", "params": {"c": 1.0}},
    "grid": {"T": 1.0, "N": 20},
    "paths": 2000,
    "seed": 1,
    "study": {"nodes": [[0.0, [0.0]], [0.5, [1.0]]], "bracket": True},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def _read_csv(path):
    return np.genfromtxt(path, delimiter=",", names=True)


def test_minimal_run_gives_constant(tmp_path):
    cfg = _write(tmp_path, MINIMAL)
    assert main(["run", str(cfg), "--out", str(tmp_path / "out")]) == 0
    nodes = _read_csv(tmp_path / "out" / "nodes.csv")
    assert np.max(np.abs(nodes["u"] - 1.0)) <= 1e-12
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert {a["file"] for a in manifest["artifacts"]} == {"convergence.csv", "nodes.csv", "bracket.csv"}
    assert manifest["diagnostics"]["iterations"] >= 1


def test_seed_override_changes_hash_inputs(tmp_path):
    cfg = _write(tmp_path, {**MINIMAL, "terminal": {"preset": "tanh"}})
    main(["run", str(cfg), "--out", str(tmp_path / "a")])
    main(["run", str(cfg), "--out", str(tmp_path / "b"), "--seed", "5"])
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a["seed"] == 1 and b["seed"] == 5
    assert a["artifacts"] != b["artifacts"]


def test_validate_reports_errors(tmp_path, capsys):
    bad = _write(tmp_path, {"driver": {"preset": "utility-market"}, "market": {"preset": "gbm", "k": 2}, "grid": {"N": 0}})
    assert main(["validate", str(bad)]) == 2
    issues = json.loads(capsys.readouterr().out)["issues"]
    fields = {i["field"] for i in issues}
    assert {"grid.N", "market.k"} <= fields


def test_validate_warns_on_unbounded_terminal(tmp_path):
    cfg = load_config(_write(tmp_path, {"terminal": {"preset": "identity"}}))
    issues = validate_config(cfg)
    assert any(i["level"] == "warning" and i["message"].startswith("bounded terminal") for i in issues)
    assert not any(i["level"] == "error" for i in issues)


def test_run_config_error_exit_code(tmp_path, capsys):
    bad = _write(tmp_path, {"driver": {"preset": "nope"}})
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == 2
    report = json.loads(capsys.readouterr().err)
    assert report["error"] == "ValidationError"
    assert (tmp_path / "o" / "error.json").exists()


def test_missing_config(tmp_path):
    assert main(["run", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == 2


def test_solver_failure_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, {**MINIMAL, "driver": {"preset": "linear", "params": {"r": 1.0, "mu": [0.5]}},
                            "terminal": {"preset": "tanh"}, "picard": {"tol": 1e-12, "max_iter": 1}, "study": {}})
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 3
    report = json.loads(capsys.readouterr().err)
    assert report["error"] == "IterationLimitError"
    assert len(report["history"]) == 1


def test_plotdata_long_format(tmp_path):
    cfg = _write(tmp_path, {**MINIMAL, "terminal": {"preset": "tanh"},
                            "study": {"surface": {"t": [0.5], "x": [-1, 0, 1], "h": 0.05, "coords": "x"},
                                      "refinement": {"N": [10, 20], "P": [500, 500]}}})
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0
    out = emit_plot_data(tmp_path / "o" / "manifest.json")
    lines = out.read_text().splitlines()
    assert lines[0] == "series,xaxis,x,y"
    series = {ln.split(",")[0] for ln in lines[1:]}
    assert "u(m=0.0)" in series and "bracket_median" in series


def test_plotdata_empty_manifest(tmp_path):
    m = tmp_path / "manifest.json"
    m.write_text(json.dumps({"artifacts": []}))
    assert main(["plotdata", str(m), "--out", str(tmp_path / "p.csv")]) == 0
    assert (tmp_path / "p.csv").read_text() == "series,xaxis,x,y\n"


def test_market_run_writes_hedge(tmp_path):
    cfg = _write(tmp_path, {"scenario": "gbm", "driver": {"preset": "utility-market"},
                            "market": {"preset": "gbm", "params": {"kappa": 1.0}, "nodes": [[0.0, [1.0]]], "h": 0.01},
                            "grid": {"T": 1.0, "N": 20}, "paths": 3000, "seed": 2})
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0
    hedge = _read_csv(tmp_path / "o" / "hedge.csv")
    assert 0.05 < float(hedge["price"]) < 0.11
    assert float(hedge["pnl_var_hedged"]) < float(hedge["pnl_var_unhedged"])


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("QFBSDE_THREADS", "3")
    cfg = _write(tmp_path, MINIMAL)
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0


def test_validate_rejects_off_grid_study_times(tmp_path):
    cfg = load_config(_write(tmp_path, {**MINIMAL, "grid": {"T": 1.0, "N": 10}, "study": {"nodes": [[0.25, [0.0]]]}}))
    issues = validate_config(cfg)
    assert any(i["level"] == "error" and i["field"] == "study" for i in issues)
