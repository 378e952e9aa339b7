import csv
import json

import numpy as np
import pytest

from radwarp.cli import EXIT_OK, EXIT_USAGE, main, parse_weights
from radwarp.errors import ConfigurationError
from radwarp.io import read_grid


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_weights():
    w = parse_weights("flow=2,rigid=0.5,radar=0")
    assert (w.lambda_flow, w.lambda_rigid, w.lambda_radar) == (2.0, 0.5, 0.0)
    for bad in ("flow=-1", "speed=1", "flow"):
        with pytest.raises(ConfigurationError):
            parse_weights(bad)


def test_demo_converges(tmp_path):
    out = tmp_path / "demo"
    assert main(["demo", "--out-dir", str(out), "--seed", "7"]) == EXIT_OK
    rep = {r["metric"]: float(r["value"]) for r in _rows(out / "report.csv")}
    assert rep["converged"] == 1 and rep["iterations"] <= 100
    assert rep["radial_velocity_error"] < 0.05
    assert (out / "convergence.csv").is_file() and (out / "manifest.json").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "demo" and manifest["seed"] == 7
    assert not list(tmp_path.glob(".radwarp-*"))


def test_simulate_flow_and_eval_on_identical_inputs(tmp_path):
    sim, flow, ev = tmp_path / "sim", tmp_path / "flow", tmp_path / "eval"
    assert main(["simulate", "--out-dir", str(sim)]) == EXIT_OK
    assert read_grid(sim / "rdmap.rwg").shape[-2:] == (100, 80)
    assert main(["flow", "--out-dir", str(flow)]) == EXIT_OK
    mae = {r["metric"]: float(r["value"]) for r in _rows(flow / "metrics.csv")}
    assert mae["mae_sf"] < 0.05
    grid = str(flow / "sceneflow.rwg")
    assert main(["eval", "--out-dir", str(ev), "--pred", grid, "--ref", grid]) == EXIT_OK
    vals = {r["metric"]: float(r["value"]) for r in _rows(ev / "report.csv")}
    assert vals == {"mae_sf": 0.0, "sf_error_rate": 0.0}


def test_missing_scene_is_usage_error(tmp_path, capsys):
    out = tmp_path / "x"
    assert main(["flow", "--out-dir", str(out), "--scene", str(tmp_path / "nope.json")]) == EXIT_USAGE
    assert not out.exists() and "radwarp:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["flow", "--out-dir", str(out), "--bogus"])
    assert exc.value.code == EXIT_USAGE


def test_train_eval_report_round(tmp_path):
    tr, ev, rp = tmp_path / "train", tmp_path / "eval", tmp_path / "report"
    common = ["--sequences", "7", "--frames", "1", "--seed", "2"]
    assert main(["train-doa", "--out-dir", str(tr), "--kernel", "1", "--epochs", "1", *common]) == EXIT_OK
    rows = _rows(tr / "train_metrics.csv")
    assert len(rows) == 5 and rows[-1]["val_mae"] != ""
    assert main(["eval", "--out-dir", str(ev), "--checkpoint", str(tr / "doanet.rwnet"), *common]) == EXIT_OK
    names = {r["estimator"] for r in _rows(ev / "report.csv")}
    assert names == {"nn", "monopulse", "bartlett"}
    assert main(["report", "--out-dir", str(rp), "--in-dir", str(ev)]) == EXIT_OK
    assert (rp / "histogram_monopulse.pgm").is_file()
    summary = {r["estimator"]: float(r["mae_doa"]) for r in _rows(rp / "summary.csv")}
    report = {r["estimator"]: float(r["value"]) for r in _rows(ev / "report.csv") if r["metric"] == "mae_doa"}
    for k in summary:
        assert summary[k] == pytest.approx(report[k])


def test_warp_outputs(tmp_path):
    out = tmp_path / "w"
    assert main(["warp", "--out-dir", str(out), "--input", "beamform", "--beams", "16"]) == EXIT_OK
    files = {p.name for p in out.iterdir()}
    assert "manifest.json" in files and any(f.endswith(".rwg") for f in files)


def test_report_without_eval_is_usage_error(tmp_path):
    assert main(["report", "--out-dir", str(tmp_path / "r"), "--in-dir", str(tmp_path)]) == EXIT_USAGE
