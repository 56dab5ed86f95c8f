import csv
import json

import numpy as np
import pytest

from rpslab.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, main
from rpslab.presets import PRESETS

from conftest import scalar_text


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


def read_json(path):
    return json.loads(path.read_text())


def test_check_passes_on_ex55(tmp_path, capsys):
    assert run(tmp_path, "check", "--preset", "ex5_5", "--paths", "32") == EXIT_OK
    report = read_json(tmp_path / "report.json")
    assert report["verdict"] == "pass"
    assert abs(report["kappa"] - 0.9086190822940108) < 1e-12
    assert report["provenance"]["seed"] == 0
    assert (tmp_path / "report.txt").read_text() == capsys.readouterr().out


def test_check_fails_on_strong_goodwin(tmp_path):
    spec = tmp_path / "strong.rps"
    spec.write_text(PRESETS["goodwin"].replace("V=0.02", "V=100"))
    assert run(tmp_path, "check", "--spec", str(spec), "--paths", "16") == EXIT_FAIL
    assert read_json(tmp_path / "report.json")["verdict"] == "fail"


def test_missing_spec_file(tmp_path):
    assert run(tmp_path, "check", "--spec", str(tmp_path / "nope.rps")) == EXIT_ERROR


def test_malformed_spec_file(tmp_path):
    spec = tmp_path / "bad.rps"
    spec.write_text("[system] d=1 T=1\n[drift]\nrow=-1, 2\n")
    assert run(tmp_path, "check", "--spec", str(spec)) == EXIT_ERROR


def test_dt_not_dividing_period(tmp_path):
    spec = tmp_path / "s.rps"
    spec.write_text(scalar_text(1.0, 0.1, h="0.5"))
    assert run(tmp_path, "simulate", "--spec", str(spec), "--dt", "0.3") == EXIT_ERROR
    assert run(tmp_path, "simulate", "--spec", str(spec), "--dt", "-0.1") == EXIT_ERROR


def test_dt_expression_accepted(tmp_path):
    args = ("simulate", "--preset", "ex5_5", "--dt", "2pi/200", "--paths", "1", "--t1", "pi")
    assert run(tmp_path, *args) == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "trajectory_seed0.csv")))
    assert len(rows) == 1 + 101


def test_bad_thread_setting(tmp_path, monkeypatch):
    monkeypatch.setenv("RPSLAB_THREADS", "zero")
    assert run(tmp_path, "check", "--preset", "ex5_5") == EXIT_ERROR


def test_simulate_is_byte_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(d, "simulate", "--preset", "goodwin", "--seed", "7", "--paths", "3",
                   "--dt", "2pi/100") == EXIT_OK
    names = sorted(p.name for p in a.iterdir())
    assert names == ["simulate.json", "trajectory_seed7.csv", "trajectory_seed8.csv",
                     "trajectory_seed9.csv"]
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    summary = read_json(a / "simulate.json")
    assert summary["finite"] and summary["nonnegative"]


def test_noise_free_simulation_is_deterministic(tmp_path):
    alpha, c = 2.0, 1.0
    spec = tmp_path / "det.rps"
    spec.write_text(scalar_text(alpha, 0.0, h=str(c)))
    assert run(tmp_path, "simulate", "--spec", str(spec), "--paths", "2", "--x0", "3",
               "--dt", "0.01", "--t1", "1") == EXIT_OK
    first = (tmp_path / "trajectory_seed0.csv").read_text()
    assert first == (tmp_path / "trajectory_seed1.csv").read_text()
    x = 3.0
    expected = [x]
    for _ in range(100):
        x = x + (c - alpha * x) * 0.01
        expected.append(x)
    got = np.loadtxt(tmp_path / "trajectory_seed0.csv", delimiter=",", skiprows=1)[:, 1]
    np.testing.assert_allclose(got, expected, rtol=1e-14)


def test_pullback_outputs(tmp_path):
    assert run(tmp_path, "pullback", "--preset", "ex5_5", "--paths", "4", "--nmax", "3",
               "--dt", "2pi/100") == EXIT_OK
    summary = read_json(tmp_path / "pullback.json")
    assert summary["ns"] == [1, 2, 3]
    assert len(summary["mean_envelope_gap"]) == 3
    assert set(summary["envelope_checks"]) == {"a_nondecreasing", "b_nonincreasing", "ordered",
                                               "squeeze", "gap_nonincreasing"}
    rows = list(csv.reader(open(tmp_path / "pullback.csv")))
    assert rows[0][-1] == "mean_envelope_gap" and len(rows) == 4


def test_pullback_single_n_has_no_fit(tmp_path):
    assert run(tmp_path, "pullback", "--preset", "ex5_5", "--paths", "2", "--nmax", "1",
               "--dt", "2pi/100") == EXIT_OK
    summary = read_json(tmp_path / "pullback.json")
    assert summary["fit_slope"] is None and summary["slope_in_band"] is None


def test_fixpoint_contracts(tmp_path):
    assert run(tmp_path, "fixpoint", "--preset", "ex5_5", "--paths", "8", "--kmax", "4",
               "--dt", "2pi/100", "--tol", "1e-12") == EXIT_OK
    res = read_json(tmp_path / "residuals.json")
    assert res["max_ratio"] <= 0.95
    fx = read_json(tmp_path / "fixpoint.json")
    assert fx["kappa"] < 1
    rows = list(csv.reader(open(tmp_path / "Y_quantiles.csv")))
    assert rows[0][:4] == ["t", "x1_q05", "x1_median", "x1_q95"] and len(rows) == 101


def test_report_without_inputs(tmp_path):
    assert run(tmp_path, "report") == EXIT_ERROR


def test_report_collects_outputs(tmp_path):
    run(tmp_path, "check", "--preset", "ex5_5", "--paths", "8")
    run(tmp_path, "simulate", "--preset", "ex5_5", "--paths", "1", "--dt", "2pi/100")
    assert run(tmp_path, "report") == EXIT_OK
    full = read_json(tmp_path / "full_report.json")
    assert sorted(full["sections"]) == ["report", "simulate"]


@pytest.mark.parametrize("flag", ["--paths", "--nmax", "--kmax"])
def test_nonpositive_counts_rejected(tmp_path, flag):
    assert run(tmp_path, "pullback", "--preset", "ex5_5", flag, "0") == EXIT_ERROR
