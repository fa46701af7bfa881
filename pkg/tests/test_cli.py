import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from slrimpute import to_csv
from slrimpute.cli import main
from slrimpute.simulation import builtin_scenario, generate
from conftest import FIXTURE_A


def _run(args, capsys):
    code = main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_analyze_fixture(tmp_path, capsys):
    code, out, _ = _run(["analyze", "--input", FIXTURE_A, "--strategy", "cir", "--inference", "none",
                         "--out", tmp_path], capsys)
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["result"]["point"] == pytest.approx(23 / 6, abs=1e-12)
    assert report["version"] == "0.1.0"
    assert report["config"]["strategy"] == "cir" and "threads" not in report["config"]
    assert "treatment effect: 3.8333" in (tmp_path / "report.txt").read_text()
    rows = dict(line.split(",", 1) for line in (tmp_path / "report.csv").read_text().splitlines()[1:])
    assert float(rows["point"]) == pytest.approx(23 / 6, abs=1e-15)
    assert "total_seconds" in json.loads((tmp_path / "timings.json").read_text())


def test_analyze_missing_input_names_path(tmp_path, capsys):
    code, _, err = _run(["analyze", "--input", tmp_path / "nope.csv", "--out", tmp_path], capsys)
    assert code == 3
    lines = err.strip().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith("slrimpute: error: module=dataset type=DataError")
    assert "nope.csv" in lines[0]


def test_analyze_unknown_covariate(tmp_path, capsys):
    code, _, err = _run(["analyze", "--input", FIXTURE_A, "--covariates", "age", "--out", tmp_path], capsys)
    assert code == 3 and "unknown covariate 'age'" in err


def test_analyze_jackknife_failure_is_numerical(tmp_path, capsys):
    code, _, err = _run(["analyze", "--input", FIXTURE_A, "--inference", "jackknife", "--out", tmp_path], capsys)
    assert code == 4 and "module=inference" in err and "without patient" in err


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--strategy", "x2r", "--input", "a.csv"])
    assert exc.value.code == 2


def test_analyze_bootstrap_and_schema(tmp_path, capsys):
    ds = generate(builtin_scenario(1, n_per_arm=150), 3).observed
    text = to_csv(ds).replace("patient,visit,arm,outcome,on_treatment", "pid,week,trt,hamd,ontrt", 1)
    data = tmp_path / "trial.csv"
    data.write_text(text)
    schema = tmp_path / "schema.yaml"
    schema.write_text(yaml.safe_dump({"id": "pid", "visit": "week", "arm": "trt", "outcome": "hamd",
                                      "on_treatment": "ontrt"}))
    args = ["analyze", "--input", data, "--schema", schema, "--inference", "bootstrap", "--boot-samples", 150,
            "--seed", 9, "--covariates", "X1,X2,X3", "--dump-replicates"]
    code, _, _ = _run(args + ["--out", tmp_path / "a", "--threads", 1], capsys)
    assert code == 0
    code, _, _ = _run(args + ["--out", tmp_path / "b", "--threads", 4], capsys)
    assert code == 0
    for name in ("report.txt", "report.csv", "report.json", "replicates.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, name
    res = json.loads((tmp_path / "a" / "report.json").read_text())["result"]
    assert res["ci_low"] <= res["point"] <= res["ci_high"] and res["n_resamples"] == 150


def test_change_from_baseline_flag(tmp_path, capsys):
    ds = generate(builtin_scenario(3, n_per_arm=150), 8).observed
    keep = ~np.isnan(ds.outcomes[:, 0])
    data = tmp_path / "t.csv"
    data.write_text(to_csv(ds.take(np.flatnonzero(keep))))
    code, out, _ = _run(["analyze", "--input", data, "--strategy", "j2r", "--inference", "none",
                         "--change-from-baseline", "--covariates", "baseline", "--out", tmp_path], capsys)
    assert code == 0
    res = json.loads((tmp_path / "report.json").read_text())["result"]
    assert res["visit"] == 4


def test_simulate_deterministic_across_threads(tmp_path, capsys):
    base = ["simulate", "--setting", 3, "--n-sims", 4, "--n-per-arm", 100, "--boot-samples", 60, "--seed", 5,
            "--dump-replicates"]
    assert _run(base + ["--out", tmp_path / "a", "--threads", 1], capsys)[0] == 0
    assert _run(base + ["--out", tmp_path / "b", "--threads", 3], capsys)[0] == 0
    for name in ("report.txt", "report.csv", "report.json", "replicates.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    table = (tmp_path / "a" / "report.txt").read_text()
    assert "SLR-J2R jackknife" in table and "SLR-J2R bootstrap" in table and "Complete data" in table


def test_simulate_non_spd_scenario(tmp_path, capsys):
    mapping = builtin_scenario(1).to_mapping()
    mapping["sigma"][2][2] = -3.0
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(mapping))
    code, _, err = _run(["simulate", "--scenario", path, "--n-sims", 2, "--out", tmp_path], capsys)
    assert code == 4
    assert "NotPositiveDefiniteError" in err and "pivot 2" in err


def test_validate_commands(tmp_path, capsys):
    code, out, _ = _run(["validate", "--input", FIXTURE_A, "--out", tmp_path], capsys)
    assert code == 0 and "errors: 0" in out
    bad = tmp_path / "bad.csv"
    bad.write_text("patient,visit,arm,outcome,on_treatment\na,0,1,1,1\na,1,1,2,0\na,2,1,3,1\n")
    code, _, err = _run(["validate", "--input", bad, "--out", tmp_path], capsys)
    assert code == 3 and "non-absorbing" in err


def test_validate_generated_trial_reports_missingness(tmp_path, capsys):
    data = tmp_path / "sim.csv"
    data.write_text(to_csv(generate(builtin_scenario(1, n_per_arm=2000), 0).observed))
    code, out, _ = _run(["validate", "--input", data, "--out", tmp_path], capsys)
    frac = float(next(line for line in out.splitlines() if line.startswith("missing fraction:")).split()[-1])
    assert code == 0 and abs(frac - 0.123) < 0.01


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "slrimpute.cli", "analyze", "--input", str(FIXTURE_A),
                           "--inference", "none", "--strategy", "j2r", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "treatment effect: 3.2222" in proc.stdout
