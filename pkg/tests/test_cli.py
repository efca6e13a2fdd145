import json
import subprocess
import sys

import numpy as np
import pytest

from driftsafe import cli

from .conftest import SCENARIOS


def _scenario(tmp_path, name="leo_double_coelliptic.json", **patch):
    d = json.loads((SCENARIOS / name).read_text())
    for key, val in patch.items():
        sect, _, field = key.partition("__")
        if field:
            d[sect][field] = val
        else:
            d[sect] = val
    p = tmp_path / f"{name}"
    p.write_text(json.dumps(d))
    return str(p)


def test_target_writes_plan_and_burns(tmp_path, capsys):
    out = tmp_path / "t"
    assert cli.main(["target", "--scenario", _scenario(tmp_path), "--out", str(out), "--plots"]) == 0
    burns = json.loads((out / "burns.json").read_text())
    assert [round(b["magnitude_mps"], 4) for b in burns["burns"]] == [0.9245, 0.9609, 0.8048, 0.5129]
    for name in ("plan.json", "trajectory.csv", "trajectory.svg", "scenario.resolved.json"):
        assert (out / name).exists()
    header = (out / "trajectory.csv").read_text().splitlines()[0]
    assert header == ",".join(cli.TRAJECTORY_COLUMNS)
    assert "total dv 3.2030" in capsys.readouterr().out


def test_plan_file_round_trip(tmp_path, table_plan):
    out = tmp_path / "t"
    cli.main(["target", "--scenario", _scenario(tmp_path), "--out", str(out)])
    plan = cli.load_plan(out / "plan.json")
    assert [b.label for b in plan.burns] == [b.label for b in table_plan.burns]
    for a, b in zip(plan.burns, table_plan.burns):
        assert a.t == b.t and (a.dv == b.dv).all()


def test_drift_verify_exit_codes(tmp_path):
    ok = tmp_path / "ok"
    assert cli.main(["drift-verify", "--scenario", _scenario(tmp_path), "--out", str(ok), "--plots"]) == 0
    safety = json.loads((ok / "safety.json").read_text())
    assert safety["passed"] and safety["min_clearance_m"] > 0
    bad = tmp_path / "bad"
    code = cli.main(["drift-verify", "--scenario", _scenario(tmp_path, chance__r_kos_m=1500), "--out", str(bad)])
    assert code == cli.EXIT_UNSAFE
    # an unsafe verdict is a result, not a failed run
    assert (bad / "safety.json").exists() and not (bad / "safety.json.failed").exists()


def test_schema_error_exit_code(tmp_path, capsys):
    p = _scenario(tmp_path, chance__colour="red")
    assert cli.main(["target", "--scenario", p, "--out", str(tmp_path / "o")]) == cli.EXIT_SCHEMA
    assert "chance.colour" in capsys.readouterr().err


def test_infeasible_exit_code_and_report(tmp_path):
    p = _scenario(
        tmp_path,
        "leo_min_fuel.json",
        endpoints={"r_i_m": [0, 100], "v_i_mps": [0, 0], "r_f_m": [0, 750], "v_f_mps": [0, 0]},
    )
    out = tmp_path / "inf"
    assert cli.main(["optimize", "--scenario", p, "--out", str(out)]) == cli.EXIT_INFEASIBLE
    rep = json.loads((out / "infeasible.json").read_text())
    assert rep["stage"] == "initial"
    assert (out / "scenario.resolved.json.failed").exists()


def test_numerical_exit_code(tmp_path):
    # a transfer lasting exactly one orbital period is singular
    d = json.loads((SCENARIOS / "leo_double_coelliptic.json").read_text())
    period_min = 2 * np.pi / np.sqrt(398600.4418e9 / 6738e3**3) / 60
    d["waypoints"][1]["transfer_time_min"] = d["waypoints"][0]["hold_time_min"] + period_min
    p = tmp_path / "sing.json"
    p.write_text(json.dumps(d))
    out = tmp_path / "sing"
    assert cli.main(["target", "--scenario", str(p), "--out", str(out)]) == cli.EXIT_NUMERICAL
    assert (out / "scenario.resolved.json.failed").exists()
    # a later successful run clears the stale flag
    assert cli.main(["target", "--scenario", _scenario(tmp_path), "--out", str(out)]) == 0
    assert not (out / "scenario.resolved.json.failed").exists()


def test_lincov_outputs_are_byte_identical(tmp_path):
    p = _scenario(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    for o in (a, b):
        assert cli.main(["disperse", "--scenario", p, "--out", str(o), "--mode", "lincov", "--plots"]) == 0
    for name in ("covariance.csv", "dv.json", "dispersion.svg", "dv_histogram.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.mark.parametrize("mode", ["mc", "hybrid"])
def test_randomized_csv_is_worker_invariant(tmp_path, mode):
    p = _scenario(tmp_path)
    runs = {}
    for w in (1, 3):
        o = tmp_path / f"{mode}{w}"
        args = ["disperse", "--scenario", p, "--out", str(o), "--mode", mode, "--trials", "120", "--seed", "18446744073709551615"]
        assert cli.main(args + ["--workers", str(w)]) == 0
        runs[w] = o
    names = ["covariance.csv"] + (["ensemble.csv"] if mode == "mc" else [])
    for name in names:
        assert runs[1].joinpath(name).read_bytes() == runs[3].joinpath(name).read_bytes()
    other = tmp_path / "other"
    cli.main(["disperse", "--scenario", p, "--out", str(other), "--mode", mode, "--trials", "120", "--seed", "7"])
    assert other.joinpath("covariance.csv").read_bytes() != runs[1].joinpath("covariance.csv").read_bytes()


def test_bad_seed_is_rejected(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["disperse", "--scenario", _scenario(tmp_path), "--seed", str(2**64)])


def test_optimize_and_report(tmp_path):
    out = tmp_path / "opt"
    assert cli.main(["optimize", "--scenario", _scenario(tmp_path, "leo_min_fuel.json"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["converged"] and rep["safety"]["passed"]
    lines = (out / "diagnostics.jsonl").read_text().splitlines()
    assert lines and all("max_violation_m" in json.loads(line) for line in lines)
    # the optimized plan re-verifies through the plan file
    assert cli.main(["drift-verify", "--scenario", _scenario(tmp_path), "--plan", str(out / "plan.json"), "--out", str(out)]) == 0
    assert cli.main(["report", "--out", str(out)]) == 0
    assert "Optimization" in (out / "summary.md").read_text()


def test_console_script_runs(tmp_path):
    r = subprocess.run(
        [sys.executable, "-m", "driftsafe.cli", "target", "--scenario", _scenario(tmp_path), "--out", str(tmp_path / "x")],
        capture_output=True,
        text=True,
    )
    assert r.returncode == 0 and "Arrive at HP750" in r.stdout
