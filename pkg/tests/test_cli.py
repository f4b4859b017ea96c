import csv
import json
import subprocess
import sys
from dataclasses import replace

import pytest

from thrustwalk.cli import (
    EXIT_INPUT,
    EXIT_OK,
    LogParseError,
    Rules,
    Scenario,
    cmd_check,
    cmd_run,
    compute_metrics,
    default_config_text,
    main,
    read_log,
    write_log,
)
from thrustwalk.hybrid import COLUMNS


def write_config(tmp_path, scenario, name="scenario.ini"):
    path = tmp_path / name
    path.write_text(scenario.to_ini())
    return path


# ---- configuration ---------------------------------------------------------------

def test_scenario_ini_round_trip_is_byte_identical():
    s = Scenario()
    text = s.to_ini()
    back = Scenario.from_ini(text)
    assert back == s
    assert back.to_ini() == text


def test_packaged_config_is_the_default_scenario():
    assert default_config_text() == Scenario().to_ini()


def test_modified_scenario_round_trip():
    s = Scenario(steps=3, seed=7)
    s = s.with_(params=s.params.replace(mu_s=0.6), nmpc=replace(s.nmpc, use_thrust=False),
                erg=replace(s.erg, m_v=1.2))
    assert Scenario.from_ini(s.to_ini()) == s
    assert Scenario.from_ini(s.to_ini()).to_ini() == s.to_ini()


def test_partial_config_keeps_defaults():
    s = Scenario.from_ini("[robot]\nm_T = 0.35\n[run]\nsteps = 2\n")
    assert s.params.m_T == 0.35 and s.steps == 2 and s.nmpc == Scenario().nmpc


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[robot]\nmass = 1\n",
    "[robot]\nm_T = heavy\n",
    "[erg]\nenabled = maybe\n",
    "[run]\nsteps = -1\n",
])
def test_bad_config_rejected(text):
    with pytest.raises(ValueError):
        Scenario.from_ini(text)


def test_bad_config_exit_code(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[robot]\nm_T = -1\n")
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == EXIT_INPUT


# ---- logs and metrics --------------------------------------------------------------

def test_zero_steps_gives_valid_log(tmp_path):
    code = main(["run", "--steps", "0", "--out", str(tmp_path)])
    assert code == EXIT_OK
    header, rows = read_log(tmp_path / "run_log.csv")
    assert len(rows) == 1 and header["requested_steps"] == 0
    rep = json.loads((tmp_path / "run_metrics.json").read_text())
    assert rep["passed"] and rep["completed_steps"] == 0


def test_check_reproduces_run_metrics(walk_runs):
    run = walk_runs["thrust"]
    assert cmd_check(run.log_path).dumps() == run.report.dumps()
    assert run.report_path.read_text() == run.report.dumps()


def test_check_cli_exit_code(walk_runs, tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["check", str(walk_runs["thrust"].log_path), "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["passed"] is True


def test_negative_normal_force_fails_contact_rule(walk_runs, tmp_path):
    header, rows = read_log(walk_runs["thrust"].log_path)
    i = COLUMNS.index("lam_N2")
    k = next(j for j, r in enumerate(rows) if r[2] == "DS")
    rows[k][i] = -abs(rows[k][i])
    path = tmp_path / "corrupt.csv"
    write_log(path, header, rows)
    rep = cmd_check(path)
    assert not rep.rules["contact"]
    assert not rep.passed
    assert main(["check", str(path)]) == 1


def test_truncated_log_names_offending_line(walk_runs, tmp_path):
    lines = walk_runs["thrust"].log_path.read_text().splitlines()
    cut = lines[:40] + [lines[40][: len(lines[40]) // 2]]
    path = tmp_path / "truncated.csv"
    path.write_text("\n".join(cut) + "\n")
    with pytest.raises(LogParseError) as exc:
        read_log(path)
    assert exc.value.line == 41
    assert "line 41" in str(exc.value)
    assert main(["check", str(path)]) == EXIT_INPUT


def test_log_header_checks(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text("t,step\n")
    with pytest.raises(LogParseError) as exc:
        read_log(path)
    assert exc.value.line == 1
    path.write_text('# {"schema": 1, "x_s0": [], "mu_s": 0.8}\nt,step\n')
    with pytest.raises(LogParseError) as exc:
        read_log(path)
    assert exc.value.line == 2


def test_metrics_from_rows_match_step_records(walk_runs):
    summary = json.loads((walk_runs["thrust"].log_path.parent / "thrust_summary.json").read_text())
    rep = walk_runs["thrust"].report
    for rec, pos, vel in zip(summary["steps"], rep.step_pos_error, rep.step_vel_error):
        assert rec["pos_error"] == pytest.approx(pos, rel=1e-12)
        assert rec["vel_error"] == pytest.approx(vel, rel=1e-12)


def test_closure_rule_uses_configured_window():
    header = {"x_s0": [0.0] * 10, "mu_s": 0.8, "requested_steps": 0, "status": "ok"}
    rows = []
    for step, v in enumerate([0.5, 0.1, 0.1004, 0.1007]):
        rows.append([float(step), step, "SS", v] + [0.0] * (len(COLUMNS) - 5) + [0])
    assert compute_metrics(header, rows, Rules(closure_from_step=2)).closure_residual == pytest.approx(4e-4)
    assert compute_metrics(header, rows, Rules(closure_from_step=3)).closure_residual == pytest.approx(3e-4)
    # the initial condition is not a return sample
    assert compute_metrics(header, rows, Rules(closure_from_step=1)).closure_residual == pytest.approx(4e-4)


# ---- scenarios ----------------------------------------------------------------------

def test_default_scenario_passes(walk_runs):
    run = walk_runs["thrust"]
    assert run.exit_code == EXIT_OK
    assert run.report.completed_steps == 5
    assert run.report.rules["contact"]


def test_low_friction_scenario_fails(tmp_path):
    s = Scenario(steps=1)
    s = s.with_(params=s.params.replace(mu_s=0.01))
    out = cmd_run(s, tmp_path)
    assert out.exit_code != EXIT_OK
    assert not out.report.passed


def test_runs_are_bitwise_deterministic(tmp_path):
    s = Scenario(steps=1, seed=3).with_(sim=replace(Scenario().sim, velocity_perturbation=0.02))
    a = cmd_run(s, tmp_path / "a")
    b = cmd_run(s, tmp_path / "b")
    assert a.log_path.read_bytes() == b.log_path.read_bytes()


def test_tune_command_writes_spec_and_history(tmp_path):
    s = Scenario()
    s = s.with_(tuning=replace(s.tuning, max_evals=0, newton_iters=0))
    cfg = write_config(tmp_path, s)
    assert main(["tune", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "tuning_history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["evaluation", "residual", "best"] and len(rows) == 2
    # the tuned spec is directly usable by `run`
    assert main(["run", "--spec", str(tmp_path / "tuned_gait.json"), "--steps", "0",
                 "--out", str(tmp_path)]) == EXIT_OK


def test_batch_runs_each_config(tmp_path):
    c1 = write_config(tmp_path, Scenario(steps=0), "a.ini")
    c2 = write_config(tmp_path, Scenario(steps=0, seed=2), "b.ini")
    out = tmp_path / "batch"
    assert main(["batch", str(c1), str(c2), "--out", str(out), "--jobs", "2"]) == EXIT_OK
    summary = json.loads((out / "batch_summary.json").read_text())
    assert sorted(summary) == sorted([str(c1), str(c2)])
    assert (out / "a_log.csv").exists() and (out / "b_metrics.json").exists()


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "thrustwalk.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("tune", "run", "check", "batch"):
        assert cmd in res.stdout
