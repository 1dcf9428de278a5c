import json
import subprocess
import sys
from pathlib import Path

import pytest

from lowrank_bnb.cli import EXIT_OK, EXIT_SOLVER, EXIT_USAGE, main
from lowrank_bnb.heuristics import altmin
from lowrank_bnb.instance import load_instance

DATA = Path(__file__).parent / "data"
FIXTURE = DATA / "relax_fixture.json"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_help_exits_zero():
    for argv in (["--help"], ["solve", "--help"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 0


def test_usage_errors_exit_two_and_print_help(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--no-such-flag"])
    assert exc.value.code == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--rate", "fast"])
    assert exc.value.code == EXIT_USAGE
    code, out = run(["solve", "--instance", DATA / "missing.json"], capsys)
    assert code == EXIT_USAGE and "error" in out.err


def test_relax_m4m3_reproduces_golden(capsys):
    golden = json.loads((DATA / "relax_m4m3_golden.json").read_text())
    code, out = run(["relax", "--instance", FIXTURE, "--shor", "m4m3"], capsys)
    assert code == EXIT_OK
    got = json.loads(out.out)
    assert got["status"] == "optimal"
    assert got["objective"] == pytest.approx(golden["objective"], rel=1e-6)


def test_relax_golden_is_a_valid_bound(capsys):
    golden = json.loads((DATA / "relax_m4m3_golden.json").read_text())["objective"]
    _, out = run(["relax", "--instance", FIXTURE], capsys)
    plain = json.loads(out.out)["objective"]
    incumbent = altmin(load_instance(FIXTURE)).objective
    assert plain <= golden <= incumbent * (1 + 1e-6)
    _, out = run(["relax", "--instance", FIXTURE, "--relaxation", "mprt"], capsys)
    assert json.loads(out.out)["objective"] == pytest.approx(plain, rel=1e-6)


def test_generate_solve_and_report(tmp_path, capsys):
    inst_path, report = tmp_path / "inst.json", tmp_path / "report.json"
    code, _ = run(["generate", "--n", 4, "--p", 3, "--rate", "kn", "--seed", 2, "--out", inst_path], capsys)
    assert code == EXIT_OK and inst_path.exists()
    code, out = run(["solve", "--instance", inst_path, "--eps", "1e-2", "--out", report], capsys)
    assert code == EXIT_OK
    data = json.loads(report.read_text())
    assert data["termination"] == "gap_closed" and data["gap"] <= 1e-2
    assert len(data["X"]) == 4


def test_presolve_command(tmp_path, capsys):
    out_path = tmp_path / "filled.json"
    code, out = run(["presolve", "--mode", "bp", "--n", 8, "--p", 1, "--rate", "kn15", "--out", out_path], capsys)
    assert code == EXIT_OK
    summary = json.loads(out.out)
    assert summary["fully_presolved"] and summary["observed"] == 64
    assert len(load_instance(out_path).index) == 64
    code, out = run(["presolve", "--mode", "noisy"], capsys)
    assert code == EXIT_SOLVER


def test_experiment_and_summarize(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": [4], "p": [3.0], "rate": "kn", "instances": 2, "root_only": True,
                               "out_csv": str(tmp_path / "rows.csv")}))
    code, out = run(["experiment", "--config", cfg], capsys)
    assert code == EXIT_OK and json.loads(out.out)["rows"] == 2
    code, out = run(["summarize", tmp_path / "rows.csv", "--out", tmp_path / "summary.csv"], capsys)
    assert code == EXIT_OK
    assert json.loads(out.out)[0]["instances"] == 2
    assert (tmp_path / "summary.csv").read_text().startswith("n,m,k,p,gamma")


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "lowrank_bnb", "solve", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--disjunction" in proc.stdout
