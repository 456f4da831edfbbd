import csv
import json

import numpy as np
import pytest

from awesysid.cli import EXIT_INVALID, EXIT_NONCONVERGED, EXIT_OK, main

SMALL_INI = """\
[sensor]
quantization_deg = 0
seed = 3

[campaign]
filter_cutoff_hz = none

[experiment.A]
T_s = 0.05
kind = 3211
amplitude_deg = 3
base_interval = 0.5
lead_in = 0.5
total_duration = 10

[experiment.B]
T_s = 0.05
kind = doublet
amplitude_deg = 3
base_interval = 1.0
lead_in = 0.5
total_duration = 10

[experiment.V]
T_s = 0.05
role = validation
kind = 3211
amplitude_deg = 2
base_interval = 0.6
lead_in = 0.5
total_duration = 10
"""


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "small.ini"
    ini.write_text(SMALL_INI)
    out = root / "bundle"
    assert main(["campaign", "--config", str(ini), "--out", str(out)]) == EXIT_OK
    return ini, out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_trim_stdout(capsys):
    assert main(["trim"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "V_Te,alpha,theta,delta_e,residual_norm"
    assert float(lines[1].split(",")[0]) == 20.0


def test_trim_json(capsys):
    assert main(["trim", "--format", "json", "--speed", "22"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["columns"][0] == "V_Te" and doc["rows"][0][0] == 22.0


def test_maneuver_to_file(tmp_path, capsys):
    assert main(["maneuver", "--amplitude", "1", "--interval", "0.5", "--lead-in", "0",
                 "--duration", "4", "--dt", "0.1", "--out", str(tmp_path)]) == EXIT_OK
    data = np.loadtxt(tmp_path / "maneuver.csv", delimiter=",", skiprows=1)
    assert data.shape == (41, 2)
    np.testing.assert_allclose(np.abs(data[:35, 1]).max(), np.radians(1.0))
    assert capsys.readouterr().out.strip().endswith("maneuver.csv")


def test_simulate(tmp_path):
    assert main(["simulate", "--duration", "6", "--dt", "0.05", "--out", str(tmp_path)]) == EXIT_OK
    r = rows(tmp_path / "trajectory.csv")
    assert len(r) == 121 and set(r[0]) == {"t", "delta_e", "V_T", "alpha", "theta", "q"}


def test_oed_small(capsys):
    assert main(["oed", "--n-knots", "4", "--horizon", "2", "--max-iter", "2",
                 "--format", "json"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["rows"]) == 4 and doc["criterion"] <= doc["initial_criterion"]


def test_campaign_bundle(bundle):
    _, out = bundle
    assert json.loads((out / "summary.json").read_text())["converged"] is True
    assert len(rows(out / "parameters.csv")) == 12


def test_estimate_reproduces_campaign(bundle, tmp_path):
    ini, out = bundle
    exps = [f"--experiment={out / 'experiments' / f'{k}_raw.csv'}" for k in "AB"]
    assert main(["estimate", "--config", str(ini), *exps, "--out", str(tmp_path)]) == EXIT_OK
    mine = {r["name"]: float(r["estimated"]) for r in rows(tmp_path / "parameters.csv")}
    ref = {r["name"]: float(r["estimated"]) for r in rows(out / "parameters.csv")}
    for k in ref:
        assert mine[k] == pytest.approx(ref[k], rel=1e-9, abs=1e-12)


def test_crlb_and_validate(bundle, tmp_path):
    ini, out = bundle
    a = f"--experiment={out / 'experiments' / 'A_raw.csv'}"
    assert main(["crlb", "--config", str(ini), a, "--out", str(tmp_path)]) == EXIT_OK
    assert len(rows(tmp_path / "crlb.csv")) == 12
    v = f"--experiment={out / 'experiments' / 'V_raw.csv'}"
    assert main(["validate", "--config", str(ini), v, "--params", str(out / "parameters.csv"),
                 "--out", str(tmp_path)]) == EXIT_OK
    tic_row = rows(tmp_path / "tic.csv")[0]
    assert all(0 <= float(tic_row[k]) <= 1 for k in ("V_T", "alpha", "theta", "q"))


def test_estimate_budget_exit_code(bundle, tmp_path):
    ini, out = bundle
    exps = [f"--experiment={out / 'experiments' / f'{k}_raw.csv'}" for k in "AB"]
    rc = main(["estimate", "--config", str(ini), *exps, "--max-iter", "1",
               "--out", str(tmp_path)])
    assert rc == EXIT_NONCONVERGED


def test_output_env_var(bundle, tmp_path, monkeypatch):
    ini, _ = bundle
    monkeypatch.setenv("AWESYSID_OUT", str(tmp_path / "env"))
    assert main(["campaign", "--config", str(ini)]) == EXIT_OK
    assert (tmp_path / "env" / "summary.json").exists()


@pytest.mark.parametrize("argv", [
    ["trim", "--speed", "-5"],
    ["estimate"],
    ["estimate", "--experiment", "/nonexistent/file.csv"],
    ["maneuver", "--kind", "piecewise"],
])
def test_invalid_input(argv):
    assert main(argv) == EXIT_INVALID


def test_malformed_config(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[sensor]\ndelay = -3\n")
    assert main(["trim", "--config", str(bad)]) == EXIT_INVALID
    bad.write_text("not an ini file")
    assert main(["trim", "--config", str(bad)]) == EXIT_INVALID
