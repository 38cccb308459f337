import json
import math
import subprocess
import sys

import numpy as np
import pytest
import yaml

from jacdpc import cli
from jacdpc.scenario import (ScenarioError, bundled_scenarios, dump_scenario, load_scenario, parse_scenario,
                             scenario_to_dict)
from jacdpc.simulator import run
from jacdpc.tracecsv import read_trace_csv, trace_header

SHORT = """\
chain:
  - {axis: S1, gain: pi, range: [-1, 1]}
  - {axis: [0.0, 0.6, 0.8], gain: 2.5}
  - {axis: S3}
scrambler:
  base_sop: [1, 0, 0]
  drift_rate_rad_s: 2.0e+3
  perturb_sigma: 1.0e-4
  seed: 4
loop:
  sample_rate_hz: 1.0e+6
  delay_s: 2.0e-6
  activation_time_s: 1.0e-5
  duration_s: 1.03e-4
  target_sop: [0, 0.6, 0.8]
  task_rows: [1, 2, 3]
solver:
  method: GradientProjection
  lambda: 0.1
  mu: 0.1
  rank_tolerance: 1.0e-9
  nullspace_threshold: null
"""


@pytest.fixture
def short(tmp_path):
    p = tmp_path / "short.yaml"
    p.write_text(SHORT)
    return p


def edited(tmp_path, old, new, name="edited.yaml"):
    assert old in SHORT
    p = tmp_path / name
    p.write_text(SHORT.replace(old, new))
    return p


# scenario files

def test_bundled_scenarios_encode_the_experiments():
    names = bundled_scenarios()
    assert {"fig3", "fig4", "fig5", "s3_plane"} <= set(names)
    for name, m, thr in (("fig3", 3, None), ("fig4", 4, None), ("fig5", 4, 1.0)):
        sc = load_scenario(names[name])
        lp = sc.loop
        assert lp.chain.m == m
        np.testing.assert_array_equal(lp.chain.gains, np.pi)
        assert [int(np.argmax(a)) + 1 for a in lp.chain.axes] == [1, 3, 1, 3][:m]
        assert (lp.sample_rate, lp.delay, lp.activation_time, lp.duration) == (5e7, 1e-6, 2e-3, 4e-3)
        np.testing.assert_array_equal(lp.target_sop, [0, 0.6, 0.8])
        assert lp.solver.mu == 0.1 and lp.solver.nullspace_threshold == thr
        assert sc.scrambler.drift_rate == 1e5


@pytest.mark.parametrize("name", ["fig3", "fig4", "fig5", "s3_plane", "short"])
def test_round_trip(name, short):
    path = short if name == "short" else bundled_scenarios()[name]
    sc = load_scenario(path)
    again = parse_scenario(yaml.safe_load(dump_scenario(sc)))
    assert again == sc
    assert dump_scenario(again) == dump_scenario(sc)


def test_resolve_accepts_scenario_suffix(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.resolve_scenario_path("fig3.scenario") == bundled_scenarios()["fig3"]
    assert cli.resolve_scenario_path("fig5") == bundled_scenarios()["fig5"]


@pytest.mark.parametrize("old,new,line,fragment", [
    ("  mu: 0.1\n", "  mu: 0.1\n  muu: 2\n", 21, "unknown key 'muu'"),
    ("  seed: 4\n", "  seed: 4\n  colour: red\n", 10, "unknown key 'colour'"),
    ("target_sop: [0, 0.6, 0.8]", "target_sop: [0, 0, 0]", 15, "norm"),
    ("gain: 2.5", "gain: 0", 3, "gain"),
    ("  - {axis: S3}", "  - {axis: S4}", 4, "axis"),
    ("mu: 0.1", "mu: 1.5", 20, "mu"),
    ("task_rows: [1, 2, 3]", "task_rows: [1, 1]", 16, "duplicate"),
    ("delay_s: 2.0e-6", "delay_s: soon", 12, "number"),
    ("method: GradientProjection", "method: Newton", 18, "unknown solver method"),
    ("solver:", "solvers:", 17, "unknown section"),
])
def test_line_level_diagnostics(tmp_path, old, new, line, fragment):
    with pytest.raises(ScenarioError) as e:
        load_scenario(edited(tmp_path, old, new))
    assert e.value.line == line
    assert fragment in e.value.message
    assert f":{line}:" in str(e.value)


def test_yaml_syntax_error_has_line(tmp_path):
    p = tmp_path / "broken.yaml"
    p.write_text("chain:\n  - {axis: S1\nloop: {}\n")
    with pytest.raises(ScenarioError) as e:
        load_scenario(p)
    assert e.value.line is not None


# simulate

def test_simulate_writes_golden_header_and_rows(short, tmp_path, capsys):
    out = tmp_path / "trace.csv"
    assert cli.main(["simulate", str(short), "--out", str(out), "--decimation", "7"]) == 0
    header, data = read_trace_csv(out)
    assert header == ["t", "s1", "s2", "s3", "err", "phi_1", "phi_2", "phi_3", "ns_active", "sigma2"]
    assert data.shape == (math.ceil(103 / 7), 7 + 3)
    printed = capsys.readouterr().out
    for key in ("convergence_time", "steady_state_error", "max_abs_phi", "nullspace_duty",
                "bounded_fraction(1.5)"):
        assert key in printed


def test_golden_header_per_stage_count():
    assert ",".join(trace_header(3)) == "t,s1,s2,s3,err,phi_1,phi_2,phi_3,ns_active,sigma2"
    assert ",".join(trace_header(4)) == "t,s1,s2,s3,err,phi_1,phi_2,phi_3,phi_4,ns_active,sigma2"


def test_csv_keeps_nine_significant_digits(short, tmp_path):
    out = tmp_path / "trace.csv"
    assert cli.main(["simulate", str(short), "--out", str(out), "--decimation", "1"]) == 0
    _, data = read_trace_csv(out)
    sc = load_scenario(short)
    trace, _ = run(sc.loop, sc.scrambler)
    np.testing.assert_allclose(data[:, 1:4], trace.s_out, rtol=1e-11, atol=1e-300)
    np.testing.assert_allclose(data[:, 5:8], trace.phi, rtol=1e-11, atol=1e-300)
    np.testing.assert_array_equal(data[:, 8], trace.nullspace_active)


def test_simulate_byte_identical(short, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["simulate", str(short), "--out", str(a)]) == 0
    assert cli.main(["simulate", str(short), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_bad_target_exits_2_without_csv(tmp_path, capsys):
    bad = edited(tmp_path, "target_sop: [0, 0.6, 0.8]", "target_sop: [0, 0, 0]")
    out = tmp_path / "never.csv"
    assert cli.main(["simulate", str(bad), "--out", str(out)]) == 2
    assert not out.exists()
    assert "edited.yaml:15:" in capsys.readouterr().err


def test_simulate_io_errors_exit_3(short, tmp_path):
    assert cli.main(["simulate", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "x.csv")]) == 3
    assert cli.main(["simulate", str(short), "--out", str(tmp_path / "no" / "dir" / "x.csv")]) == 3
    assert list(tmp_path.iterdir()) == [short]


def test_simulate_usage_errors_exit_2(short, tmp_path):
    assert cli.main(["simulate", str(short), "--out", str(tmp_path / "x.csv"), "--decimation", "0"]) == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["simulate", str(short)])
    assert e.value.code == 2


def test_simulate_fig3_reports_lock(tmp_path, capsys):
    out = tmp_path / "fig3.csv"
    assert cli.main(["simulate", "fig3", "--out", str(out)]) == 0
    header, data = read_trace_csv(out)
    assert len(header) == 7 + 3 and data.shape == (2000, 10)
    assert "locked: yes" in capsys.readouterr().out


def test_simulate_fig5_reports_duty(tmp_path, capsys):
    assert cli.main(["simulate", "fig5", "--out", str(tmp_path / "fig5.csv")]) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("nullspace_duty"))
    assert 0.1 <= float(line.split(":")[1]) <= 0.35


# check-jacobian

def test_check_jacobian_three_stage(capsys):
    assert cli.main(["check-jacobian", "fig3", "--trials", "1000"]) == 0
    out = capsys.readouterr().out
    fd = float(next(l for l in out.splitlines() if l.startswith("max fd_rel_error")).split()[2])
    assert fd < 1e-5
    assert "minor_null_norm" not in out


def test_check_jacobian_four_stage_reports_minor_vector(capsys):
    assert cli.main(["check-jacobian", "fig4", "--trials", "200"]) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("max minor_null_norm"))
    assert float(line.split()[2]) < 1e-9


def test_check_jacobian_zero_trials():
    assert cli.main(["check-jacobian", "fig3", "--trials", "0"]) == 2


def test_check_jacobian_failure_serializes_replayable_config(monkeypatch, capsys):
    monkeypatch.setitem(cli.LIMITS, "orthogonality", 1e-18)
    assert cli.main(["check-jacobian", "fig3", "--trials", "50", "--seed", "1"]) == 1
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["property"] == "orthogonality"
    chain = load_scenario(bundled_scenarios()["fig3"]).loop.chain
    replay = cli.jacobian_checks(chain, np.array(report["phi"]), np.array(report["s_in"]))
    assert replay["orthogonality"] == report["value"]


# sweep

def test_sweep_mu(short, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert cli.main(["sweep", str(short), "--param", "mu=0.05,0.1,0.2", "--out-dir", str(out)]) == 0
    csvs = sorted(p.name for p in out.glob("*.csv") if p.name != "summary.csv")
    assert len(csvs) == 3
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("mu,csv,convergence_time")
    assert [l.split(",")[0] for l in lines[1:]] == ["0.05", "0.1", "0.2"]
    assert "nullspace_duty" in capsys.readouterr().out


def test_sweep_parallel_matches_serial(short, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["sweep", str(short), "--param", "seed=1,2", "--out-dir", str(a)]) == 0
    assert cli.main(["sweep", str(short), "--param", "scrambler.seed=1,2", "--out-dir", str(b),
                     "--jobs", "2"]) == 0
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()


@pytest.mark.parametrize("spec", ["foo=1,2", "mu=", "mu", "loop.mu=0.1", "target_sop=1"])
def test_sweep_bad_param_exits_2(short, tmp_path, spec):
    out = tmp_path / "sweep"
    assert cli.main(["sweep", str(short), "--param", spec, "--out-dir", str(out)]) == 2
    assert not out.exists()


def test_sweep_invalid_value_writes_nothing(short, tmp_path):
    out = tmp_path / "sweep"
    assert cli.main(["sweep", str(short), "--param", "mu=0.1,1.5", "--out-dir", str(out)]) == 2
    assert not out.exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "jacdpc", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "check-jacobian" in res.stdout


def test_scenario_dict_has_documented_keys(short):
    doc = scenario_to_dict(load_scenario(short))
    assert set(doc["scrambler"]) >= {"base_sop", "drift_rate_rad_s", "perturb_sigma", "seed"}
    assert set(doc["loop"]) >= {"sample_rate_hz", "delay_s", "activation_time_s", "duration_s", "target_sop",
                                "task_rows"}
    assert set(doc["solver"]) == {"method", "lambda", "mu", "rank_tolerance", "nullspace_threshold"}
    assert set(doc["chain"][0]) == {"axis", "gain", "range"}
