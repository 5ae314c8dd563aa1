import csv
import math

import numpy as np
import pytest

from ocmpc.experiments import (
    EXIT_CALIBRATION, EXIT_CONFIG, EXIT_OK, CalibrationError, CalibrationSettings, ConfigError,
    ExperimentSpec, RunResult, aggregate, calibrate_capacity, dominance_violations, load_spec,
    main, parse_config_text, proportional_loss_fraction, resolve_capacity, run_experiment,
    spec_from_mapping, spec_to_text,
)
from ocmpc.model import SystemConfig
from ocmpc.traffic import MmppConfig

SMALL = """\
system.M = 2
system.P = 3
system.W = 2
system.T = 8
system.C_bar = 1.5
system.ds = 0.6666666666666666
mmpp.rate_scale = 0.1
experiment.runs = 2
experiment.seed = 5
"""


def write_cfg(tmp_path, text=SMALL, name="small.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def result(method, run, final):
    return RunResult(method, run, np.array([0.0, final]), None, {}, "d")


def test_parse_rejects_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("system.M = 2\nsystem.colour = blue\n")
    with pytest.raises(ConfigError):
        parse_config_text("system.M = 2\nsystem.M = 3\n")


def test_spec_from_config_values():
    spec = spec_from_mapping(parse_config_text(SMALL))
    assert spec.system.M == 2 and spec.system.C_bar == 1.5
    assert spec.mmpp.rate_scale == 0.1
    assert spec.runs == 2 and spec.master_seed == 5
    assert not spec.auto_capacity
    assert spec_from_mapping(parse_config_text("system.C_bar = auto\n")).auto_capacity


def test_overrides_and_bad_values():
    spec = spec_from_mapping(parse_config_text(SMALL), runs=4, master_seed=None)
    assert spec.runs == 4 and spec.master_seed == 5
    with pytest.raises(ConfigError):
        spec_from_mapping(parse_config_text("system.M = two\n"))
    with pytest.raises(ConfigError):
        spec_from_mapping(parse_config_text("experiment.methods = batch, magic\n"))
    with pytest.raises(ConfigError):
        spec_from_mapping(parse_config_text("experiment.runs = 0\n"))
    with pytest.raises(ConfigError):
        spec_from_mapping(parse_config_text("mmpp.P_lambda = 1, 0; 0, 1; 0, 0\n"))


def test_spec_text_roundtrip():
    spec = spec_from_mapping(parse_config_text(SMALL))
    again = spec_from_mapping(parse_config_text(spec_to_text(spec)))
    assert again.system == spec.system and again.mmpp == spec.mmpp
    assert again.runs == spec.runs and again.methods == spec.methods


def test_table_config_loads(tmp_path):
    spec = load_spec("configs/table1.cfg")
    assert spec.auto_capacity
    assert (spec.system.M, spec.system.P, spec.system.W, spec.system.T) == (16, 3, 5, 100)
    assert spec.system.k == (10.0, 4.0, 1.0) and spec.system.eta == 1e4
    with pytest.raises(ConfigError):
        load_spec(tmp_path / "missing.cfg")


def test_loss_fraction_sentinels():
    system, mmpp = SystemConfig(), MmppConfig()
    assert proportional_loss_fraction(system, mmpp, math.inf, 10, 1, 0) == 0.0
    assert proportional_loss_fraction(system, mmpp, 0.0, 10, 1, 0) == 1.0
    lo = proportional_loss_fraction(system, mmpp, 8.0, 30, 2, 0)
    hi = proportional_loss_fraction(system, mmpp, 1.0, 30, 2, 0)
    assert 0 < lo < hi < 1


def test_calibration_picks_first_grid_point_in_range():
    cal = CalibrationSettings(grid=(1.0, 8.0), horizon=20, runs=1)
    spec = ExperimentSpec(calibration=cal, auto_capacity=True)
    ds, C_bar, search = calibrate_capacity(spec, (0.0, 1.0))
    assert (C_bar, ds) == (8.0, 0.125) and len(search) == 1
    frac8 = search[0][1]
    ds, C_bar, search = calibrate_capacity(spec, (frac8 + 1e-9, 1.0))
    assert C_bar == 1.0 and [c for c, _ in search] == [8.0, 1.0]
    with pytest.raises(CalibrationError) as err:
        calibrate_capacity(spec, (0.999, 1.0))
    assert len(err.value.frontier) == 2


def test_calibration_grid_validation():
    with pytest.raises(ConfigError):
        CalibrationSettings(grid=(math.inf, 1.0))
    with pytest.raises(ConfigError):
        CalibrationSettings(grid=(0.0,))


def test_resolve_capacity_is_noop_when_fixed():
    spec = spec_from_mapping(parse_config_text(SMALL))
    assert resolve_capacity(spec) == (spec, [])


def test_unresolved_capacity_refuses_to_run():
    with pytest.raises(ConfigError):
        run_experiment(ExperimentSpec(auto_capacity=True))


def test_zero_rate_proportional_series_is_zero():
    spec = spec_from_mapping(parse_config_text(SMALL.replace("rate_scale = 0.1", "rate_scale = 0")),
                             runs=1, methods=("proportional",))
    (res,) = run_experiment(spec)
    assert res.method == "proportional" and np.all(res.cum_cost == 0)
    assert len(res.cum_cost) == spec.system.T


def test_paired_runs_and_monotone_series():
    spec = spec_from_mapping(parse_config_text(SMALL))
    results = run_experiment(spec)
    assert [(r.run, r.method) for r in results] == [
        (i, m) for i in range(2) for m in ("batch", "mpc", "ocmpc", "proportional")]
    for r in results:
        assert not r.failed
        assert np.all(np.diff(r.cum_cost) >= 0)
    digests = {(r.run, r.trace_digest) for r in results}
    assert len(digests) == 2


def test_aggregate_gap_of_means():
    results = [result("batch", 0, 10.0), result("batch", 1, 30.0),
               result("mpc", 0, 12.0), result("mpc", 1, 30.0),
               result("ocmpc", 0, 9.0), result("ocmpc", 1, 31.0)]
    summary, gaps = aggregate(results)
    assert gaps["mpc"] == pytest.approx(0.05)
    assert gaps["ocmpc"] == pytest.approx(0.0)
    mean, lo, hi = summary["batch"]
    assert mean[-1] == 20.0 and lo[-1] < 20.0 < hi[-1]
    assert dominance_violations(results) == [(0, "ocmpc", 10.0, 9.0)]


def test_aggregate_skips_failed_runs():
    failed = RunResult("mpc", 1, None, None, {}, "d", "CenteringError: no")
    summary, gaps = aggregate([result("batch", 0, 10.0), result("batch", 1, 20.0),
                               result("mpc", 0, 11.0), failed])
    assert gaps["mpc"] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        aggregate([failed])


def test_cli_simulate_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(write_cfg(tmp_path)), "--out", str(out),
                 "--runs", "1", "--methods", "batch,proportional"]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "results.csv")))
    assert {r["method"] for r in rows} == {"batch", "proportional"}
    assert len(rows) == 2 * 8 and all(r["step_ms"] == "" for r in rows)
    timing = list(csv.DictReader(open(out / "timing.csv")))
    assert {r["method"] for r in timing} == {"proportional"}
    for name in ("summary.csv", "gaps.csv", "manifest.txt"):
        assert (out / name).exists()
    assert "gap vs batch" in capsys.readouterr().out


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = write_cfg(tmp_path, "system.nonsense = 1\n", "bad.cfg")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_calibration_failure_exit_code(tmp_path):
    text = SMALL.replace("system.C_bar = 1.5\nsystem.ds = 0.6666666666666666\n", "") + \
        "calibration.grid = 8\ncalibration.target = 0.99, 1\ncalibration.runs = 1\ncalibration.horizon = 5\n"
    cfg = write_cfg(tmp_path, text, "cal.cfg")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CALIBRATION


def test_cli_calibrate_and_trace(tmp_path):
    text = SMALL + "calibration.grid = 4, 1\ncalibration.target = 0, 1\ncalibration.runs = 1\n"
    cfg = write_cfg(tmp_path, text, "cal.cfg")
    assert main(["calibrate", "--config", str(cfg), "--out", str(tmp_path / "cal")]) == EXIT_OK
    assert "system.C_bar = 4.0" in (tmp_path / "cal" / "calibrated.cfg").read_text()
    trace = tmp_path / "t" / "trace.csv"
    assert main(["trace", "--config", str(cfg), "--seed", "3", "--out", str(trace)]) == EXIT_OK
    assert len(trace.read_text().splitlines()) == 9


def test_parallel_runs_match_serial(tmp_path):
    cfg = str(write_cfg(tmp_path))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["simulate", "--config", cfg, "--out", str(b), "--jobs", "2"]) == EXIT_OK
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
