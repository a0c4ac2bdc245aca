import json

import numpy as np
import pytest

from ambient_inertia.errors import InputError
from ambient_inertia.estimator import EstimatorConfig, Measurements, run_estimation
from ambient_inertia.network import build_fdf
from ambient_inertia.streams import (
    read_ground_truth,
    read_measurements,
    read_window_trace,
    write_ground_truth,
    write_measurements,
    write_report,
    write_window_trace,
)


def test_measurement_round_trip(noisy14, tmp_path):
    fpath, ppath = write_measurements(noisy14, tmp_path)
    meas = read_measurements(fpath, ppath)
    ref = Measurements.from_dataset(noisy14)
    np.testing.assert_array_equal(meas.time, ref.time)
    np.testing.assert_array_equal(meas.freq_hz, ref.freq_hz)
    np.testing.assert_array_equal(meas.pe, ref.pe)
    assert meas.bus_ids == ref.bus_ids and meas.gen_ids == ref.gen_ids
    assert fpath.read_text().splitlines()[0] == "time_s,bus_id,freq_hz"


def test_ground_truth_round_trip(noisy14, tmp_path):
    doc = read_ground_truth(write_ground_truth(noisy14, tmp_path / "gt.json"))
    assert doc["pm_change_times"] == noisy14.pm_change_times
    t = noisy14.time
    for gid, prof in noisy14.profiles.items():
        np.testing.assert_array_equal(doc["profiles"][gid].pm(t), prof.pm(t))
        np.testing.assert_array_equal(doc["profiles"][gid].pe_setpoint(t), prof.pe_setpoint(t))


def test_bad_header(tmp_path, noisy14):
    fpath, ppath = write_measurements(noisy14, tmp_path)
    fpath.write_text("t,bus,f\n0,1,60\n")
    with pytest.raises(InputError, match="expected header"):
        read_measurements(fpath, ppath)


def test_missing_row(tmp_path, noisy14):
    fpath, ppath = write_measurements(noisy14, tmp_path)
    lines = fpath.read_text().splitlines()
    fpath.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(InputError, match="one row per channel"):
        read_measurements(fpath, ppath)


def test_missing_file(tmp_path):
    with pytest.raises(InputError, match="not found"):
        read_measurements(tmp_path / "nope.csv", tmp_path / "nope2.csv")


def test_malformed_truth(tmp_path):
    p = tmp_path / "gt.json"
    p.write_text("{}")
    with pytest.raises(InputError, match="malformed"):
        read_ground_truth(p)


def test_report_and_trace(case14, clean14, tmp_path):
    cfg = EstimatorConfig(param_bound=0.0, freq_error_bound=0.0, pe_error_bound=0.0)
    rep = run_estimation(build_fdf(case14), case14, Measurements.from_dataset(clean14), cfg)
    doc = json.loads(write_report(rep, tmp_path / "e.json").read_text())
    assert set(doc["generators"]) == {"1", "2", "3", "4", "5"}
    assert doc["H_sys_hat"] == rep.H_sys
    trace = read_window_trace(write_window_trace(rep.windows, tmp_path / "w.csv"))
    for gid, est in rep.generators.items():
        np.testing.assert_array_equal(trace[gid]["H_hat"], [w.H_hat for w in est.windows])
