"""Files exchanged between the stages.

* frequency stream ``time_s,bus_id,freq_hz`` sorted by (time, bus);
* power stream ``time_s,gen_id,pe_pu`` sorted by (time, generator);
* ground-truth sidecar (JSON): true H, D, ratings and the p_m schedule;
* estimate report (JSON) and the rolling-window trace (CSV).

Floats are written with 17 significant digits so a write/read round trip
is exact and repeated runs are byte-identical.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import InputError
from .estimator import EstimateReport, Measurements, WindowEstimate
from .simulator import AmbientDataset, MechPowerProfile, Segment

FREQ_HEADER = ("time_s", "bus_id", "freq_hz")
POWER_HEADER = ("time_s", "gen_id", "pe_pu")
TRACE_HEADER = ("gen_id", "window_index", "t_start", "H_hat", "D_hat", "pm_hat", "converged", "cond")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_long(path: Path, header, time, ids, values):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, row in zip(time, values):
            ts = _fmt(t)
            for i, v in zip(ids, row):
                w.writerow((ts, i, _fmt(v)))
    return path


def write_measurements(dataset: AmbientDataset, out_dir) -> tuple[Path, Path]:
    """Write ``freq.csv`` and ``power.csv`` into ``out_dir``."""
    if dataset.bus_freq_meas is None or dataset.gen_pe_meas is None:
        raise InputError("dataset has no measurement streams")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fpath = _write_long(out_dir / "freq.csv", FREQ_HEADER, dataset.time, dataset.bus_ids, dataset.bus_freq_meas)
    ppath = _write_long(out_dir / "power.csv", POWER_HEADER, dataset.time, dataset.gen_ids, dataset.gen_pe_meas)
    return fpath, ppath


def _read_long(path, header):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"measurement file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        first = fh.readline().strip()
    if tuple(first.split(",")) != header:
        raise InputError(f"{path}: expected header {','.join(header)}, got {first!r}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    if data.size == 0:
        raise InputError(f"{path}: no samples")
    times, t_idx = np.unique(data[:, 0], return_inverse=True)
    ids_f, c_idx = np.unique(data[:, 1], return_inverse=True)
    if len(data) != len(times) * len(ids_f):
        raise InputError(f"{path}: every time stamp needs exactly one row per channel")
    grid = np.full((len(times), len(ids_f)), np.nan)
    grid[t_idx, c_idx] = data[:, 2]
    if np.isnan(grid).any():
        raise InputError(f"{path}: duplicate or missing (time, channel) rows")
    return times, tuple(int(i) for i in ids_f), grid


def read_measurements(freq_path, power_path, nominal_freq: float = 60.0) -> Measurements:
    """Load both streams; they must share the time grid."""
    tf, buses, freq = _read_long(freq_path, FREQ_HEADER)
    tp, gens, pe = _read_long(power_path, POWER_HEADER)
    if tf.shape != tp.shape or not np.allclose(tf, tp, rtol=0, atol=1e-9):
        raise InputError("frequency and power streams are not on the same time grid")
    return Measurements(tf, buses, freq, gens, pe, nominal_freq)


# ---------------------------------------------------------------------------
# Ground truth


def ground_truth_dict(dataset: AmbientDataset) -> dict:
    gens = []
    for j, gid in enumerate(dataset.gen_ids):
        prof = dataset.profiles[gid]
        gens.append({
            "id": int(gid),
            "H_s": float(dataset.H[j]),
            "D_pu": float(dataset.D[j]),
            "rated_mva": float(dataset.S_rated[j]),
            "pm_segments": [
                {"start_time": s.start_time, "end_time": s.end_time, "kind": s.kind,
                 "start_value": s.start_value, "end_value": s.end_value}
                for s in prof.segments
            ],
            "pe_schedule": [list(step) for step in prof.pe_schedule],
        })
    return {
        "case": dataset.case_name,
        "nominal_freq_hz": dataset.nominal_freq,
        "pm_change_times": dataset.pm_change_times,
        "generators": gens,
    }


def write_ground_truth(dataset: AmbientDataset, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(ground_truth_dict(dataset), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_ground_truth(path) -> dict:
    """Sidecar as a dict, with ``profiles`` rebuilt as :class:`MechPowerProfile` objects."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"ground-truth file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        profiles = {}
        for g in doc["generators"]:
            segs = tuple(Segment(**s) for s in g["pm_segments"])
            profiles[int(g["id"])] = MechPowerProfile(segs, tuple(tuple(s) for s in g["pe_schedule"]))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed ground-truth file ({exc})") from None
    doc["profiles"] = profiles
    return doc


# ---------------------------------------------------------------------------
# Estimate outputs


def report_dict(report: EstimateReport) -> dict:
    gens = {}
    for gid, e in report.generators.items():
        gens[str(gid)] = {
            "H_hat": e.H_hat,
            "D_hat": e.D_hat,
            "pm_hat": e.pm_hat,
            "bdu_case": e.case_tag.value,
            "partition": [{"start": iv.start, "end": iv.end} for iv in e.partition.intervals],
            "samples_per_interval": e.samples_per_interval,
            "converged_windows": int(sum(w.converged for w in e.windows)),
            "windows": len(e.windows),
            **({"are_pct": e.are} if e.are is not None else {}),
        }
    out = {
        "generators": gens,
        "H_sys_hat": report.H_sys,
        "rotor_speed_cases": dict(sorted(report.rotor_case_counts.items())),
    }
    if report.H_sys_true is not None:
        out["H_sys_true"] = report.H_sys_true
    return out


def write_report(report: EstimateReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report_dict(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_window_trace(windows: dict[int, list[WindowEstimate]], path) -> Path:
    """One row per rolling window; ``windows`` maps generator id to its windows."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for gid, wins in windows.items():
            for win in wins:
                w.writerow((gid, win.window_index, _fmt(win.t_start), _fmt(win.H_hat), _fmt(win.D_hat),
                            _fmt(win.pm_hat), int(win.converged), _fmt(win.condition_number)))
    return path


def read_window_trace(path) -> dict[int, dict[str, np.ndarray]]:
    """Window trace grouped by generator, one array per column."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out: dict[int, dict[str, list]] = {}
    for r in rows:
        cols = out.setdefault(int(r["gen_id"]), {k: [] for k in TRACE_HEADER[1:]})
        for k in TRACE_HEADER[1:]:
            cols[k].append(float(r[k]))
    return {g: {k: np.asarray(v) for k, v in cols.items()} for g, cols in out.items()}
