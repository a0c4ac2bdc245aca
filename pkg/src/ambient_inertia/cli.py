"""Command line: simulate, estimate, report, run and a BDU debug solver.

Every stage reads one YAML run configuration; ``--seed`` and ``--out``
override the file. Exit codes: 0 success, 2 input error, 3 acceptance
thresholds missed, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bdu import read_problem_file, solve_bdu
from .errors import ConfigurationError, DetectionError, InertiaError, InputError
from .estimator import (
    ConstancyPartition,
    EstimatorConfig,
    GeneratorEstimate,
    Interval,
    are_metric,
    attach_truth,
    pm_are_average,
    run_estimation,
)
from .network import DATA_DIR, build_fdf, load_bundled_case, parse_case, perturb_parameters
from .simulator import SimulationConfig, run_scenario
from .streams import (
    read_ground_truth,
    read_measurements,
    write_ground_truth,
    write_measurements,
    write_report,
    write_window_trace,
)

log = logging.getLogger("ambient_inertia")

EXIT_OK, EXIT_INPUT, EXIT_THRESHOLD, EXIT_NUMERICAL = 0, 2, 3, 4
CONFIG_DIR = DATA_DIR / "configs"

# config-file names of the estimator settings
_ESTIMATOR_KEYS = {
    "window_len_s": "window_len",
    "hop": "hop",
    "eps_rel": "eps_rel",
    "min_run": "min_run",
    "min_interval_len_s": "min_interval_len",
    "trim": "trim",
    "consensus": "consensus",
    "cond_max": "cond_max",
    "smoothing_window": "smoothing_window",
    "eta_rotor": "eta_rotor",
    "eta_b_rotor": "eta_b_rotor",
    "swing_eta_rel": "swing_eta_rel",
}
_THRESHOLD_KEYS = ("are_h_pct", "are_d_pct", "are_pm_pct", "h_sys_abs_s")


class StageError(InertiaError):
    """Wraps a failure with the name of the stage that raised it."""

    def __init__(self, stage: str, cause: InertiaError):
        super().__init__(f"[{stage}] {cause}")
        self.exit_code = cause.exit_code


@dataclass
class RunConfig:
    case: str
    output_dir: Path
    seed: int = 0
    simulation: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        base_dir = path.resolve().parent
        if not path.is_file():
            bundled = CONFIG_DIR / f"{path.name}.yaml"
            if path.suffix or not bundled.is_file():
                raise InputError(f"configuration file not found: {path}")
            # bundled configs write relative to the working directory
            path, base_dir = bundled, Path.cwd()
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise InputError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(doc, dict):
            raise InputError(f"{path}: top level must be a mapping")
        known = {"case", "output_dir", "seed", "simulation", "estimator", "thresholds"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
        if "case" not in doc:
            raise ConfigurationError(f"{path}: missing required key 'case'")
        cfg = cls(
            case=str(doc["case"]),
            output_dir=Path(doc.get("output_dir", "out")),
            seed=int(doc.get("seed", 0)),
            simulation=dict(doc.get("simulation") or {}),
            estimator=dict(doc.get("estimator") or {}),
            thresholds=dict(doc.get("thresholds") or {}),
            base_dir=base_dir,
        )
        cfg.check()
        return cfg

    def check(self):
        sim_fields = {f.name for f in dataclasses.fields(SimulationConfig)} - {"seed"}
        bad = set(self.simulation) - sim_fields
        if bad:
            raise ConfigurationError(f"unknown simulation settings {sorted(bad)}")
        bad = set(self.estimator) - set(_ESTIMATOR_KEYS)
        if bad:
            raise ConfigurationError(f"unknown estimator settings {sorted(bad)}")
        bad = set(self.thresholds) - set(_THRESHOLD_KEYS)
        if bad:
            raise ConfigurationError(f"unknown thresholds {sorted(bad)}")

    def sim_config(self) -> SimulationConfig:
        kw = dict(self.simulation)
        for k in ("pm_step_range", "ramp_duration_range", "ambient_band"):
            if k in kw:
                kw[k] = tuple(kw[k])
        try:
            return SimulationConfig(seed=self.seed, **kw).validate()
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def estimator_config(self) -> EstimatorConfig:
        sim = self.sim_config()
        kw = {_ESTIMATOR_KEYS[k]: v for k, v in self.estimator.items()}
        return EstimatorConfig(
            param_bound=sim.param_perturb_bound,
            freq_error_bound=sim.freq_error_bound,
            pe_error_bound=sim.pe_error_bound,
            **kw,
        )

    def load_case(self):
        candidate = Path(self.case)
        if not candidate.is_absolute():
            candidate = self.base_dir / candidate
        if candidate.suffix in (".yaml", ".yml") or candidate.is_file():
            if not candidate.is_file():
                raise InputError(f"case file not found: {candidate}")
            return parse_case(candidate)
        try:
            return load_bundled_case(self.case)
        except FileNotFoundError:
            raise InputError(f"case file not found: {candidate}") from None

    def resolved(self) -> dict:
        """Canonical content used for the manifest hash."""
        return {
            "case": self.case,
            "seed": self.seed,
            "simulation": dataclasses.asdict(self.sim_config()),
            "estimator": dataclasses.asdict(self.estimator_config()),
            "thresholds": dict(sorted(self.thresholds.items())),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def out(self) -> Path:
        out = self.output_dir if self.output_dir.is_absolute() else self.base_dir / self.output_dir
        return out


def perturbation_seed(seed: int) -> int:
    """Seed of the estimator's model perturbation, independent of the simulation streams."""
    return int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(cfg: RunConfig, stage: str, outputs: list[Path]):
    manifest = {
        "stage": stage,
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.resolved(),
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    path = cfg.out / f"manifest_{stage}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n", encoding="utf-8")
    return path


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except InertiaError as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# Stages


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    case = cfg.load_case()
    sim = cfg.sim_config()
    ds = run_scenario(case, sim)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    files = list(write_measurements(ds, out))
    files.append(write_ground_truth(ds, out / "ground_truth.json"))
    _write_manifest(cfg, "simulate", files)
    log.info("simulated %s: %d frames, %d buses, %d generators", case.name, len(ds.time), len(ds.bus_ids),
             len(ds.gen_ids))
    return files


def cmd_estimate(cfg: RunConfig, freq_path=None, power_path=None):
    case = cfg.load_case()
    out = cfg.out
    freq_path = Path(freq_path) if freq_path else out / "freq.csv"
    power_path = Path(power_path) if power_path else out / "power.csv"
    meas = read_measurements(freq_path, power_path, case.nominal_freq)
    est_cfg = cfg.estimator_config()
    model_case = perturb_parameters(case, est_cfg.param_bound, perturbation_seed(cfg.seed))
    fdf = build_fdf(model_case)
    out.mkdir(parents=True, exist_ok=True)
    trace = out / "window_trace.csv"
    try:
        report = run_estimation(fdf, case, meas, est_cfg)
    except DetectionError as exc:
        if exc.windows is not None:
            write_window_trace(exc.windows, trace)
            log.warning("detection failed; window trace written to %s", trace)
        raise
    truth_path = out / "ground_truth.json"
    if truth_path.is_file():
        attach_truth(report, case, read_ground_truth(truth_path)["profiles"])
    files = [write_report(report, out / "estimate.json"), write_window_trace(report.windows, trace)]
    _write_manifest(cfg, "estimate", files)
    return report, files


def cmd_report(cfg: RunConfig) -> tuple[bool, list[Path]]:
    """Tables from ``estimate.json`` and the sidecar; returns (thresholds met, files)."""
    case = cfg.load_case()
    out = cfg.out
    est_path = out / "estimate.json"
    if not est_path.is_file():
        raise InputError(f"estimate file not found: {est_path}")
    est = json.loads(est_path.read_text(encoding="utf-8"))
    truth = read_ground_truth(out / "ground_truth.json")
    truth_gens = {int(g["id"]): g for g in truth["generators"]}

    rows = []
    for gid in sorted(int(k) for k in est["generators"]):
        e = est["generators"][str(gid)]
        t = truth_gens[gid]
        part = ConstancyPartition(tuple(Interval(d["start"], d["end"]) for d in e["partition"]))
        ge = GeneratorEstimate(gid, e["H_hat"], e["D_hat"], e["pm_hat"], part, None, [])
        rows.append((gid, are_metric(e["H_hat"], t["H_s"]), are_metric(e["D_hat"], t["D_pu"]),
                     pm_are_average(ge, truth["profiles"][gid])))
    table = out / "table_per_generator.csv"
    with table.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("gen", "ARE_H_pct", "ARE_D_pct", "ARE_pm_avg_pct"))
        for r in rows:
            w.writerow((r[0],) + tuple(f"{v:.6g}" for v in r[1:]))

    ratings = np.array([truth_gens[r[0]]["rated_mva"] for r in rows])
    h_true = float(np.dot([truth_gens[r[0]]["H_s"] for r in rows], ratings) / ratings.sum())
    h_est = float(est["H_sys_hat"])
    sys_path = out / "system_inertia.csv"
    with sys_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("case", "H_sys_true_s", "H_sys_hat_s", "abs_error_s", "ARE_pct"))
        w.writerow((case.name, f"{h_true:.6f}", f"{h_est:.6f}", f"{abs(h_est - h_true):.6g}",
                    f"{are_metric(h_est, h_true):.6g}"))

    th = cfg.thresholds
    ok = True
    checks = [("are_h_pct", 1), ("are_d_pct", 2), ("are_pm_pct", 3)]
    for key, col in checks:
        if key in th:
            worst = max(r[col] for r in rows)
            if worst > th[key]:
                log.warning("threshold %s=%g missed: worst %.4g", key, th[key], worst)
                ok = False
    if "h_sys_abs_s" in th and abs(h_est - h_true) > th["h_sys_abs_s"]:
        log.warning("threshold h_sys_abs_s=%g missed: error %.4g s", th["h_sys_abs_s"], abs(h_est - h_true))
        ok = False
    return ok, [table, sys_path]


def cmd_run(cfg: RunConfig) -> bool:
    _stage("simulate", cmd_simulate, cfg)
    _stage("estimate", cmd_estimate, cfg)
    ok, _ = _stage("report", cmd_report, cfg)
    return ok


def cmd_bdu_solve(matrix_path) -> dict:
    problem = read_problem_file(matrix_path)
    sol = solve_bdu(problem)
    return {
        "x": sol.x.tolist(),
        "case": sol.case_tag.value,
        "psi": sol.psi_hat,
        "tau1": sol.tau1,
        "tau2": sol.tau2,
        "worst_case_objective": sol.worst_case_objective,
    }


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ambient-inertia",
        description="Inertia and damping estimation from ambient PMU data.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True,
                       help="run configuration (YAML path or bundled name: ieee14, ieee39)")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=None, help="override the configured output directory")

    common(sub.add_parser("simulate", help="write measurement streams and the ground-truth sidecar"))
    p = sub.add_parser("estimate", help="estimate H, D and p_m from measurement streams")
    common(p)
    p.add_argument("--freq", default=None, help="frequency stream CSV (default: <out>/freq.csv)")
    p.add_argument("--power", default=None, help="power stream CSV (default: <out>/power.csv)")
    common(sub.add_parser("report", help="ARE tables from an estimate and its ground truth"))
    common(sub.add_parser("run", help="simulate, estimate and report"))
    p = sub.add_parser("bdu-solve", help="solve one BDU problem from a text file (debug)")
    p.add_argument("--matrix", required=True, help="problem file: 'eta v', 'eta_b v', rows 'a1 .. an | b'")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = Path(args.out).resolve()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "bdu-solve":
            print(json.dumps(cmd_bdu_solve(args.matrix), indent=2))
            return EXIT_OK
        cfg = _load_config(args)
        if args.command == "simulate":
            for path in _stage("simulate", cmd_simulate, cfg):
                print(path)
        elif args.command == "estimate":
            report, files = _stage("estimate", cmd_estimate, cfg, args.freq, args.power)
            print(f"H_sys_hat = {report.H_sys:.6f} s")
            for path in files:
                print(path)
        elif args.command == "report":
            ok, files = _stage("report", cmd_report, cfg)
            for path in files:
                print(path)
            return EXIT_OK if ok else EXIT_THRESHOLD
        elif args.command == "run":
            ok = cmd_run(cfg)
            print(f"outputs in {cfg.out}")
            if not ok:
                print("acceptance thresholds not met", file=sys.stderr)
            return EXIT_OK if ok else EXIT_THRESHOLD
    except InertiaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
