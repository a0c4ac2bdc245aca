"""Inertia, damping and mechanical power from bus-frequency and power streams.

Pipeline, per record:

1. rotor speeds from measured POI frequencies, one BDU solve per sample
   with ``A = C^{-1}``;
2. rotor acceleration by smoothing plus a 5-point central difference;
3. short rolling windows fitted with ``[w_dot, dw, -1] [2H, D, p_m]^T = -p_e``;
4. runs of mutually consistent window estimates become intervals of
   constant mechanical power;
5. one stacked BDU problem over all intervals gives ``2H``, ``D`` and a
   mechanical power per interval.

Arrays are time-major: ``(T, M)`` for per-generator series.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_filter

from .bdu import BduCase, BduProblem, Svd, solve_bdu
from .errors import (
    AggregationError,
    DetectionError,
    MetricError,
    NumericalError,
    NumericalRankError,
    ParameterError,
)
from .network import FdfModel, NetworkCase

log = logging.getLogger(__name__)

MIN_DIFF_SAMPLES = 5


@dataclass(frozen=True)
class EstimatorConfig:
    window_len: float = 0.33
    hop: int = 1
    eps_rel: float = 0.05
    min_run: int = 5
    min_interval_len: float = 1.0
    trim: int = 1
    consensus: bool = True
    cond_max: float = 1e8
    smoothing_window: int = 5

    # uncertainty bounds that set the BDU radii
    param_bound: float = 0.3
    freq_error_bound: float = 0.008
    pe_error_bound: float = 0.001
    # explicit overrides; None derives them from the bounds above
    eta_rotor: float | None = None
    eta_b_rotor: float | None = None
    swing_eta_rel: float = 0.0

    @property
    def edge_guard(self) -> int:
        """Samples on either side that a smoothed 5-point derivative touches."""
        return 2 + (self.smoothing_window // 2 if self.smoothing_window > 1 else 0)

    def rotor_radii(self, fdf: FdfModel) -> tuple[float, float]:
        """``(eta, eta_b)`` for the rotor-speed problem.

        ``eta`` inflates the operator norm of ``C^{-1}`` by the relative
        parameter bound; ``eta_b`` is the frequency bound in p.u.
        """
        if self.eta_rotor is not None:
            eta = self.eta_rotor
        else:
            eta = self.param_bound * float(np.linalg.norm(np.linalg.inv(fdf.C), 2))
        if self.eta_b_rotor is not None:
            eta_b = self.eta_b_rotor
        else:
            eta_b = self.freq_error_bound / fdf.nominal_freq
        return eta, eta_b


@dataclass
class Measurements:
    """Time-aligned PMU streams: bus frequencies (Hz) and machine powers (p.u.)."""

    time: np.ndarray
    bus_ids: tuple[int, ...]
    freq_hz: np.ndarray  # (T, n_bus)
    gen_ids: tuple[int, ...]
    pe: np.ndarray  # (T, M)
    nominal_freq: float = 60.0

    @classmethod
    def from_dataset(cls, ds) -> "Measurements":
        if ds.bus_freq_meas is None or ds.gen_pe_meas is None:
            raise ParameterError("dataset has no measurement streams; call emit_measurements first")
        return cls(ds.time, tuple(ds.bus_ids), ds.bus_freq_meas, tuple(ds.gen_ids), ds.gen_pe_meas,
                   ds.nominal_freq)

    @property
    def rate(self) -> float:
        return 1.0 / float(np.median(np.diff(self.time)))

    def freq_for(self, buses) -> np.ndarray:
        pos = {b: i for i, b in enumerate(self.bus_ids)}
        missing = [b for b in buses if b not in pos]
        if missing:
            raise ParameterError(f"no frequency stream for buses {missing}")
        return self.freq_hz[:, [pos[b] for b in buses]]

    def pe_for(self, gen_ids) -> np.ndarray:
        pos = {g: i for i, g in enumerate(self.gen_ids)}
        missing = [g for g in gen_ids if g not in pos]
        if missing:
            raise ParameterError(f"no power stream for generators {missing}")
        return self.pe[:, [pos[g] for g in gen_ids]]


@dataclass
class RotorTrajectoryEstimate:
    time: np.ndarray
    gen_ids: tuple[int, ...]
    omega_hat: np.ndarray  # (T, M)
    omega_dot_hat: np.ndarray | None = None  # (T, M)
    valid: np.ndarray | None = None  # (T,) bool
    case_tags: np.ndarray | None = None  # (T,) BDU case per sample
    method_tags: np.ndarray | None = None  # (T,) differentiation stencil per sample

    @property
    def dt(self) -> float:
        return float(np.median(np.diff(self.time)))


@dataclass(frozen=True)
class WindowEstimate:
    window_index: int
    t_start: float
    t_end: float
    H_hat: float
    D_hat: float
    pm_hat: float
    converged: bool
    condition_number: float


@dataclass(frozen=True)
class Interval:
    start: float
    end: float


@dataclass(frozen=True)
class ConstancyPartition:
    intervals: tuple[Interval, ...]

    @property
    def k(self) -> int:
        return len(self.intervals)

    def __post_init__(self):
        if not self.intervals:
            raise DetectionError("a partition needs at least one interval")
        for a, b in zip(self.intervals, self.intervals[1:]):
            if b.start <= a.end:
                raise ParameterError("intervals must be time ordered and non-overlapping")


@dataclass
class GeneratorEstimate:
    gen_id: int
    H_hat: float
    D_hat: float
    pm_hat: list[float]
    partition: ConstancyPartition
    case_tag: BduCase
    samples_per_interval: list[int]
    windows: list[WindowEstimate] = field(default_factory=list)
    are: dict | None = None


@dataclass
class EstimateReport:
    generators: dict[int, GeneratorEstimate]
    H_sys: float
    trajectory: RotorTrajectoryEstimate
    rotor_case_counts: dict[str, int]
    H_sys_true: float | None = None

    @property
    def windows(self) -> dict[int, list[WindowEstimate]]:
        return {gid: e.windows for gid, e in self.generators.items()}


# ---------------------------------------------------------------------------
# Rotor speed and acceleration


def estimate_rotor_speeds(fdf: FdfModel, freq_hz: np.ndarray, eta: float, eta_b: float = 0.0,
                          time: np.ndarray | None = None) -> RotorTrajectoryEstimate:
    """Rotor speeds from measured frequencies at ``fdf.measured_buses``.

    ``freq_hz`` is ``(T, L)`` in Hz. Each sample solves the BDU problem
    with ``A = C^{-1}`` and ``b`` the measured deviation; ``1`` is added
    back afterwards. Samples whose solve fails are flagged invalid.
    """
    if fdf.C is None:
        raise ParameterError("frequency-divider model has no rotor-speed map")
    if fdf.L != fdf.M:
        raise ParameterError(f"rotor-speed recovery needs L == M, got L={fdf.L}, M={fdf.M}")
    freq_hz = np.atleast_2d(np.asarray(freq_hz, dtype=float))
    T = freq_hz.shape[0]
    if time is None:
        time = np.arange(T, dtype=float)
    A = np.linalg.inv(fdf.C)
    svd = Svd.of(A)
    dev = freq_hz / fdf.nominal_freq - 1.0
    omega = np.full((T, fdf.M), np.nan)
    valid = np.zeros(T, dtype=bool)
    tags = np.empty(T, dtype=object)
    for t in range(T):
        try:
            sol = solve_bdu(BduProblem(A, dev[t], eta, eta_b), svd=svd)
        except (NumericalError, ParameterError) as exc:
            log.debug("rotor-speed solve failed at sample %d: %s", t, exc)
            tags[t] = "FAILED"
            continue
        omega[t] = sol.x + 1.0
        valid[t] = True
        tags[t] = sol.case_tag.value
    return RotorTrajectoryEstimate(np.asarray(time, dtype=float), fdf.gen_ids, omega, valid=valid, case_tags=tags)


def _runs(mask: np.ndarray):
    """(start, stop) index pairs of maximal True runs."""
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def differentiate(y: np.ndarray, dt: float, smoothing_window: int = 5):
    """Smoothed derivative of a gap-free run ``y`` (``(T,)`` or ``(T, M)``).

    Local quadratic smoothing over ``smoothing_window`` samples, then the
    5-point central difference; the two samples at each end use 3-point
    stencils (one-sided at the very ends). Returns ``(dy, tags)``; tags mark
    the stencil per sample, with ``central5_edge`` where the 5-point stencil
    reaches end-fitted smoothed values.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n < MIN_DIFF_SAMPLES:
        raise ParameterError(f"need at least {MIN_DIFF_SAMPLES} consecutive samples to differentiate, got {n}")
    if smoothing_window > 1:
        win = min(smoothing_window, n if n % 2 else n - 1)
        ys = savgol_filter(y, win, 2, axis=0, mode="interp")
    else:
        ys = y
    d = np.empty_like(ys)
    d[2:-2] = (-ys[4:] + 8 * ys[3:-1] - 8 * ys[1:-3] + ys[:-4]) / (12 * dt)
    d[0] = (-3 * ys[0] + 4 * ys[1] - ys[2]) / (2 * dt)
    d[1] = (ys[2] - ys[0]) / (2 * dt)
    d[-2] = (ys[-1] - ys[-3]) / (2 * dt)
    d[-1] = (3 * ys[-1] - 4 * ys[-2] + ys[-3]) / (2 * dt)
    tags = np.array(["onesided3", "central3"] + ["central5"] * (n - 4) + ["central3", "onesided3"], dtype=object)
    # the smoother itself falls back to an end fit on its outer half-window
    half = win // 2 if smoothing_window > 1 else 0
    if half:
        tags[2:2 + half] = "central5_edge"
        tags[n - 2 - half:n - 2] = "central5_edge"
    return d, tags


def estimate_rotor_accel(traj: RotorTrajectoryEstimate, smoothing_window: int = 5) -> RotorTrajectoryEstimate:
    """Fill ``omega_dot_hat``; stencils never cross invalid samples."""
    T, M = traj.omega_hat.shape
    valid = traj.valid if traj.valid is not None else np.all(np.isfinite(traj.omega_hat), axis=1)
    if T < MIN_DIFF_SAMPLES:
        raise ParameterError(f"need at least {MIN_DIFF_SAMPLES} samples to differentiate, got {T}")
    dt = traj.dt
    dot = np.full((T, M), np.nan)
    tags = np.full(T, "gap", dtype=object)
    new_valid = valid.copy()
    for a, b in _runs(valid):
        if b - a < MIN_DIFF_SAMPLES:
            new_valid[a:b] = False
            continue
        dot[a:b], tags[a:b] = differentiate(traj.omega_hat[a:b], dt, smoothing_window)
    traj.omega_dot_hat = dot
    traj.method_tags = tags
    traj.valid = new_valid
    return traj


# ---------------------------------------------------------------------------
# Window fits and change detection


def swing_matrix(omega_dot, omega) -> np.ndarray:
    """Columns ``[w_dot, w - 1, -1]``."""
    omega_dot = np.asarray(omega_dot, dtype=float)
    return np.column_stack([omega_dot, np.asarray(omega, dtype=float) - 1.0, -np.ones_like(omega_dot)])


def scaled_condition(A: np.ndarray) -> float:
    """2-norm condition number after scaling every column to unit length.

    The swing columns differ in scale by orders of magnitude (speed
    deviations near 1e-4 against a constant column of ones), which would
    otherwise dominate the figure and hide genuine collinearity.
    """
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        return np.inf
    s = np.linalg.svd(A / norms, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else np.inf


def _swing_solve(A, b, eta_rel, eta_b):
    cond = scaled_condition(A)
    eta = eta_rel * float(np.linalg.norm(A, 2))
    return solve_bdu(BduProblem(A, b, eta, eta_b)), cond


def rolling_estimate(traj: RotorTrajectoryEstimate, pe: np.ndarray, window_len: float, hop: int = 1,
                     eta_rel: float = 0.0, pe_bound: float = 0.0,
                     cond_max: float = 1e8) -> dict[int, list[WindowEstimate]]:
    """Fit every rolling window of every generator.

    ``pe`` is ``(T, M)`` aligned with ``traj``. The right side is ``-p_e``;
    its uncertainty radius is ``pe_bound * ||p_e||`` per window.
    """
    T, M = traj.omega_hat.shape
    n = int(round(window_len / traj.dt))
    if n < 6:
        raise ParameterError(f"a window must hold at least 6 samples (2x the unknowns), got {n}")
    starts = range(0, T - n + 1, hop)
    valid = traj.valid if traj.valid is not None else np.ones(T, dtype=bool)
    out = {}
    for j, gid in enumerate(traj.gen_ids):
        wins = []
        for w, s in enumerate(starts):
            sl = slice(s, s + n)
            t0, t1 = float(traj.time[s]), float(traj.time[s + n - 1])
            if not np.all(valid[sl]):
                wins.append(WindowEstimate(w, t0, t1, np.nan, np.nan, np.nan, False, np.inf))
                continue
            A = swing_matrix(traj.omega_dot_hat[sl, j], traj.omega_hat[sl, j])
            b = -pe[sl, j]
            try:
                sol, cond = _swing_solve(A, b, eta_rel, pe_bound * float(np.linalg.norm(b)))
            except (NumericalError, ParameterError):
                wins.append(WindowEstimate(w, t0, t1, np.nan, np.nan, np.nan, False, np.inf))
                continue
            ok = bool(np.isfinite(cond) and cond <= cond_max)
            Mbar, D, pm = sol.x
            wins.append(WindowEstimate(w, t0, t1, Mbar / 2.0, D, pm, ok, cond))
        out[gid] = wins
    return out


def _rel(value, ref):
    if ref == 0:
        return np.inf
    return abs(value - ref) / abs(ref)


def _consensus_runs(runs, eps_rel):
    """Drop runs whose level disagrees with the record-wide level.

    Inertia and damping do not change within a record, so a run that is
    internally stable but sits at a different (H, D) level is a ramp fitted
    with the wrong constants. The reference is the window-count weighted
    median of the run medians.
    """
    med = np.array([[np.median([w.H_hat for w in r]), np.median([w.D_hat for w in r])] for r in runs])
    weights = np.array([len(r) for r in runs], dtype=float)
    ref = [_weighted_median(med[:, c], weights) for c in range(2)]
    kept = [r for r, (h, d) in zip(runs, med) if max(_rel(h, ref[0]), _rel(d, ref[1])) <= eps_rel]
    return kept or runs


def _weighted_median(values, weights):
    order = np.argsort(values)
    cum = np.cumsum(weights[order])
    return float(values[order][np.searchsorted(cum, 0.5 * cum[-1])])


def detect_constant_intervals(windows: list[WindowEstimate], eps_rel: float = 0.05, min_run: int = 5,
                              min_interval_len: float = 1.0, trim: int = 1,
                              consensus: bool = True) -> ConstancyPartition:
    """Intervals of constant mechanical power from window-estimate stability.

    A window joins the current run when both its inertia and damping
    estimates are within ``eps_rel`` (relative) of the run's running
    medians; otherwise the run closes and a new one starts at that window.
    Non-converged windows close the run. With ``consensus`` set, runs whose
    median level disagrees with the record-wide level by more than
    ``eps_rel`` are dropped. Runs of at least ``min_run`` windows are
    trimmed by ``trim`` windows at each end and kept if the result spans
    ``min_interval_len`` seconds.
    """
    runs, current = [], []

    def close():
        if len(current) >= min_run:
            runs.append(list(current))
        current.clear()

    for w in windows:
        if not w.converged:
            close()
            continue
        if current:
            med_H = float(np.median([c.H_hat for c in current]))
            med_D = float(np.median([c.D_hat for c in current]))
            score = max(_rel(w.H_hat, med_H), _rel(w.D_hat, med_D))
            if not score <= eps_rel:
                close()
        current.append(w)
    close()

    if consensus and len(runs) > 1:
        runs = _consensus_runs(runs, eps_rel)

    intervals = []
    for run in runs:
        kept = run[trim:len(run) - trim] if trim else run
        if not kept:
            continue
        start, end = kept[0].t_start, kept[-1].t_end
        if end - start >= min_interval_len:
            intervals.append(Interval(start, end))
    if not intervals:
        n_conv = sum(w.converged for w in windows)
        raise DetectionError(
            f"no run of >= {min_run} consistent windows (eps_rel={eps_rel}, {n_conv} converged windows); "
            "increase eps_rel or supply a longer record"
        )
    # consecutive runs may touch when only one window separated them
    merged = [intervals[0]]
    for iv in intervals[1:]:
        if iv.start <= merged[-1].end:
            merged[-1] = Interval(merged[-1].start, max(merged[-1].end, iv.end))
        else:
            merged.append(iv)
    return ConstancyPartition(tuple(merged))


def instability_scores(windows: list[WindowEstimate]) -> np.ndarray:
    """Relative deviation of each window's (H, D) from the generator's medians.

    Non-converged windows score NaN.
    """
    H = np.array([w.H_hat if w.converged else np.nan for w in windows])
    D = np.array([w.D_hat if w.converged else np.nan for w in windows])
    med_H, med_D = np.nanmedian(H), np.nanmedian(D)
    return np.maximum(np.abs(H - med_H) / abs(med_H), np.abs(D - med_D) / abs(med_D))


# ---------------------------------------------------------------------------
# Partitioned fit and aggregation


def partitioned_system(traj: RotorTrajectoryEstimate, pe_col: np.ndarray, j: int, partition: ConstancyPartition,
                       edge_guard: int = 0):
    """Stacked ``[A1 | -A2]`` and ``b1`` for generator column ``j``.

    Only samples differentiated with the full 5-point stencil on centrally
    smoothed values enter; near a run edge the estimate is two orders less
    accurate. ``edge_guard`` samples are dropped at both ends of every
    interval so that no stencil reaches across a detected boundary.
    """
    valid = traj.valid if traj.valid is not None else np.ones(len(traj.time), dtype=bool)
    if traj.method_tags is not None:
        valid = valid & (traj.method_tags == "central5")
    blocks, rhs, counts = [], [], []
    k = partition.k
    eps = 1e-9
    for i, iv in enumerate(partition.intervals):
        sel = valid & (traj.time >= iv.start - eps) & (traj.time <= iv.end + eps)
        if edge_guard:
            idx = np.flatnonzero(sel)
            sel[idx[:edge_guard]] = False
            sel[idx[len(idx) - edge_guard:]] = False
        cnt = int(sel.sum())
        counts.append(cnt)
        if cnt == 0:
            continue
        block = np.zeros((cnt, 2 + k))
        block[:, 0] = traj.omega_dot_hat[sel, j]
        block[:, 1] = traj.omega_hat[sel, j] - 1.0
        block[:, 2 + i] = -1.0
        blocks.append(block)
        rhs.append(-pe_col[sel])
    if not blocks:
        raise NumericalRankError(f"partition holds no valid samples (per-interval counts {counts})")
    return np.vstack(blocks), np.concatenate(rhs), counts


def solve_partitioned(traj: RotorTrajectoryEstimate, pe_col: np.ndarray, j: int, partition: ConstancyPartition,
                      eta_rel: float = 0.0, pe_bound: float = 0.0, gen_id=None,
                      edge_guard: int = 0) -> GeneratorEstimate:
    """Inertia, damping and per-interval mechanical power for one generator."""
    A, b, counts = partitioned_system(traj, pe_col, j, partition, edge_guard)
    n_unknown = partition.k + 2
    s = np.linalg.svd(A, compute_uv=False)
    rank = int(np.sum(s > 1e-10 * s[0]))
    if A.shape[0] <= n_unknown or rank < n_unknown:
        raise NumericalRankError(
            f"partitioned system for generator {gen_id} is rank deficient (rank {rank} < {n_unknown}; "
            f"samples per interval {counts})",
            condition_number=float(s[0] / s[-1]) if s[-1] > 0 else np.inf,
        )
    sol = solve_bdu(BduProblem(A, b, eta_rel * float(s[0]), pe_bound * float(np.linalg.norm(b))))
    H = sol.x[0] / 2.0
    D = sol.x[1]
    if D < 0:
        log.warning("generator %s: negative damping estimate %.4g", gen_id, D)
    return GeneratorEstimate(
        gen_id=gen_id if gen_id is not None else traj.gen_ids[j],
        H_hat=float(H),
        D_hat=float(D),
        pm_hat=[float(v) for v in sol.x[2:]],
        partition=partition,
        case_tag=sol.case_tag,
        samples_per_interval=counts,
    )


def system_inertia(estimates: dict, case: NetworkCase) -> float:
    """Rating-weighted mean of the per-machine inertia estimates."""
    gens = case.sorted_generators
    missing = [g.id for g in gens if g.id not in estimates]
    if missing:
        raise AggregationError(f"no inertia estimate for generators {missing}")

    def h_of(v):
        return v.H_hat if isinstance(v, GeneratorEstimate) else float(v)

    num = sum(h_of(estimates[g.id]) * g.rated_mva for g in gens)
    return num / sum(g.rated_mva for g in gens)


def true_system_inertia(case: NetworkCase) -> float:
    missing = [g.id for g in case.generators if g.true_H is None]
    if missing:
        raise AggregationError(f"no true inertia for generators {missing}")
    return system_inertia({g.id: g.true_H for g in case.generators}, case)


def are_metric(estimate: float, truth: float) -> float:
    """Absolute relative error in percent."""
    if truth == 0:
        raise MetricError("absolute relative error is undefined for a zero true value")
    return 100.0 * abs(estimate - truth) / abs(truth)


def pm_are_average(estimate: GeneratorEstimate, profile) -> float:
    """Mean ARE of the interval mechanical powers.

    Each interval is compared with the true mechanical power at its
    midpoint; ``profile`` is anything with a ``pm(t)`` method.
    """
    vals = []
    for iv, pm_hat in zip(estimate.partition.intervals, estimate.pm_hat):
        truth = float(profile.pm(np.array([0.5 * (iv.start + iv.end)]))[0])
        vals.append(are_metric(pm_hat, truth))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# End-to-end


def run_estimation(fdf: FdfModel, case: NetworkCase, meas: Measurements,
                   config: EstimatorConfig = EstimatorConfig()) -> EstimateReport:
    """Full estimate from measurement streams.

    ``fdf`` is the estimator's (possibly perturbed) network model; ``case``
    supplies ratings for the system aggregate. The whole record is treated
    as one dispatch period.
    """
    eta, eta_b = config.rotor_radii(fdf)
    traj = estimate_rotor_speeds(fdf, meas.freq_for(fdf.measured_buses), eta, eta_b, time=meas.time)
    estimate_rotor_accel(traj, config.smoothing_window)
    pe = meas.pe_for(traj.gen_ids)
    windows = rolling_estimate(traj, pe, config.window_len, config.hop, config.swing_eta_rel,
                               config.pe_error_bound, config.cond_max)
    gens = {}
    for j, gid in enumerate(traj.gen_ids):
        try:
            part = detect_constant_intervals(windows[gid], config.eps_rel, config.min_run,
                                             config.min_interval_len, config.trim, config.consensus)
        except DetectionError as exc:
            err = DetectionError(f"generator {gid}: {exc}")
            err.windows = windows  # keep the trace so the failure can be inspected
            raise err from None
        est = solve_partitioned(traj, pe[:, j], j, part, config.swing_eta_rel, config.pe_error_bound, gen_id=gid,
                                edge_guard=config.edge_guard)
        est.windows = windows[gid]
        gens[gid] = est
    counts = {}
    for tag in traj.case_tags:
        counts[tag] = counts.get(tag, 0) + 1
    h_true = None
    if all(g.true_H is not None for g in case.generators):
        h_true = true_system_inertia(case)
    return EstimateReport(gens, system_inertia(gens, case), traj, counts, h_true)


def attach_truth(report: EstimateReport, case: NetworkCase, profiles: dict | None = None) -> EstimateReport:
    """Fill the ARE block of every generator that has ground truth.

    ``profiles`` maps generator id to its true mechanical power profile;
    without it the p_m entry is left out.
    """
    truth = {g.id: g for g in case.generators}
    for gid, est in report.generators.items():
        g = truth[gid]
        if g.true_H is None or g.true_D is None:
            continue
        are = {"H": are_metric(est.H_hat, g.true_H), "D": are_metric(est.D_hat, g.true_D)}
        if profiles is not None and gid in profiles:
            are["pm_avg"] = pm_are_average(est, profiles[gid])
        est.are = are
    return report
