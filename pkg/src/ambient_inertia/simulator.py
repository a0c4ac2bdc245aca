"""Synthetic ambient data: swing dynamics, bus frequencies and PMU streams.

Each synchronous machine follows the deviation form of the swing equation
on its own MVA base::

    2 H  d(dw)/dt = p_m(t) - p_e(t) - D dw,      dw = omega - 1

with ``p_m`` a piecewise flat/ramp profile and ``p_e`` a stepped dispatch
set-point plus a bounded, smooth ambient component. Bus frequencies follow
algebraically from the frequency-divider relation.

Integration is classical RK4. PMU instants are integrator grid points (the
step is the largest ``1/(pmu_rate * k) <= integrator_step``), and every
discontinuity of the forcing falls on a grid point, so each RK4 step sees
a smooth forcing and the scheme keeps its fourth order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import ParameterError, SimulationDivergedError
from .network import NetworkCase, build_fdf, fdf_residual, rotor_to_bus

FLAT = "FLAT"
RAMP = "RAMP"
DIVERGENCE_BAND = 0.1
TIME_DECIMALS = 9


@dataclass(frozen=True)
class SimulationConfig:
    duration: float = 40.0
    dispatch_interval: float = 8.0
    load_noise_bound: float = 0.001
    integrator_step: float = 0.001
    pmu_rate: float = 60.0
    freq_error_bound: float = 0.008
    pe_error_bound: float = 0.001
    param_perturb_bound: float = 0.3
    seed: int = 0
    # profile shape
    pm_step_range: tuple[float, float] = (0.01, 0.05)
    ramp_duration_range: tuple[float, float] = (0.5, 2.0)
    ramp_fraction: float = 1.0
    ambient_band: tuple[float, float] = (0.05, 0.5)
    ambient_components: int = 8

    def validate(self) -> "SimulationConfig":
        if self.duration <= 0 or self.dispatch_interval <= 0:
            raise ParameterError("duration and dispatch_interval must be positive")
        ratio = self.duration / self.dispatch_interval
        if abs(ratio - round(ratio)) > 1e-9:
            raise ParameterError("duration must be a multiple of dispatch_interval")
        if not self.integrator_step < 1.0 / self.pmu_rate:
            raise ParameterError("integrator_step must be smaller than the PMU frame interval")
        for name in ("load_noise_bound", "freq_error_bound", "pe_error_bound", "param_perturb_bound"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        lo, hi = self.ramp_duration_range
        if not 0 < lo <= hi < self.dispatch_interval:
            raise ParameterError("ramp durations must lie in (0, dispatch_interval)")
        if not 0 <= self.ramp_fraction <= 1:
            raise ParameterError("ramp_fraction must lie in [0, 1]")
        lo, hi = self.ambient_band
        if not 0 < lo <= hi or self.ambient_components < 1:
            raise ParameterError("ambient_band must satisfy 0 < low <= high and ambient_components >= 1")
        return self

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.pmu_rate)) + 1

    @property
    def time_grid(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.pmu_rate

    def replace(self, **kw) -> "SimulationConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class Segment:
    start_time: float
    end_time: float
    kind: str
    start_value: float
    end_value: float


@dataclass(frozen=True)
class MechPowerProfile:
    """Mechanical power segments plus the electrical dispatch set-points.

    ``pe_schedule`` holds ``(start, end, value)`` steps of scheduled
    electrical output; the ambient component is added on top of it.
    """

    segments: tuple[Segment, ...]
    pe_schedule: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        segs = self.segments
        if not segs:
            raise ParameterError("profile needs at least one segment")
        for a, b in zip(segs, segs[1:]):
            if abs(a.end_time - b.start_time) > 1e-9:
                raise ParameterError("profile segments must be contiguous")
        for s in segs:
            if s.end_time <= s.start_time:
                raise ParameterError("profile segments must have positive length")
            if s.kind == FLAT and s.start_value != s.end_value:
                raise ParameterError("FLAT segments need equal start and end values")
            if min(s.start_value, s.end_value) <= 0:
                raise ParameterError("mechanical power values must be positive")
        if not self.pe_schedule:
            object.__setattr__(
                self, "pe_schedule", tuple((s.start_time, s.end_time, s.end_value) for s in segs)
            )

    @property
    def change_times(self) -> list[float]:
        return [s.start_time for s in self.segments if s.kind == RAMP]

    @property
    def ramps(self) -> list[tuple[float, float]]:
        return [(s.start_time, s.end_time) for s in self.segments if s.kind == RAMP]

    def breakpoints(self) -> list[float]:
        pts = {s.start_time for s in self.segments} | {s.end_time for s in self.segments}
        pts |= {a for a, _, _ in self.pe_schedule} | {b for _, b, _ in self.pe_schedule}
        return sorted(pts)

    def pm(self, t, side=None) -> np.ndarray:
        """Mechanical power at times ``t``. Continuous, so ``side`` is unused."""
        t = np.asarray(t, dtype=float)
        out = np.empty_like(t)
        starts = np.array([s.start_time for s in self.segments])
        idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(self.segments) - 1)
        for k, s in enumerate(self.segments):
            sel = idx == k
            if not np.any(sel):
                continue
            frac = (t[sel] - s.start_time) / (s.end_time - s.start_time)
            out[sel] = s.start_value + (s.end_value - s.start_value) * np.clip(frac, 0.0, 1.0)
        return out

    def pe_setpoint(self, t) -> np.ndarray:
        """Right-continuous scheduled electrical power."""
        t = np.asarray(t, dtype=float)
        starts = np.array([a for a, _, _ in self.pe_schedule])
        values = np.array([v for _, _, v in self.pe_schedule])
        idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(values) - 1)
        return values[idx]


@dataclass
class AmbientDataset:
    """Ground truth and measured streams on the PMU time grid.

    Rotor/bus quantities are in p.u. of nominal speed, powers in p.u. of
    each machine's rating, ``bus_freq_meas`` in Hz.
    """

    time: np.ndarray
    gen_ids: tuple[int, ...]
    bus_ids: tuple[int, ...]
    omega_G: np.ndarray  # (T, M)
    omega_dot_G: np.ndarray  # (T, M)
    p_e: np.ndarray  # (T, M)
    p_m: np.ndarray  # (T, M)
    omega_B: np.ndarray  # (T, N)
    H: np.ndarray
    D: np.ndarray
    S_rated: np.ndarray
    profiles: dict
    nominal_freq: float
    config: SimulationConfig
    cig_injection: np.ndarray | None = None  # (T, n_cig), p.u. on system base
    bus_freq_meas: np.ndarray | None = None  # (T, N)
    gen_pe_meas: np.ndarray | None = None  # (T, M)
    case_name: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def pm_change_times(self) -> list[float]:
        times = set()
        for p in self.profiles.values():
            times.update(p.change_times)
        return sorted(times)

    @property
    def true_bus_freq_hz(self) -> np.ndarray:
        return self.omega_B * self.nominal_freq


def _seed_streams(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _snap(t: float, rate: float) -> float:
    """Round a time to the PMU frame grid."""
    return round(round(t * rate) / rate, TIME_DECIMALS)


def dispatch_levels(case: NetworkCase) -> dict[int, float]:
    """Initial set-point of every machine, p.u. of its rating.

    Net demand (loads minus converter injections) is shared in proportion
    to rating; without load data every machine starts at 0.7 p.u.
    """
    gens = case.sorted_generators
    total_rating = sum(g.rated_mva for g in gens)
    demand = (sum(ld.p for ld in case.loads) - sum(c.p for c in case.cigs)) * case.base_mva
    level = demand / total_rating if demand > 0 else 0.7
    level = min(max(level, 0.2), 0.9)
    return {g.id: level for g in gens}


def generate_pm_profiles(case: NetworkCase, config: SimulationConfig, seed: int | None = None,
                         ramp_fraction: float | None = None) -> dict[int, MechPowerProfile]:
    """Dispatch-driven mechanical power profiles, one per machine.

    At each dispatch boundary the system-wide set-point moves in one
    direction (a common load change); each machine's level moves by a
    random 1-5 % of its rating and its mechanical power follows with a
    linear ramp of random duration starting at the boundary. The
    electrical set-point steps at the boundary.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    frac = config.ramp_fraction if ramp_fraction is None else ramp_fraction
    rng = _seed_streams(seed, 1)[0]
    rate = config.pmu_rate
    n_periods = int(round(config.duration / config.dispatch_interval))
    boundaries = [_snap(k * config.dispatch_interval, rate) for k in range(1, n_periods)]
    active = [t for t in boundaries if rng.uniform() < frac]
    directions = {t: (1.0 if rng.uniform() < 0.5 else -1.0) for t in active}

    lo_step, hi_step = config.pm_step_range
    lo_ramp, hi_ramp = config.ramp_duration_range
    levels0 = dispatch_levels(case)
    profiles = {}
    for g in case.sorted_generators:
        level = levels0[g.id]
        segs, plateau_levels = [], [level]
        t0 = 0.0
        for tb in active:
            step = directions[tb] * rng.uniform(lo_step, hi_step)
            if level + step <= 0.05:
                step = -step
            ramp = max(_snap(rng.uniform(lo_ramp, hi_ramp), rate), 1.0 / rate)
            segs.append(Segment(t0, tb, FLAT, level, level))
            segs.append(Segment(tb, _snap(tb + ramp, rate), RAMP, level, level + step))
            level += step
            plateau_levels.append(level)
            t0 = _snap(tb + ramp, rate)
        segs.append(Segment(t0, config.duration, FLAT, level, level))
        # the set-point jumps at the boundary, the machine ramps behind it
        bnds = [0.0] + active + [config.duration]
        pe_steps = tuple((bnds[k], bnds[k + 1], plateau_levels[k]) for k in range(len(bnds) - 1))
        profiles[g.id] = MechPowerProfile(tuple(segs), pe_steps)
    return profiles


class _Multisine:
    """Sum of sinusoids with random frequencies and phases, ``|value| <= 1``."""

    def __init__(self, freqs, amps, phases):
        self.freqs, self.amps, self.phases = freqs, amps, phases  # (K, P)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        arg = 2 * np.pi * t[:, None, None] * self.freqs[None] + self.phases[None]
        return np.sum(self.amps[None] * np.sin(arg), axis=1)


def _ambient_paths(rng, n_paths: int, config: SimulationConfig):
    """Smooth zero-mean paths bounded by 1 in absolute value.

    Amplitudes sum to one, so the bound holds pointwise; frequencies are
    drawn uniformly from ``config.ambient_band`` (Hz).
    """
    K = config.ambient_components
    lo, hi = config.ambient_band
    freqs = rng.uniform(lo, hi, size=(K, n_paths))
    amps = rng.uniform(0.5, 1.0, size=(K, n_paths))
    amps /= amps.sum(axis=0, keepdims=True)
    phases = rng.uniform(0.0, 2 * np.pi, size=(K, n_paths))
    return _Multisine(freqs, amps, phases)


def _rk4_coefficients(lam: np.ndarray, h: float):
    z = lam * h
    amp = 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24
    c0 = h / 6 * (1 + z + z**2 / 2 + z**3 / 4)
    ch = h / 6 * (4 + 2 * z + z**2 / 2)
    c1 = h / 6
    return amp, c0, ch, c1


def simulate(case: NetworkCase, profiles: dict[int, MechPowerProfile], config: SimulationConfig,
             initial_deviation=None) -> AmbientDataset:
    """Integrate the swing dynamics and derive bus frequencies."""
    config.validate()
    gens = case.sorted_generators
    M = len(gens)
    missing = [g.id for g in gens if g.id not in profiles]
    if missing:
        raise ParameterError(f"no mechanical power profile for generators {missing}")
    for g in gens:
        if g.true_H is None or g.true_D is None:
            raise ParameterError(f"generator {g.id} needs true_h_s and true_d_pu for simulation")
        prof = profiles[g.id]
        if prof.segments[0].start_time > 0 or prof.segments[-1].end_time < config.duration - 1e-9:
            raise ParameterError(f"profile of generator {g.id} does not cover [0, {config.duration}]")
    H = np.array([g.true_H for g in gens])
    D = np.array([g.true_D for g in gens])
    S = np.array([g.rated_mva for g in gens])

    rate = config.pmu_rate
    n_sub = math.ceil(round(1.0 / (rate * config.integrator_step), 9))
    h = 1.0 / (rate * n_sub)
    n_frames = config.n_frames
    n_steps = (n_frames - 1) * n_sub
    k = np.arange(n_steps)
    t0 = k * h
    th = (k + 0.5) * h
    t1 = (k + 1) * h
    # step-wise set-points are looked up at the step midpoint so a step
    # never straddles a jump

    amb_rng, cig_rng = _seed_streams(config.seed, 3)[1:]
    ambient = _ambient_paths(amb_rng, M, config)
    a0, ah, a1 = ambient(t0), ambient(th), ambient(t1)
    bound = config.load_noise_bound

    g0 = np.empty((n_steps, M))
    gh = np.empty((n_steps, M))
    g1 = np.empty((n_steps, M))
    for j, g in enumerate(gens):
        prof = profiles[g.id]
        sched = prof.pe_setpoint(th)
        pe0 = sched * (1 + bound * a0[:, j])
        peh = sched * (1 + bound * ah[:, j])
        pe1 = sched * (1 + bound * a1[:, j])
        g0[:, j] = (prof.pm(t0) - pe0) / (2 * H[j])
        gh[:, j] = (prof.pm(th) - peh) / (2 * H[j])
        g1[:, j] = (prof.pm(t1) - pe1) / (2 * H[j])

    lam = -D / (2 * H)
    amp, c0, ch, c1 = _rk4_coefficients(lam, h)
    y0 = np.zeros(M) if initial_deviation is None else np.asarray(initial_deviation, dtype=float)
    y = np.empty((n_steps + 1, M))
    y[0] = y0
    for j in range(M):
        forcing = c0[j] * g0[:, j] + ch[j] * gh[:, j] + c1 * g1[:, j]
        # y[n+1] = amp * y[n] + forcing[n]
        out, _ = lfilter([1.0], [1.0, -amp[j]], forcing, zi=[amp[j] * y0[j]])
        y[1:, j] = out

    if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > DIVERGENCE_BAND:
        bad = int(np.argmax(np.any(~np.isfinite(y) | (np.abs(y) > DIVERGENCE_BAND), axis=1)))
        raise SimulationDivergedError(
            f"rotor speed deviation exceeded {DIVERGENCE_BAND} p.u. at t = {bad * h:.4f} s"
        )

    frames = np.arange(n_frames) * n_sub
    time = config.time_grid
    dw = y[frames]
    amb_f = ambient(time)
    pe = np.empty((n_frames, M))
    pm = np.empty((n_frames, M))
    for j, g in enumerate(gens):
        prof = profiles[g.id]
        pe[:, j] = prof.pe_setpoint(time) * (1 + bound * amb_f[:, j])
        pm[:, j] = prof.pm(time)
    # right-side truth; at a set-point jump this is the right limit
    dw_dot = (pm - pe - D * dw) / (2 * H)

    fdf = build_fdf(case)
    K = rotor_to_bus(fdf)
    dw_B = dw @ K.T

    cig = None
    if case.cigs:
        cig_paths = _ambient_paths(cig_rng, len(case.cigs), config)(time)
        base = np.array([c.p for c in case.cigs])
        cig = base * (1 + bound * cig_paths)

    ds = AmbientDataset(
        time=time,
        gen_ids=tuple(g.id for g in gens),
        bus_ids=tuple(case.bus_ids),
        omega_G=1.0 + dw,
        omega_dot_G=dw_dot,
        p_e=pe,
        p_m=pm,
        omega_B=1.0 + dw_B,
        H=H,
        D=D,
        S_rated=S,
        profiles=dict(profiles),
        nominal_freq=case.nominal_freq,
        config=config,
        cig_injection=cig,
        case_name=case.name,
    )
    ds.extras["fdf_residual_max"] = float(np.max(np.abs(fdf_residual(fdf, dw.T, dw_B.T)))) if n_frames else 0.0
    ds.extras["integration_step"] = h
    return ds


def emit_measurements(dataset: AmbientDataset, config: SimulationConfig | None = None) -> AmbientDataset:
    """Attach bounded-noise PMU streams to ``dataset`` (in place) and return it.

    Frequencies get independent uniform noise within ``+-freq_error_bound``
    Hz; electrical powers get relative noise within ``+-pe_error_bound``.
    """
    config = dataset.config if config is None else config
    rng = _seed_streams(config.seed, 4)[3]
    true_hz = dataset.omega_B * dataset.nominal_freq
    fnoise = rng.uniform(-1.0, 1.0, size=true_hz.shape) * config.freq_error_bound
    pnoise = rng.uniform(-1.0, 1.0, size=dataset.p_e.shape) * config.pe_error_bound
    dataset.bus_freq_meas = true_hz + fnoise
    dataset.gen_pe_meas = dataset.p_e * (1.0 + pnoise)
    return dataset


def run_scenario(case: NetworkCase, config: SimulationConfig) -> AmbientDataset:
    """Profiles, simulation and measurements for one seeded scenario."""
    profiles = generate_pm_profiles(case, config)
    return emit_measurements(simulate(case, profiles, config), config)
