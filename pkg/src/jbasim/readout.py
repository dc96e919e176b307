"""Single-shot readout: relaxation cascade racing the bifurcation hazard.

Time is in ns throughout.  During the rise and sampling phases the cavity
switches from the low to the high amplitude state with a hazard set by the
instantaneous drive and by the cavity detuning of the *current* qubit
state.  The qubit decays 2 -> 1 -> 0 with drive-independent rates.  Once
switched the cavity latches; during the hold nothing switches.

Hazards are piecewise constant on a fixed grid of ``dt`` and event times
are drawn by inverting the cumulative hazard, so every shot consumes a
fixed number of random variates.  Shots are grouped into fixed-size blocks
with their own counter-derived generator, making results independent of
how blocks are scheduled across threads.
"""

from __future__ import annotations

import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.constants import k as K_BOLTZMANN, h as PLANCK

from .device import (DeviceParams, DispersiveMap, TransmonSpectrum, cascade_rates,
                     dispersive_map_at_delta)
from .errors import DomainError
from .jba import (EscapeModel, JbaOperatingPoint, SCurveModel, drive_from_power, photon_flux,
                  steady_states, switching_rate)

HOLD_DROP_DB = 1.0
BLOCK_SIZE = 4096
THREADS_ENV = "JBASIM_THREADS"
EXPM_ORDER = 8


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def stream_id(tag: str) -> int:
    return zlib.crc32(tag.encode())


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for a counter key below a master seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def parallel_map(fn: Callable[[int], object], n: int) -> list:
    """``[fn(i) for i in range(n)]``, threaded when ``JBASIM_THREADS`` > 1."""
    workers = n_threads()
    if workers == 1 or n < 2:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


@dataclass(frozen=True)
class ReadoutPulse:
    """Sample-and-hold envelope: linear power ramp, sampling plateau, hold plateau.

    Powers are in dB re 1 mW at the fridge input; ``P_H`` defaults to
    ``P_S - HOLD_DROP_DB``.
    """

    f_drive: float
    P_S: float
    P_H: float | None = None
    t_R: float = 15.0
    t_S: float = 250.0
    t_H: float = 700.0
    dt: float = 0.5

    def __post_init__(self):
        if self.P_H is None:
            object.__setattr__(self, "P_H", self.P_S - HOLD_DROP_DB)
        if min(self.t_R, self.t_S, self.t_H) < 0:
            raise DomainError("pulse durations must be non-negative")
        if self.P_H > self.P_S:
            raise DomainError(f"hold power {self.P_H} dB exceeds sampling power {self.P_S} dB")
        if not 0 < self.dt <= 1.0:
            raise DomainError("time step must lie in (0, 1] ns")

    @property
    def t_sample_end(self) -> float:
        return self.t_R + self.t_S

    @property
    def duration(self) -> float:
        return self.t_R + self.t_S + self.t_H

    def at_power(self, P_S: float) -> "ReadoutPulse":
        return replace(self, P_S=P_S, P_H=P_S - (self.P_S - self.P_H))

    def sampling_edges(self) -> np.ndarray:
        n = max(1, int(round(self.t_sample_end / self.dt)))
        return np.linspace(0.0, self.t_sample_end, n + 1)

    def power_mw(self, t) -> np.ndarray:
        """Envelope in linear units (mW at the fridge input)."""
        t = np.asarray(t, dtype=float)
        p_s = 10.0 ** (self.P_S / 10.0)
        p_h = 10.0 ** (self.P_H / 10.0)
        ramp = np.clip(t / self.t_R, 0.0, 1.0) if self.t_R > 0 else np.ones_like(t)
        out = np.where(t < self.t_sample_end, p_s * ramp, p_h)
        return np.where((t < 0) | (t > self.duration), 0.0, out)

    def power_dB(self, t) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.power_mw(t))


@dataclass(frozen=True)
class ReadoutModel:
    """Everything the shot simulator needs about the sample.

    ``f_Ci`` are the dressed cavity frequencies (GHz) for qubit states
    0, 1, 2; ``decay_rates`` are the 1->0 and 2->1 rates in 1/us.
    """

    device: DeviceParams
    f_Ci: tuple
    escape: EscapeModel
    decay_rates: tuple = (0.0, 0.0)
    thermal_pop: float = 0.01
    pi_error: float = 0.01
    dmap: DispersiveMap | None = field(default=None, compare=False, repr=False)
    spectrum: TransmonSpectrum | None = field(default=None, compare=False, repr=False)

    @classmethod
    def at_detuning(cls, device: DeviceParams, delta: float, escape: EscapeModel | None = None,
                    n_photons_max: int = 20, **kwargs) -> "ReadoutModel":
        """Model with the qubit flux-tuned to ``f_C - f01 = delta`` (GHz)."""
        _, spectrum, dmap = dispersive_map_at_delta(device, delta, n_photons_max=n_photons_max)
        rates = cascade_rates(device, spectrum)
        return cls(device=device, f_Ci=tuple(float(f) for f in dmap.f_Ci),
                   escape=escape or EscapeModel.default(device),
                   decay_rates=(rates["1->0"], rates["2->1"]), dmap=dmap, spectrum=spectrum,
                   **kwargs)

    def replace(self, **changes) -> "ReadoutModel":
        return replace(self, **changes)

    def without_decay(self) -> "ReadoutModel":
        return replace(self, decay_rates=(0.0, 0.0))

    def ideal_preparation(self) -> "ReadoutModel":
        return replace(self, thermal_pop=0.0, pi_error=0.0)

    def readout_frequency(self, detuning_mhz: float) -> float:
        """Drive frequency ``detuning_mhz`` below the ground-state cavity frequency."""
        return self.f_Ci[0] - detuning_mhz * 1e-3

    def point(self, state: int, f_drive: float) -> JbaOperatingPoint:
        return JbaOperatingPoint.from_frequencies(self.device, self.f_Ci[state], f_drive)

    def hazard(self, state: int, pulse: ReadoutPulse) -> np.ndarray:
        """Switching hazard (1/ns) on each step of the sampling window."""
        edges = pulse.sampling_edges()
        mid = 0.5 * (edges[1:] + edges[:-1])
        p_mw = pulse.power_mw(mid)
        with np.errstate(divide="ignore"):
            eps2 = drive_from_power(10.0 * np.log10(p_mw), self.device, pulse.f_drive) ** 2
        return switching_rate(self.point(state, pulse.f_drive), self.escape, eps2) * 1e-9

    def populations(self, prepared: int) -> np.ndarray:
        return prepare_populations(prepared, self.thermal_pop, self.pi_error)


def pi_pulse(pop: np.ndarray, i: int, j: int, error: float) -> np.ndarray:
    """Population-level pi pulse on i <-> j leaving a fraction ``error`` untransferred."""
    out = pop.copy()
    out[i] = error * pop[i] + (1 - error) * pop[j]
    out[j] = error * pop[j] + (1 - error) * pop[i]
    return out


def prepare_populations(prepared: int, thermal_pop: float = 0.01,
                        pi_error: float = 0.01) -> np.ndarray:
    """Populations of |0>, |1>, |2> after preparing ``prepared`` from equilibrium."""
    if prepared not in (0, 1, 2):
        raise DomainError(f"prepared state must be 0, 1 or 2 (got {prepared})")
    pop = np.array([1.0 - thermal_pop, thermal_pop, 0.0])
    if prepared >= 1:
        pop = pi_pulse(pop, 0, 1, pi_error)
    if prepared == 2:
        pop = pi_pulse(pop, 1, 2, pi_error)
    return pop


@dataclass
class ShotRecord:
    prepared_state: int
    jump_times: list
    bifurcated: bool
    bifurcation_time: float | None
    final_state: int
    seed: int | None = None
    trace_I: np.ndarray | None = None
    trace_Q: np.ndarray | None = None


@dataclass
class ShotBatch:
    """Vectorized outcome of many shots under the same pulse."""

    initial: np.ndarray
    bifurcated: np.ndarray
    bif_time: np.ndarray
    decay_times: np.ndarray
    final_state: np.ndarray

    def __len__(self):
        return len(self.initial)


@dataclass(frozen=True)
class NoiseChain:
    T_N: float = 3.0
    lpf_cutoff: float = 10.0
    dt: float = 0.5

    def __post_init__(self):
        if self.T_N < 0 or self.lpf_cutoff <= 0 or self.dt <= 0:
            raise DomainError("NoiseChain needs T_N >= 0, lpf_cutoff > 0 and dt > 0")


def decay_clock(states: np.ndarray, rates_per_ns: tuple, draws: np.ndarray) -> np.ndarray:
    """Decay times (ns) of the 2->1 / 1->0 steps from unit exponential draws.

    ``draws`` has shape (n, 2).  Column k of the result is the time of the
    (k+1)-th downward jump, ``inf`` if it never happens.
    """
    g10, g21 = rates_per_ns
    never = np.full(len(draws), np.inf)
    w10 = draws[:, 1] / g10 if g10 > 0 else never
    w21 = draws[:, 0] / g21 if g21 > 0 else never
    w10_first = draws[:, 0] / g10 if g10 > 0 else never
    t = np.full((len(states), 2), np.inf)
    two = states == 2
    one = states == 1
    t[two, 0] = w21[two]
    t[two, 1] = w21[two] + w10[two]
    t[one, 0] = w10_first[one]
    return t


def simulate_batch(initial: np.ndarray, pulse: ReadoutPulse, model: ReadoutModel,
                   rng: np.random.Generator,
                   hazards: Sequence[np.ndarray] | None = None) -> ShotBatch:
    """Simulate shots starting in the qubit states ``initial``.

    ``hazards`` optionally overrides the per-state hazard profiles (1/ns on
    the sampling grid), e.g. to force a perfect state mapping in tests.
    """
    initial = np.asarray(initial, dtype=np.int64)
    n = len(initial)
    e_bif = rng.standard_exponential(n)
    e_dec = rng.standard_exponential((n, 2))

    edges = pulse.sampling_edges()
    T_win = edges[-1]
    if hazards is None:
        hazards = [model.hazard(s, pulse) for s in range(3)]
    cum = [np.concatenate(([0.0], np.cumsum(h * np.diff(edges)))) for h in hazards]

    rates = (model.decay_rates[0] * 1e-3, model.decay_rates[1] * 1e-3)
    t_dec = decay_clock(initial, rates, e_dec)
    bounds = np.column_stack([np.zeros(n), t_dec, np.full(n, np.inf)])

    acc = np.zeros(n)
    bif = np.zeros(n, dtype=bool)
    t_bif = np.full(n, np.nan)
    for seg in range(3):
        state = initial - seg
        a = bounds[:, seg]
        b = np.minimum(bounds[:, seg + 1], T_win)
        live = (~bif) & (state >= 0) & (a < T_win)
        for s in range(3):
            m = live & (state == s)
            if not m.any():
                continue
            Ca = np.interp(a[m], edges, cum[s])
            Cb = np.interp(b[m], edges, cum[s])
            need = e_bif[m] - acc[m]
            hit = need <= Cb - Ca
            idx = np.flatnonzero(m)
            if hit.any():
                t_bif[idx[hit]] = _invert_cumulative(Ca[hit] + need[hit], edges, cum[s], hazards[s])
                bif[idx[hit]] = True
            acc[idx[~hit]] += (Cb - Ca)[~hit]

    n_jumps = (t_dec <= pulse.duration).sum(axis=1)
    return ShotBatch(initial=initial, bifurcated=bif, bif_time=t_bif, decay_times=t_dec,
                     final_state=initial - n_jumps)


def _invert_cumulative(target, edges, cum, rate):
    k = np.clip(np.searchsorted(cum, target, side="left"), 1, len(edges) - 1)
    return edges[k - 1] + (target - cum[k - 1]) / rate[k - 1]


def sample_states(pop: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(pop)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, u, side="right").astype(np.int64)


def simulate_prepared(pop: np.ndarray, n_shots: int, pulse: ReadoutPulse, model: ReadoutModel,
                      seed: int, key: tuple, hazards=None) -> ShotBatch:
    """Shots with initial states drawn from ``pop``, in fixed-size seeded blocks."""
    parts = []
    for block, start in enumerate(range(0, n_shots, BLOCK_SIZE)):
        size = min(BLOCK_SIZE, n_shots - start)
        rng = substream(seed, *key, block)
        states = sample_states(pop, rng.random(size))
        parts.append(simulate_batch(states, pulse, model, rng, hazards))
    return ShotBatch(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("initial", "bifurcated", "bif_time", "decay_times", "final_state")))


def simulate_shot(prepared: int, pulse: ReadoutPulse, model: ReadoutModel, seed: int,
                  hazards=None, index: int = 0) -> ShotRecord:
    """One shot; ``prepared`` is the qubit state actually present at t = 0.

    ``index`` selects an independent substream for repeated shots.
    """
    rng = substream(seed, stream_id("single-shot"), index)
    batch = simulate_batch(np.array([prepared]), pulse, model, rng, hazards)
    return _record(batch, 0, seed, pulse.duration)


def _record(batch: ShotBatch, i: int, seed, duration: float) -> ShotRecord:
    s0 = int(batch.initial[i])
    jumps = []
    for k, t in enumerate(batch.decay_times[i]):
        if t <= duration:
            jumps.append((float(t), f"{s0 - k}->{s0 - k - 1}"))
    t_b = float(batch.bif_time[i]) if batch.bifurcated[i] else None
    return ShotRecord(prepared_state=s0, jump_times=jumps, bifurcated=bool(batch.bifurcated[i]),
                      bifurcation_time=t_b, final_state=int(batch.final_state[i]), seed=seed)


def run_scurve_mc(model: ReadoutModel, prepared: int, P_grid, shots_per_point: int,
                  pulse: ReadoutPulse, seed: int, stream: str = "scurve",
                  populations: np.ndarray | None = None) -> SCurveModel:
    """Monte Carlo S-curve with binomial standard errors.

    ``pulse`` fixes the frequency and timing; its power is replaced by each
    grid value.
    """
    if shots_per_point < 100:
        raise DomainError("need at least 100 shots per point")
    P_grid = np.asarray(P_grid, dtype=float)
    pop = model.populations(prepared) if populations is None else populations
    sid = stream_id(f"{stream}/{prepared}")

    def point(i):
        batch = simulate_prepared(pop, shots_per_point, pulse.at_power(P_grid[i]), model,
                                  seed, (sid, i))
        return batch.bifurcated.mean()

    p = np.array(parallel_map(point, len(P_grid)))
    err = np.sqrt(p * (1 - p) / shots_per_point)
    return SCurveModel(grid=P_grid, p_B=p, t_S=pulse.t_S, label=f"S{prepared}",
                       stderr=err, n_shots=shots_per_point)


def expected_pb(model: ReadoutModel, pop: np.ndarray, pulses: Sequence[ReadoutPulse]) -> np.ndarray:
    """Exact switching probability of the discretized model for each pulse.

    Propagates the not-yet-switched populations through each grid step with
    the exponential of the (upper triangular) decay + hazard generator.  The
    generator times a 1 ns step is far below unity, so a short Taylor series
    reaches machine precision.  All pulses must share the same timing.
    """
    g10, g21 = (r * 1e-3 for r in model.decay_rates)
    edges = pulses[0].sampling_edges()
    dts = np.diff(edges)
    haz = np.array([[model.hazard(s, p) for s in range(3)] for p in pulses])  # (P, 3, T)
    worst = (haz.max(initial=0.0) + g10 + g21) * dts.max()
    if worst > 0.5:
        raise DomainError("time step too coarse for the hazard; reduce dt")
    v = np.tile(np.asarray(pop, dtype=float), (len(pulses), 1))
    for k, dt in enumerate(dts):
        d0 = -haz[:, 0, k] * dt
        d1 = (-haz[:, 1, k] - g10) * dt
        d2 = (-haz[:, 2, k] - g21) * dt
        u01, u12 = g10 * dt, g21 * dt
        term = v
        acc = v.copy()
        for order in range(1, EXPM_ORDER + 1):
            nxt = np.empty_like(term)
            nxt[:, 0] = d0 * term[:, 0] + u01 * term[:, 1]
            nxt[:, 1] = d1 * term[:, 1] + u12 * term[:, 2]
            nxt[:, 2] = d2 * term[:, 2]
            term = nxt / order
            acc += term
        v = acc
    return 1.0 - v.sum(axis=1)


def expected_scurve(model: ReadoutModel, prepared: int, P_grid, pulse: ReadoutPulse,
                    populations: np.ndarray | None = None) -> SCurveModel:
    P_grid = np.asarray(P_grid, dtype=float)
    pop = model.populations(prepared) if populations is None else populations
    p = expected_pb(model, pop, [pulse.at_power(P) for P in P_grid])
    return SCurveModel(grid=P_grid, p_B=p, t_S=pulse.t_S, label=f"E{prepared}")


def branch_reflection(point: JbaOperatingPoint, n: float) -> complex:
    """Reflection coefficient of the lossless one-port cavity holding ``n`` photons."""
    det = point.delta - abs(point.K_ang) * n
    return complex(-0.5 * point.kappa, det) / complex(0.5 * point.kappa, det)


def _branch_levels(point, device, P_dB):
    eps = float(drive_from_power(P_dB, device, point.f_drive)) if np.isfinite(P_dB) else 0.0
    roots = steady_states(point, eps)
    return branch_reflection(point, roots[0]), branch_reflection(point, roots[-1]), len(roots)


def homodyne_trace(shot: ShotRecord, point: JbaOperatingPoint, pulse: ReadoutPulse,
                   device: DeviceParams, noise: NoiseChain, seed: int, index: int = 0,
                   reference: JbaOperatingPoint | None = None):
    """Synthesize filtered I/Q quadratures for a simulated shot.

    Returns ``(t, I, Q, sigma)`` with ``t`` in ns.  Quadratures are rotated
    and scaled so that the two branches of ``reference`` (default: ``point``)
    at the hold power sit at I = 0 and I = 1; ``sigma`` is the per-sample
    white-noise level in those units.  Passing the ground-state operating
    point as ``reference`` puts traces of all qubit states on one scale.
    """
    reference = reference or point
    r_lo_h, r_hi_h, n_roots = _branch_levels(reference, device, pulse.P_H)
    if n_roots < 2:
        raise DomainError(
            f"hold power {pulse.P_H:.2f} dB is outside the hysteresis window of the reference "
            "operating point")
    phi_h = float(photon_flux(pulse.P_H, device, pulse.f_drive))
    sep = r_hi_h - r_lo_h
    rot = np.conj(sep) / abs(sep)
    unit = abs(sep) * math.sqrt(phi_h)

    t = np.arange(0.0, pulse.duration, noise.dt)
    P_t = pulse.power_dB(t)
    flux_t = photon_flux(np.where(np.isfinite(P_t), P_t, -400.0), device, pulse.f_drive)
    after = (t >= shot.bifurcation_time) if shot.bifurcated else np.zeros_like(t, dtype=bool)
    target = np.empty(len(t), dtype=complex)
    cache = {}
    for k, (p, hi) in enumerate(zip(P_t, after)):
        key = (round(float(p), 9) if np.isfinite(p) else None)
        if key not in cache:
            cache[key] = _branch_levels(point, device, p)[:2]
        r = cache[key][1] if hi else cache[key][0]
        target[k] = (r - r_lo_h) * math.sqrt(flux_t[k]) / unit
    # the cavity field follows its steady state with time constant 2/kappa
    tau = 2.0 / point.kappa * 1e9
    signal = _one_pole(target * rot, noise.dt / tau, target[0] * rot)

    sigma = 0.0
    if noise.T_N > 0:
        bandwidth = 1.0 / (2 * noise.dt * 1e-9)
        n_noise = K_BOLTZMANN * noise.T_N / (PLANCK * pulse.f_drive * 1e9)
        sigma = math.sqrt(n_noise * bandwidth) / unit
        rng = substream(seed, stream_id("homodyne"), index)
        signal = signal + sigma * (rng.standard_normal(len(t)) + 1j * rng.standard_normal(len(t)))
    alpha = 2 * math.pi * noise.lpf_cutoff * 1e6 * noise.dt * 1e-9
    filtered = _one_pole(signal, alpha, signal[0])
    return t, filtered.real, filtered.imag, sigma


def _one_pole(x: np.ndarray, rate: float, x0) -> np.ndarray:
    a = 1.0 - math.exp(-rate)
    y = np.empty_like(x)
    acc = x0
    for k in range(len(x)):
        acc = acc + a * (x[k] - acc)
        y[k] = acc
    return y


def discriminate(trace_I, window: tuple, threshold: float, t=None, dt: float = 0.5,
                 sigma: float | None = None) -> tuple[str, float]:
    """Classify a trace as switched ("B") or not ("Bbar") from its windowed mean.

    The margin is the distance to the threshold in units of the standard
    error of the windowed mean; ``sigma`` is the per-sample noise if known,
    otherwise the sample standard deviation over the window is used.
    """
    trace_I = np.asarray(trace_I, dtype=float)
    if t is None:
        t = np.arange(len(trace_I)) * dt
    t0, t1 = window
    sel = (t >= t0) & (t < t1)
    if t1 <= t0 or sel.sum() < 2:
        raise DomainError(f"degenerate discrimination window {window}")
    seg = trace_I[sel]
    mean = seg.mean()
    s = sigma if sigma is not None else seg.std(ddof=1)
    sem = s / math.sqrt(len(seg)) if s > 0 else 0.0
    label = "B" if mean > threshold else "Bbar"
    margin = abs(mean - threshold) / sem if sem > 0 else math.inf
    return label, margin


def idle_decay(states: np.ndarray, duration: float, model: ReadoutModel,
               rng: np.random.Generator) -> np.ndarray:
    """Let qubits relax freely for ``duration`` ns."""
    rates = (model.decay_rates[0] * 1e-3, model.decay_rates[1] * 1e-3)
    t = decay_clock(states, rates, rng.standard_exponential((len(states), 2)))
    return states - (t <= duration).sum(axis=1)


def two_readout_run(model: ReadoutModel, control_pops: np.ndarray, pulse1: ReadoutPulse | None,
                    delay: float, pulse2: ReadoutPulse, shots: int, seed: int,
                    stream: str = "two-readout"):
    """Switching probabilities of back-to-back readouts after each control setting.

    ``control_pops`` has one row of |0>,|1>,|2> populations per control
    setting.  Returns ``(R1, R2, R3)``: the first pulse, the second pulse
    after the first plus ``delay``, and the second pulse alone after an
    idle period of the same length.  Readout does not change decay rates;
    the cavity is empty again after the delay.
    """
    if delay < 0:
        raise DomainError("delay must be non-negative")
    control_pops = np.atleast_2d(control_pops)
    sid = stream_id(stream)
    idle = (pulse1.duration if pulse1 is not None else 0.0) + delay

    def point(i):
        r1 = r2 = r3 = 0
        for block, start in enumerate(range(0, shots, BLOCK_SIZE)):
            size = min(BLOCK_SIZE, shots - start)
            rng = substream(seed, sid, i, block)
            s0 = sample_states(control_pops[i], rng.random(size))
            if pulse1 is not None:
                first = simulate_batch(s0, pulse1, model, rng)
                r1 += first.bifurcated.sum()
                s_mid = idle_decay(first.final_state, delay, model, rng)
            else:
                s_mid = idle_decay(s0, delay, model, rng)
            r2 += simulate_batch(s_mid, pulse2, model, rng).bifurcated.sum()
            s_idle = idle_decay(s0, idle, model, rng)
            r3 += simulate_batch(s_idle, pulse2, model, rng).bifurcated.sum()
        return r1 / shots, r2 / shots, r3 / shots

    out = np.array(parallel_map(point, len(control_pops)))
    return out[:, 0], out[:, 1], out[:, 2]
