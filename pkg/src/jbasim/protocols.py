"""Experiment builders and analyzers.

Qubit control acts on populations: rotations are ideal apart from a
fractional pi-pulse error and an optional Rabi decay envelope, and every
readout goes through the shot simulator.  Each ``run_*`` returns an
:class:`ExperimentResult` whose columns are pure functions of the inputs
and the master seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .device import DeviceParams, flux_dephasing_time, purcell_t1, stark_invert
from .errors import DomainError, SimulationError
from .jba import (SCurveModel, drive_from_power, spinodals, steady_states, threshold_power)
from .readout import (BLOCK_SIZE, ReadoutModel, ReadoutPulse, expected_pb, idle_decay,
                      parallel_map, pi_pulse, run_scurve_mc, sample_states, simulate_batch,
                      simulate_prepared, stream_id, substream, two_readout_run)

T_PI_NS = 20.0
F_RABI_GHZ = 0.029
RABI_DECAY_NS = 500.0
POWER_XTOL_DB = 0.05
LOW_PB = 0.3
# keeps every qubit state bistable when sweeping Delta; reproduces the
# 17 MHz readout detuning at Delta = 0.38 GHz
READOUT_MARGIN_MHZ = 11.5
READOUT_DETUNING_MHZ = 17.0


# --------------------------------------------------------------------------- sequences

@dataclass(frozen=True)
class Segment:
    kind: str               # "control" or "readout"
    frequency: float        # GHz
    amount: float           # rotation angle (rad) for control, power (dB) for readout
    duration: float         # ns
    start: float            # ns
    envelope: str = "square"
    target: tuple = ()      # levels addressed by a control pulse

    def __post_init__(self):
        if self.kind not in ("control", "readout"):
            raise DomainError(f"unknown segment kind {self.kind!r}")
        if self.envelope not in ("square", "gaussian"):
            raise DomainError(f"unknown envelope {self.envelope!r}")
        if self.duration <= 0:
            raise DomainError("segment durations must be positive")

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple
    readout: ReadoutPulse

    def __post_init__(self):
        segs = sorted(self.segments, key=lambda s: s.start)
        for a, b in zip(segs, segs[1:]):
            if b.start < a.end - 1e-9:
                raise DomainError("segments overlap")
        kinds = [s.kind for s in segs]
        if "readout" in kinds and "control" in kinds[kinds.index("readout"):]:
            raise DomainError("control pulses must precede the readout")
        object.__setattr__(self, "segments", tuple(segs))

    @property
    def controls(self) -> tuple:
        return tuple(s for s in self.segments if s.kind == "control")

    @property
    def shelved(self) -> bool:
        return any(s.target == (1, 2) for s in self.controls)

    def at_power(self, P_S: float) -> "PulseSequence":
        pulse = self.readout.at_power(P_S)
        segs = tuple(replace(s, amount=P_S) if s.kind == "readout" else s for s in self.segments)
        return PulseSequence(segs, pulse)

    def apply_controls(self, pop: np.ndarray, pi_error: float) -> np.ndarray:
        """Populations entering the readout after the control segments."""
        pop = np.asarray(pop, dtype=float)
        for s in self.controls:
            if not s.target:
                continue
            if not math.isclose(s.amount, math.pi):
                raise DomainError("only pi rotations are supported before a readout")
            pop = pi_pulse(pop, *s.target, pi_error)
        return pop


def build_composite_readout(shelve: bool, pulse: ReadoutPulse, f12: float | None = None,
                            t_pi: float = T_PI_NS) -> PulseSequence:
    """Readout, optionally preceded by a pi pulse on 1 <-> 2 that shelves |1> into |2>."""
    segs = []
    start = t_pi if shelve else 0.0
    if shelve:
        if f12 is None:
            raise DomainError("shelving needs the 1-2 transition frequency")
        segs.append(Segment("control", f12, math.pi, t_pi, 0.0, target=(1, 2)))
    segs.append(Segment("readout", pulse.f_drive, pulse.P_S, pulse.duration, start))
    return PulseSequence(tuple(segs), pulse)


def composite_for(model: ReadoutModel, pulse: ReadoutPulse, shelve: bool) -> PulseSequence:
    f12 = model.spectrum.f12 if model.spectrum is not None else None
    return build_composite_readout(shelve, pulse, f12)


# --------------------------------------------------------------------------- results

@dataclass
class FitResult:
    params: dict
    stderr: dict
    residual_norm: float
    converged: bool
    model: str
    flags: tuple = ()


@dataclass
class ExperimentResult:
    """Tabulated outcome of one protocol.

    ``columns`` maps names to arrays aligned with ``x``; ``stderr`` holds
    standard errors for some of them.  ``summary`` carries headline scalars
    and ``fits`` any fitted models.
    """

    protocol: str
    x_name: str
    x: np.ndarray
    columns: dict
    stderr: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        for name, col in list(self.columns.items()) + list(self.stderr.items()):
            if len(col) != len(self.x):
                raise DomainError(f"column {name!r} has {len(col)} rows, expected {len(self.x)}")

    def table(self) -> tuple[list, list]:
        """Header and rows for CSV export."""
        names = list(self.columns)
        errs = [n for n in names if n in self.stderr]
        header = [self.x_name] + names + [f"stderr_{n}" for n in errs]
        cols = [self.x] + [np.asarray(self.columns[n]) for n in names] + \
            [np.asarray(self.stderr[n]) for n in errs]
        rows = [[c[i] for c in cols] for i in range(len(self.x))]
        return header, rows


# --------------------------------------------------------------------------- fitting

def _finish(res, p_names, scale, sigma_given, n):
    J = res.jac
    dof = max(1, n - len(res.x))
    try:
        cov = np.linalg.pinv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.full((len(res.x), len(res.x)), np.nan)
    if not sigma_given:
        cov = cov * (2 * res.cost / dof)
    err = np.sqrt(np.clip(np.diag(cov), 0.0, None)) * scale
    return dict(zip(p_names, err))


def _weights(y, stderr):
    if stderr is None:
        return np.ones_like(y), False
    s = np.asarray(stderr, dtype=float)
    floor = s[s > 0].min() if np.any(s > 0) else 1.0
    return 1.0 / np.where(s > 0, s, floor), True


def _linear_sine(u, y, f, rate):
    basis = np.column_stack([np.exp(-rate * u) * np.sin(2 * np.pi * f * u),
                             np.exp(-rate * u) * np.cos(2 * np.pi * f * u), np.ones_like(u)])
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    return coef, float(np.sum((basis @ coef - y) ** 2))


def fit_damped_sine(x, y, stderr=None, max_iter: int = 200) -> FitResult:
    """Fit ``y = off + A exp(-x/tau) sin(2 pi f x + phi)``.

    The frequency is seeded from the peak of the zero-padded spectrum of the
    detrended data; amplitude, phase and offset from a linear solve at that
    frequency.  Parameters are returned as ``amplitude`` (>= 0),
    ``frequency`` (1/x units), ``phase`` in (-pi, pi], ``decay`` (``inf``
    if undamped) and ``offset``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 10 or len(x) != len(y):
        raise DomainError("damped-sine fit needs at least 10 points of matching length")
    if np.ptp(y) <= 1e-12 * max(1.0, abs(y.mean())):
        return FitResult({"amplitude": 0.0, "frequency": math.nan, "phase": 0.0,
                          "decay": math.inf, "offset": float(y.mean())},
                         {k: 0.0 for k in ("amplitude", "frequency", "phase", "decay", "offset")},
                         0.0, True, "damped_sine", ("frequency_unidentifiable",))
    x0, span = x[0], x[-1] - x[0]
    u = (x - x0) / span
    w, sigma_given = _weights(y, stderr)

    # spectral seed on a uniform grid
    grid = np.linspace(0.0, 1.0, len(u))
    yu = np.interp(grid, u, y)
    trend = np.polyval(np.polyfit(grid, yu, 1), grid)
    spec = np.abs(np.fft.rfft(yu - trend, n=16 * len(grid)))
    freqs = np.fft.rfftfreq(16 * len(grid), d=grid[1] - grid[0])
    spec[0] = 0.0
    f0 = max(freqs[int(np.argmax(spec))], 0.5)
    f0 = minimize_scalar(lambda f: _linear_sine(u, y, f, 0.0)[1],
                         bounds=(0.7 * f0, 1.3 * f0), method="bounded").x
    best = min(((r,) + _linear_sine(u, y, f0, r) for r in (0.0, 0.3, 1.0, 3.0)),
               key=lambda t: t[2])
    rate0, (a, b, off) = best[0], best[1]
    p0 = np.array([math.hypot(a, b), f0, math.atan2(b, a), rate0, off])

    def model(p):
        A, f, ph, r, c = p
        return c + A * np.exp(-r * u) * np.sin(2 * np.pi * f * u + ph)

    def resid(p):
        return w * (model(p) - y)

    def jac(p):
        A, f, ph, r, c = p
        env = np.exp(-r * u)
        arg = 2 * np.pi * f * u + ph
        s, co = np.sin(arg), np.cos(arg)
        J = np.column_stack([env * s, A * env * co * 2 * np.pi * u, A * env * co,
                             -A * u * env * s, np.ones_like(u)])
        return J * w[:, None]

    start_cost = 0.5 * np.sum(resid(p0) ** 2)
    res = least_squares(resid, p0, jac=jac, method="lm", xtol=1e-9, ftol=1e-15, gtol=1e-15,
                        max_nfev=max_iter)
    A, f, ph, r, c = res.x
    if A < 0:
        A, ph = -A, ph + math.pi
    ph = math.atan2(math.sin(ph), math.cos(ph))
    scale = np.array([1.0, 1.0 / span, 1.0, 1.0 / span, 1.0])
    err = _finish(res, ["amplitude", "frequency", "phase", "rate", "offset"], scale, sigma_given,
                  len(y))
    rate = r / span
    decay = 1.0 / rate if rate > 0 else math.inf
    err["decay"] = err.pop("rate") / rate**2 if rate > 0 else math.inf
    freq = f / span
    phase = ph - 2 * np.pi * freq * x0
    phase = math.atan2(math.sin(phase), math.cos(phase))
    amp = A * math.exp(rate * x0) if rate > 0 else A
    err["amplitude"] *= amp / A if A > 0 else 1.0
    flags = []
    if rate <= 0:
        flags.append("undamped")
    if freq * span < 1.5:
        flags.append("under_one_and_half_periods")
    converged = bool(res.status > 0 and res.cost <= start_cost)
    if not converged:
        flags.append("not_converged")
    return FitResult({"amplitude": float(amp), "frequency": float(freq), "phase": float(phase),
                      "decay": float(decay), "offset": float(c)},
                     {k: float(v) for k, v in err.items()},
                     float(np.sqrt(2 * res.cost)), converged, "damped_sine", tuple(flags))


def fit_exponential(x, y, stderr=None, max_iter: int = 200) -> FitResult:
    """Fit ``y = off + A exp(-x / T)``; returns ``amplitude``, ``T`` and ``offset``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 4 or len(x) != len(y):
        raise DomainError("exponential fit needs at least 4 points of matching length")
    if np.ptp(y) <= 1e-12 * max(1.0, abs(y.mean())):
        return FitResult({"amplitude": 0.0, "T": math.inf, "offset": float(y.mean())},
                         {"amplitude": 0.0, "T": 0.0, "offset": 0.0}, 0.0, True, "exponential",
                         ("no_decay",))
    x0, span = x[0], x[-1] - x[0]
    u = (x - x0) / span
    w, sigma_given = _weights(y, stderr)

    def linear(r):
        basis = np.column_stack([np.exp(-r * u), np.ones_like(u)])
        coef, *_ = np.linalg.lstsq(basis * w[:, None], y * w, rcond=None)
        return coef, float(np.sum((w * (basis @ coef - y)) ** 2))

    rates = np.geomspace(0.05, 50.0, 60)
    r0 = rates[int(np.argmin([linear(r)[1] for r in rates]))]
    (a0, c0), _ = linear(r0)
    p0 = np.array([a0, r0, c0])

    def resid(p):
        return w * (p[2] + p[0] * np.exp(-p[1] * u) - y)

    def jac(p):
        e = np.exp(-p[1] * u)
        return np.column_stack([e, -p[0] * u * e, np.ones_like(u)]) * w[:, None]

    start_cost = 0.5 * np.sum(resid(p0) ** 2)
    res = least_squares(resid, p0, jac=jac, method="lm", xtol=1e-9, ftol=1e-15, gtol=1e-15,
                        max_nfev=max_iter)
    A, r, c = res.x
    err = _finish(res, ["amplitude", "rate", "offset"], np.array([1.0, 1.0 / span, 1.0]),
                  sigma_given, len(y))
    rate = r / span
    flags = []
    if rate <= 1e-9 / span:
        T, T_err = math.inf, math.inf
        flags.append("no_decay")
    else:
        T, T_err = 1.0 / rate, err["rate"] / rate**2
    converged = bool(res.status > 0 and res.cost <= start_cost)
    if not converged:
        flags.append("not_converged")
    amp = A * math.exp(rate * x0) if math.isfinite(T) else A
    return FitResult({"amplitude": float(amp), "T": float(T), "offset": float(c)},
                     {"amplitude": err["amplitude"], "T": float(T_err), "offset": err["offset"]},
                     float(np.sqrt(2 * res.cost)), converged, "exponential", tuple(flags))


# --------------------------------------------------------------------------- readout helpers

def readout_pb(model: ReadoutModel, pops: np.ndarray, pulse: ReadoutPulse, shots: int,
               seed: int, stream: str, method: str = "mc") -> tuple[np.ndarray, np.ndarray]:
    """Switching probability and its standard error for each row of ``pops``."""
    pops = np.atleast_2d(pops)
    if method == "expected":
        p = np.array([expected_pb(model, row, [pulse])[0] for row in pops])
        return p, np.zeros_like(p)
    if method != "mc":
        raise DomainError(f"unknown readout method {method!r}")
    sid = stream_id(stream)

    def point(i):
        return simulate_prepared(pops[i], shots, pulse, model, seed, (sid, i)).bifurcated.mean()

    p = np.array(parallel_map(point, len(pops)))
    return p, np.sqrt(p * (1 - p) / shots)


def power_bracket(model: ReadoutModel, f_drive: float, margin: float = 3.0) -> tuple[float, float]:
    """Powers bracketing the S-curves of all three qubit states (dB)."""
    thr = []
    for s in range(3):
        point = model.point(s, f_drive)
        if point.bistable:
            thr.append(threshold_power(point, model.device))
    if len(thr) < 2:
        raise DomainError("fewer than two qubit states are bistable at this readout frequency")
    return min(thr) - margin, max(thr) + 1.0


def optimize_power(model: ReadoutModel, pulse: ReadoutPulse, pop_hi: np.ndarray,
                   pop_lo: np.ndarray, bracket: tuple | None = None,
                   xtol: float = POWER_XTOL_DB) -> tuple[float, float]:
    """Sampling power maximizing the expected separation of two S-curves.

    Bounded Brent search (golden-section steps with parabolic acceleration)
    on the exact expectation of the shot simulator, to ``xtol`` dB.
    Returns ``(P_S, contrast)``.
    """
    lo, hi = bracket or power_bracket(model, pulse.f_drive)

    def neg(P):
        p = pulse.at_power(P)
        return -(expected_pb(model, pop_hi, [p])[0] - expected_pb(model, pop_lo, [p])[0])

    # coarse scan guards against the flat tails of the separation
    grid = np.linspace(lo, hi, 25)
    pulses = [pulse.at_power(P) for P in grid]
    vals = expected_pb(model, pop_lo, pulses) - expected_pb(model, pop_hi, pulses)
    k = int(np.argmin(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(neg, bounds=(a, b), method="bounded", options={"xatol": xtol})
    return float(res.x), float(-res.fun)


def readout_detuning_for(model: ReadoutModel) -> float:
    """Drive detuning below f_C0 (MHz) used when sweeping the qubit frequency."""
    pulls = (model.dmap.pull_01, model.dmap.pull_02) if model.dmap else (0.0, 0.0)
    return max(READOUT_DETUNING_MHZ, max(pulls) + READOUT_MARGIN_MHZ)


def rabi_populations(dt, thermal_pop: float, f_rabi: float = F_RABI_GHZ,
                     decay: float = RABI_DECAY_NS, pulse_error: float = 0.0) -> np.ndarray:
    """Populations after a resonant 0-1 drive of length ``dt`` ns.

    ``pulse_error`` scales down the transferred fraction so that a drive of
    one pi-pulse length errs exactly like a preparation pi pulse.
    """
    dt = np.asarray(dt, dtype=float)
    transfer = 0.5 * (1.0 - pulse_error) * (
        1.0 - np.cos(2 * np.pi * f_rabi * dt) * np.exp(-dt / decay))
    p1 = thermal_pop + (1.0 - 2.0 * thermal_pop) * transfer
    return np.column_stack([1.0 - p1, p1, np.zeros_like(p1)])


def _meta(protocol, seed, **kw):
    return {"protocol": protocol, "seed": seed, **kw}


# --------------------------------------------------------------------------- experiments

def run_rabi(model: ReadoutModel, dt_grid, readout: PulseSequence, shots: int, seed: int,
             f_rabi: float = F_RABI_GHZ, rabi_decay: float = RABI_DECAY_NS,
             method: str = "mc") -> ExperimentResult:
    """Rabi oscillation read out with ``readout``; visibility is twice the fitted amplitude."""
    dt_grid = np.asarray(dt_grid, dtype=float)
    if np.any(np.diff(dt_grid) <= 0):
        raise DomainError("Rabi time grid must be strictly increasing")
    pops = rabi_populations(dt_grid, model.thermal_pop, f_rabi, rabi_decay, model.pi_error)
    pops = np.array([readout.apply_controls(p, model.pi_error) for p in pops])
    p, err = readout_pb(model, pops, readout.readout, shots, seed, "rabi", method)
    fit = fit_damped_sine(dt_grid, p, err if method == "mc" else None)
    return ExperimentResult(
        "rabi", "dt_ns", dt_grid, {"p_B": p}, {"p_B": err}, {"damped_sine": fit},
        {"visibility": 2 * fit.params["amplitude"], "visibility_err": 2 * fit.stderr["amplitude"],
         "decay_us": fit.params["decay"] * 1e-3, "decay_err_us": fit.stderr["decay"] * 1e-3,
         "frequency_MHz": fit.params["frequency"] * 1e3},
        _meta("rabi", seed, shots=shots, P_S=readout.readout.P_S, shelved=readout.shelved,
              f_rabi_GHz=f_rabi, rabi_decay_ns=rabi_decay))


def run_t1(model: ReadoutModel, delays, pulse: ReadoutPulse, shots: int, seed: int,
           drive_power: float | None = None, method: str = "mc") -> ExperimentResult:
    """Relaxation after a pi pulse, optionally with a cavity drive during the delay.

    The drive sets the intracavity field (recorded as ``nbar``) but, as in
    the readout model, does not change the decay rates.
    """
    delays = np.asarray(delays, dtype=float)
    pop = model.populations(1)
    sid = stream_id("t1" if drive_power is None else f"t1/{drive_power:.6f}")
    if method == "expected":
        g10, g21 = (r * 1e-3 for r in model.decay_rates)
        pops = []
        for t in delays:
            e10, e21 = math.exp(-g10 * t), math.exp(-g21 * t)
            p2 = pop[2] * e21
            c = g21 / (g21 - g10) if not math.isclose(g21, g10) else None
            p1 = pop[1] * e10 + (pop[2] * c * (e10 - e21) if c is not None
                                 else pop[2] * g21 * t * e10)
            pops.append([1 - p1 - p2, p1, p2])
        p, err = readout_pb(model, np.array(pops), pulse, shots, seed, "t1", "expected")
    else:
        def point(i):
            hits = 0
            for block, start in enumerate(range(0, shots, BLOCK_SIZE)):
                size = min(BLOCK_SIZE, shots - start)
                rng = substream(seed, sid, i, block)
                s = idle_decay(sample_states(pop, rng.random(size)), delays[i], model, rng)
                hits += simulate_batch(s, pulse, model, rng).bifurcated.sum()
            return hits / shots

        p = np.array(parallel_map(point, len(delays)))
        err = np.sqrt(p * (1 - p) / shots)
    fit = fit_exponential(delays, p, err if method == "mc" else None)
    nbar = math.nan
    if drive_power is not None:
        point0 = model.point(0, pulse.f_drive)
        eps = float(drive_from_power(drive_power, model.device, pulse.f_drive))
        roots = steady_states(point0, eps)
        nbar = roots[-1] if point0.bistable and eps**2 >= spinodals(point0).eps2_switch \
            else roots[0]
    T = fit.params["T"]
    return ExperimentResult(
        "t1", "delay_ns", delays, {"p_B": p}, {"p_B": err}, {"exponential": fit},
        {"T1_us": T * 1e-3, "T1_err_us": fit.stderr["T"] * 1e-3, "nbar": nbar},
        _meta("t1", seed, shots=shots, P_S=pulse.P_S, drive_power=drive_power))


def run_ramsey(model: ReadoutModel, delays, detuning_mhz: float, pulse: ReadoutPulse,
               shots: int, seed: int, T_phi: float = math.inf,
               method: str = "mc") -> ExperimentResult:
    """Ramsey fringes with two ideal pi/2 pulses detuned by ``detuning_mhz``.

    The excited population is ``1/2 + 1/2 cos(2 pi df t) exp(-t / T2)``
    with ``1/T2 = 1/(2 T1) + 1/T_phi`` (``T_phi`` in us), scaled by the
    thermal polarization.
    """
    if detuning_mhz == 0:
        raise DomainError("Ramsey detuning must be non-zero")
    delays = np.asarray(delays, dtype=float)
    g10 = model.decay_rates[0] * 1e-3
    rate2 = 0.5 * g10 + (0.0 if math.isinf(T_phi) else 1e-3 / T_phi)
    pol = 1.0 - 2.0 * model.thermal_pop
    p1 = 0.5 + 0.5 * pol * np.cos(2 * np.pi * detuning_mhz * 1e-3 * delays) * np.exp(-rate2 * delays)
    pops = np.column_stack([1 - p1, p1, np.zeros_like(p1)])
    p, err = readout_pb(model, pops, pulse, shots, seed, "ramsey", method)
    fit = fit_damped_sine(delays, p, err if method == "mc" else None)
    return ExperimentResult(
        "ramsey", "delay_ns", delays, {"p_B": p}, {"p_B": err}, {"damped_sine": fit},
        {"T2_us": fit.params["decay"] * 1e-3, "T2_err_us": fit.stderr["decay"] * 1e-3,
         "fringe_MHz": fit.params["frequency"] * 1e3,
         "fringe_err_MHz": fit.stderr["frequency"] * 1e3},
        _meta("ramsey", seed, shots=shots, P_S=pulse.P_S, detuning_MHz=detuning_mhz,
              T_phi_us=T_phi))


class Decomposition(NamedTuple):
    w: float
    w0: float
    clipped: bool


def scurve_decompose(S_target: SCurveModel, S0: SCurveModel,
                     S0_shifted: SCurveModel) -> Decomposition:
    """Weight ``w`` such that ``S_target ~ w S0_shifted + (1 - w) S0`` in least squares."""
    for other in (S0, S0_shifted):
        if not np.array_equal(S_target.grid, other.grid):
            raise DomainError("S-curves must share the same power grid")
    a = S0_shifted.p_B - S0.p_B
    denom = float(np.dot(a, a))
    if denom == 0:
        raise DomainError("S0 and its shifted copy coincide; weight undefined")
    w = float(np.dot(a, S_target.p_B - S0.p_B)) / denom
    clipped = not 0.0 <= w <= 1.0
    w = min(max(w, 0.0), 1.0)
    return Decomposition(w, 1.0 - w, clipped)


class ShiftMatch(NamedTuple):
    shift: float        # MHz
    residual: float
    n_points: int


def scurve_shift_match(S1: SCurveModel, generator: Callable[[float], np.ndarray],
                       bounds: tuple = (-10.0, 20.0), step: float = 0.25,
                       low: float = LOW_PB) -> ShiftMatch:
    """Readout-frequency shift (MHz) that best maps the reference S-curve onto ``S1``.

    ``generator(shift)`` returns the reference p_B on ``S1.grid`` with the
    drive frequency raised by ``shift`` MHz.  Only points with
    ``S1.p_B < low`` enter the squared discrepancy.
    """
    mask = S1.p_B < low
    if not mask.any():
        raise DomainError(f"S-curve has no points with p_B < {low}")

    def cost(df):
        return float(np.sum((np.asarray(generator(df))[mask] - S1.p_B[mask]) ** 2))

    grid = np.arange(bounds[0], bounds[1] + 0.5 * step, step)
    vals = np.array([cost(df) for df in grid])
    k = int(np.argmin(vals))
    if vals[k] == 0.0:
        return ShiftMatch(float(grid[k]), 0.0, int(mask.sum()))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(cost, bounds=(a, b), method="bounded", options={"xatol": 1e-5})
    return ShiftMatch(float(res.x), float(res.fun), int(mask.sum()))


def shifted_generator(model: ReadoutModel, pulse: ReadoutPulse, grid, prepared: int = 0):
    """Expected S-curve of ``prepared`` on ``grid`` with the drive moved up by a shift (MHz)."""
    grid = np.asarray(grid, dtype=float)
    pop = model.populations(prepared)

    def gen(shift):
        p = replace(pulse, f_drive=pulse.f_drive + shift * 1e-3)
        return expected_pb(model, pop, [p.at_power(P) for P in grid])

    return gen


def run_scurves(model: ReadoutModel, P_grid, pulse: ReadoutPulse, shots: int, seed: int,
                method: str = "mc") -> ExperimentResult:
    """S-curves for |0>, |1> and |2> prepared, and the two contrasts."""
    P_grid = np.asarray(P_grid, dtype=float)
    cols, errs = {}, {}
    for s in range(3):
        if method == "mc":
            c = run_scurve_mc(model, s, P_grid, shots, pulse, seed)
            cols[f"pB_state{s}"], errs[f"pB_state{s}"] = c.p_B, c.stderr
        else:
            pop = model.populations(s)
            cols[f"pB_state{s}"] = expected_pb(model, pop, [pulse.at_power(P) for P in P_grid])
    d1 = cols["pB_state1"] - cols["pB_state0"]
    d2 = cols["pB_state2"] - cols["pB_state0"]
    k1, k2 = int(np.argmax(d1)), int(np.argmax(d2))
    summary = {"contrast_01": float(d1[k1]), "contrast_02": float(d2[k2]),
               "P_opt_01": float(P_grid[k1]), "P_opt_02": float(P_grid[k2])}
    if method == "mc":
        for key, k, a, b in (("contrast_01_err", k1, "pB_state1", "pB_state0"),
                             ("contrast_02_err", k2, "pB_state2", "pB_state0")):
            summary[key] = float(math.hypot(errs[a][k], errs[b][k]))
    return ExperimentResult("scurve", "P_dB", P_grid, cols, errs, {}, summary,
                            _meta("scurve", seed, shots=shots, f_drive=pulse.f_drive,
                                  t_R=pulse.t_R, t_S=pulse.t_S, t_H=pulse.t_H))


def run_ac_stark(model: ReadoutModel, P_grid, f_drive: float) -> ExperimentResult:
    """Qubit frequency and inferred photon number versus drive power (upward sweep).

    The cavity sits on the low-amplitude branch until its end and on the
    high-amplitude branch beyond.  ``model.dmap`` must tabulate enough photon
    numbers; points beyond the table are reported as NaN.
    """
    P_grid = np.asarray(P_grid, dtype=float)
    if model.dmap is None:
        raise DomainError("AC-Stark calibration needs the dressed Stark table")
    point = model.point(0, f_drive)
    eps2_B = spinodals(point).eps2_switch if point.bistable else math.inf
    n_cav, f01, nbar, branch = [], [], [], []
    stark = model.dmap.stark
    n_tab = np.arange(len(stark), dtype=float)
    for P in P_grid:
        eps = float(drive_from_power(P, model.device, f_drive))
        roots = steady_states(point, eps)
        high = eps**2 >= eps2_B
        n = roots[-1] if high else roots[0]
        n_cav.append(n)
        branch.append(1.0 if high else 0.0)
        if n > n_tab[-1]:
            f01.append(math.nan)
            nbar.append(math.nan)
            continue
        f = float(np.interp(n, n_tab, stark))
        f01.append(f)
        nbar.append(stark_invert(model.dmap, f))
    nbar = np.array(nbar)
    branch = np.array(branch)
    summary = {}
    if branch.any() and not branch.all():
        k = int(np.argmax(branch))
        summary = {"P_jump_dB": float(P_grid[k]), "nbar_below": float(nbar[k - 1]),
                   "nbar_above": float(nbar[k])}
    return ExperimentResult("ac_stark", "P_dB", P_grid,
                            {"n_cavity": np.array(n_cav), "f01_GHz": np.array(f01), "nbar": nbar,
                             "high_branch": branch}, {}, {}, summary,
                            _meta("ac_stark", None, f_drive=f_drive))


def run_two_readout(model: ReadoutModel, dt_grid, pulse1: ReadoutPulse, pulse2: ReadoutPulse,
                    delay: float, shots: int, seed: int, f_rabi: float = F_RABI_GHZ,
                    rabi_decay: float = RABI_DECAY_NS) -> ExperimentResult:
    """Back-action test: Rabi curves from the first, second and lone second readout."""
    dt_grid = np.asarray(dt_grid, dtype=float)
    pops = rabi_populations(dt_grid, model.thermal_pop, f_rabi, rabi_decay, model.pi_error)
    R1, R2, R3 = two_readout_run(model, pops, pulse1, delay, pulse2, shots, seed)
    cols, errs, fits, summary = {}, {}, {}, {}
    for name, r in (("R1", R1), ("R2", R2), ("R3", R3)):
        cols[name] = r
        errs[name] = np.sqrt(r * (1 - r) / shots)
        fit = fit_damped_sine(dt_grid, r, errs[name])
        fits[name] = fit
        summary[f"visibility_{name}"] = 2 * fit.params["amplitude"]
        summary[f"visibility_{name}_err"] = 2 * fit.stderr["amplitude"]
    return ExperimentResult("two_readout", "dt_ns", dt_grid, cols, errs, fits, summary,
                            _meta("two_readout", seed, shots=shots, delay_ns=delay,
                                  P1=pulse1.P_S, P2=pulse2.P_S))


def contrast_vs_detuning(device: DeviceParams, deltas: Sequence[float], shots: int, seed: int,
                         pulse_template: ReadoutPulse | None = None,
                         shift_shots: int | None = None, escape=None,
                         **model_kw) -> ExperimentResult:
    """Readout contrast, effective pull, T1 and T_phi as the qubit is flux-tuned.

    At each detuning the sampling power is optimized on the expected contrast
    and the contrast is then measured by Monte Carlo at that power.  Failed
    points are recorded as NaN with a status code and the sweep continues.
    ``escape`` and ``model_kw`` are passed on to :meth:`ReadoutModel.at_detuning`.
    """
    deltas = np.asarray(deltas, dtype=float)
    template = pulse_template or ReadoutPulse(f_drive=device.f_C, P_S=-40.0)
    shift_shots = shift_shots or shots
    names = ("contrast", "contrast_shelved", "delta_f1_MHz", "pull_01_MHz", "T1_us", "T_phi_us",
             "P_opt_dB", "readout_detuning_MHz", "ok")
    cols = {n: np.full(len(deltas), np.nan) for n in names}
    errors = {}

    def one(i):
        D = deltas[i]
        model = ReadoutModel.at_detuning(device, D, escape=escape, **model_kw)
        flux, dmap = model.spectrum.flux, model.dmap
        det = readout_detuning_for(model)
        pulse = replace(template, f_drive=model.readout_frequency(det))
        lo_pop, hi_pop, sh_pop = (model.populations(0), model.populations(1),
                                  model.populations(2))
        P1, _ = optimize_power(model, pulse, hi_pop, lo_pop)
        P2, _ = optimize_power(model, pulse, sh_pop, lo_pop)
        sid = f"sweep/{i}"
        p, _ = readout_pb(model, np.array([lo_pop, hi_pop]), pulse.at_power(P1), shots, seed,
                          sid + "/plain")
        q, _ = readout_pb(model, np.array([lo_pop, sh_pop]), pulse.at_power(P2), shots, seed,
                          sid + "/shelved")
        # effective pull from the foot of the simulated state-1 S-curve
        lo, hi = power_bracket(model, pulse.f_drive)
        grid = np.round(np.arange(lo, hi, 0.1), 6)
        S1 = run_scurve_mc(model, 1, grid, shift_shots, pulse, seed, stream=sid + "/s1")
        foot = S1.p_B < LOW_PB
        S1_foot = SCurveModel(grid[foot], S1.p_B[foot], S1.t_S, S1.label)
        match = scurve_shift_match(S1_foot, shifted_generator(model, pulse, grid[foot]),
                                   bounds=(-5.0, 3.0 * dmap.pull_01 + 5.0), step=0.5)
        T1, _ = purcell_t1(device, D)
        tphi = flux_dephasing_time(device, flux).T_phi
        return (p[1] - p[0], q[1] - q[0], match.shift, dmap.pull_01, T1, tphi, P1, det, 1.0)

    def guarded(i):
        try:
            return one(i)
        except (SimulationError, ValueError) as exc:
            return str(exc)

    for i, row in enumerate(parallel_map(guarded, len(deltas))):
        if isinstance(row, str):
            errors[f"{deltas[i]:.6g}"] = row
            cols["ok"][i] = 0.0
            continue
        for n, v in zip(names, row):
            cols[n][i] = v
    summary = {}
    if np.isfinite(cols["contrast"]).any():
        k = int(np.nanargmax(cols["contrast"]))
        summary = {"max_contrast": float(cols["contrast"][k]), "delta_at_max": float(deltas[k])}
    return ExperimentResult("sweep_detuning", "delta_GHz", deltas, cols, {}, {}, summary,
                            _meta("sweep_detuning", seed, shots=shots, failures=errors))
