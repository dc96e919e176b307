"""Semiclassical driven Duffing cavity: steady states, bifurcation, escape, S-curves.

The slowly varying intracavity amplitude obeys

    da/dt = -[i (delta - |K| |a|^2) + kappa / 2] a - eps,

so stationary photon numbers ``n = |a|^2`` are the non-negative roots of
``[(delta - |K| n)^2 + kappa^2 / 4] n = eps^2``.  Rates are angular (rad/s)
and ``eps^2`` is in photons/s^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.constants import h as PLANCK

from .device import TWO_PI, DeviceParams
from .errors import DomainError, NoBistabilityError

SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class JbaOperatingPoint:
    """Drive frequency and cavity parameters seen by one qubit state.

    ``delta`` is ``2 pi (f_cavity - f_drive)`` so a drive below the cavity
    has ``delta > 0``; ``K_ang`` is the angular Kerr shift per photon.
    """

    f_drive: float
    delta: float
    kappa: float
    K_ang: float

    def __post_init__(self):
        if self.kappa <= 0:
            raise DomainError(f"kappa must be positive (got {self.kappa})")
        if self.K_ang >= 0:
            raise DomainError(f"K_ang must be negative (got {self.K_ang})")

    @property
    def Omega(self) -> float:
        return 2.0 * self.delta / self.kappa

    @property
    def bistable(self) -> bool:
        return self.Omega > SQRT3

    @classmethod
    def from_frequencies(cls, device: DeviceParams, f_cavity: float,
                         f_drive: float) -> "JbaOperatingPoint":
        """Build from the cavity and drive frequencies in GHz."""
        return cls(f_drive=f_drive, delta=TWO_PI * (f_cavity - f_drive) * 1e9,
                   kappa=device.kappa, K_ang=TWO_PI * device.K * 1e9)


@dataclass(frozen=True)
class EscapeModel:
    """Activated escape from the low-amplitude state near its spinodal.

    ``attempt_rate`` is in 1/s, ``barrier_scale`` is the dimensionless
    barrier height far from threshold.
    """

    attempt_rate: float
    barrier_scale: float = 40.0
    exponent: float = 1.5

    def __post_init__(self):
        if self.attempt_rate <= 0 or self.barrier_scale <= 0:
            raise DomainError("attempt_rate and barrier_scale must be positive")

    @classmethod
    def default(cls, device: DeviceParams, barrier_scale: float = 40.0) -> "EscapeModel":
        # saturated switching at the field relaxation rate kappa/2
        return cls(attempt_rate=device.kappa / 2.0, barrier_scale=barrier_scale)


@dataclass
class SCurveModel:
    grid: np.ndarray
    p_B: np.ndarray
    t_S: float
    label: str = ""
    stderr: np.ndarray | None = None
    n_shots: int | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.p_B = np.asarray(self.p_B, dtype=float)
        if self.grid.shape != self.p_B.shape:
            raise DomainError("S-curve grid and p_B lengths differ")


class Spinodals(NamedTuple):
    """Turning points of eps^2(n).

    ``eps2_switch`` = eps^2(n_minus) ends the low-amplitude branch (upward
    bifurcation); ``eps2_retrap`` = eps^2(n_plus) ends the high branch, and
    ``eps2_retrap < eps2_switch``.
    """

    n_minus: float
    n_plus: float
    eps2_switch: float
    eps2_retrap: float


def drive_squared(point: JbaOperatingPoint, n):
    """eps^2 that holds ``n`` photons in steady state."""
    n = np.asarray(n, dtype=float)
    return ((point.delta - abs(point.K_ang) * n) ** 2 + 0.25 * point.kappa**2) * n


def steady_states(point: JbaOperatingPoint, drive: float) -> list[float]:
    """All stationary photon numbers at drive amplitude ``drive`` (sorted).

    Solved in reduced units ``x = |K| n / kappa``, where the cubic reads
    ``x^3 - Omega x^2 + (Omega^2 + 1) x / 4 - e = 0``.  A double root at a
    spinodal is reported once.
    """
    if drive < 0:
        raise DomainError("drive amplitude must be non-negative")
    if drive == 0:
        return [0.0]
    k = abs(point.K_ang)
    Om = point.Omega
    e = drive**2 * k / point.kappa**3
    roots = np.roots([1.0, -Om, 0.25 * (Om * Om + 1.0), -e])
    scale = max(1.0, abs(Om))
    real = sorted(float(r.real) for r in roots if abs(r.imag) <= 1e-6 * scale and r.real >= 0)
    xs: list[float] = []
    for x in real:
        x = _polish(x, Om, e)
        if xs and abs(x - xs[-1]) <= 1e-6 * max(x, 1e-12):
            continue
        xs.append(x)
    return [x * point.kappa / k for x in xs]


def _polish(x, Om, e):
    for _ in range(3):
        f = x * ((0.5 * Om - x) ** 2 + 0.25) - e
        fp = 3 * x * x - 2 * Om * x + 0.25 * (Om * Om + 1)
        if fp == 0:
            break
        step = f / fp
        if abs(step) > 1e-3 * max(x, 1e-12):
            break
        x -= step
    return x


def spinodals(point: JbaOperatingPoint) -> Spinodals:
    if not point.bistable:
        raise NoBistabilityError(
            f"Omega = {point.Omega:.4f} <= sqrt(3): the Duffing response is not bistable")
    k = abs(point.K_ang)
    root = math.sqrt(max(point.delta**2 - 0.75 * point.kappa**2, 0.0))
    n_minus = (2 * point.delta - root) / (3 * k)
    n_plus = (2 * point.delta + root) / (3 * k)
    return Spinodals(n_minus, n_plus, float(drive_squared(point, n_minus)),
                     float(drive_squared(point, n_plus)))


def escape_rate(point: JbaOperatingPoint, model: EscapeModel, drive: float) -> float:
    """Escape rate (1/s) out of the low-amplitude state below threshold."""
    eps2_B = spinodals(point).eps2_switch
    ratio = drive**2 / eps2_B
    if drive < 0 or ratio > 1 + 1e-9:
        raise DomainError(
            f"drive^2 / eps_B^2 = {ratio:.6g} outside [0, 1]; escape is only defined below threshold")
    return float(switching_rate(point, model, drive**2))


def switching_rate(point: JbaOperatingPoint, model: EscapeModel, eps2):
    """Vectorized hazard (1/s) for any drive, saturating at threshold.

    Above threshold the low state no longer exists and the rate is the
    attempt rate.  A monostable cavity (Omega <= sqrt 3) never switches.
    """
    eps2 = np.asarray(eps2, dtype=float)
    if not point.bistable:
        return np.zeros_like(eps2)
    eps2_B = spinodals(point).eps2_switch
    barrier = np.clip(1.0 - eps2 / eps2_B, 0.0, None) ** model.exponent
    return model.attempt_rate * np.exp(-model.barrier_scale * barrier)


def drive_from_power(P_dB, device: DeviceParams, f_drive: float):
    """Drive amplitude eps (sqrt(photons)/s) for a fridge-input power in dB re 1 mW."""
    flux = photon_flux(P_dB, device, f_drive)
    return np.sqrt(device.kappa * flux)


def photon_flux(P_dB, device: DeviceParams, f_drive: float):
    """Incident photon flux at the sample (photons/s)."""
    P_watt = 1e-3 * np.power(10.0, (np.asarray(P_dB, dtype=float) + device.atten_dB) / 10.0)
    return P_watt / (PLANCK * f_drive * 1e9)


def power_from_drive2(eps2, device: DeviceParams, f_drive: float):
    """Inverse of :func:`drive_from_power`, taking eps^2."""
    P_watt = np.asarray(eps2, dtype=float) / device.kappa * PLANCK * f_drive * 1e9
    return 10.0 * np.log10(P_watt / 1e-3) - device.atten_dB


def threshold_power(point: JbaOperatingPoint, device: DeviceParams) -> float:
    """Fridge-input power (dB) at which the low-amplitude branch ends."""
    return float(power_from_drive2(spinodals(point).eps2_switch, device, point.f_drive))


def s_curve_analytic(point: JbaOperatingPoint, model: EscapeModel, P_grid, t_S: float,
                     device: DeviceParams, label: str = "") -> SCurveModel:
    """p_B(P) = 1 - exp(-Gamma t_S) for a square sampling pulse of ``t_S`` ns."""
    P_grid = np.asarray(P_grid, dtype=float)
    if np.any(np.diff(P_grid) < 0):
        raise DomainError("power grid must be sorted")
    eps2 = drive_from_power(P_grid, device, point.f_drive) ** 2
    gamma = switching_rate(point, model, eps2)
    p = -np.expm1(-gamma * t_S * 1e-9)
    return SCurveModel(grid=P_grid, p_B=p, t_S=t_S, label=label)
