"""Static transmon physics: spectrum, flux tuning, cavity dressing and coherence.

Frequencies are in GHz unless a name says otherwise, coherence times in
microseconds.  The transmon Hamiltonian uses the Cooper-pair charging energy,

    H = E_c n^2 - E_J cos(theta),

with ``n`` counting Cooper pairs, so the plasma frequency is
``sqrt(2 E_J E_c)`` rather than the more common ``sqrt(8 E_J E_C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import brentq

from .errors import ConvergenceError, DispersiveRegimeError, DomainError

TWO_PI = 2.0 * math.pi

#: Cap returned by :func:`flux_dephasing_time` where first-order flux noise vanishes (us).
TPHI_CAP_US = 100.0

# large-time constant of int_eps^inf sin^2(u)/u^3 du - ln(1/eps)
PHASE_VARIANCE_CONST = 1.5 - 0.5772156649015329 - math.log(2.0)


@dataclass(frozen=True)
class DeviceParams:
    """Circuit constants of the transmon + nonlinear cavity sample.

    Attributes
    ----------
    f_C : float
        Bare cavity frequency (GHz).
    Q0 : float
        Loaded quality factor.
    I_C : float
        Critical current of the cavity junction (uA).  Informational only.
    K : float
        Kerr frequency shift per photon (GHz, negative for a softening cavity).
    g : float
        Qubit-cavity coupling (GHz).
    E_J_max : float
        Josephson energy at zero flux (GHz).
    E_c : float
        Cooper-pair charging energy (GHz).
    d : float
        SQUID junction asymmetry, 0 for a symmetric SQUID.
    T1_int : float
        Relaxation time of the non-radiative channel (us).
    A_flux : float
        Amplitude of the 1/f flux noise at 1 Hz (Phi_0 / sqrt(Hz)).
    T_N : float
        Amplifier noise temperature (K).
    atten_dB : float
        Attenuation from the fridge input to the sample (dB, negative).
    """

    f_C: float = 6.4535
    Q0: float = 685.0
    I_C: float = 0.72
    K: float = -1.0e-3
    g: float = 0.044
    E_J_max: float = 21.0
    E_c: float = 1.2
    d: float = 0.0
    T1_int: float = 0.7
    A_flux: float = 2.0e-5
    T_N: float = 3.0
    atten_dB: float = -77.0

    def __post_init__(self):
        checks = [
            ("f_C", self.f_C > 0, "must be > 0"),
            ("Q0", self.Q0 > 1, "must be > 1"),
            ("g", self.g > 0, "must be > 0"),
            ("E_c", self.E_c > 0, "must be > 0"),
            ("E_J_max", self.E_J_max > self.E_c, "must exceed E_c"),
            ("K", self.K < 0, "must be < 0 (softening Kerr)"),
            ("d", 0 <= self.d < 1, "must lie in [0, 1)"),
            ("T1_int", self.T1_int > 0, "must be > 0"),
            ("A_flux", self.A_flux >= 0, "must be >= 0"),
            ("T_N", self.T_N >= 0, "must be >= 0"),
        ]
        for name, ok, msg in checks:
            if not ok:
                err = DomainError(f"DeviceParams.{name} {msg} (got {getattr(self, name)!r})")
                err.field = name
                raise err

    @property
    def kappa(self) -> float:
        """Cavity energy decay rate (rad/s)."""
        return TWO_PI * self.f_C * 1e9 / self.Q0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceParams":
        return cls(**data)

    def replace(self, **changes) -> "DeviceParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class TransmonSpectrum:
    flux: float
    E_J: float
    E_c: float
    levels: np.ndarray
    charge_elems: np.ndarray

    @property
    def f01(self) -> float:
        return float(self.levels[1])

    @property
    def f12(self) -> float:
        return float(self.levels[2] - self.levels[1])

    @property
    def alpha(self) -> float:
        return self.f12 - self.f01

    def transition(self, k: int) -> float:
        """Frequency of the k -> k+1 transition (GHz)."""
        return float(self.levels[k + 1] - self.levels[k])


@dataclass(frozen=True)
class DispersiveMap:
    """Cavity frequencies dressed by the qubit, and the AC-Stark table.

    ``f_Ci[i]`` is the energy needed to add the first photon with the qubit
    in dressed state ``i``; ``stark[n]`` is the dressed 0-1 qubit frequency
    with ``n`` photons in the cavity.
    """

    f_C: float
    f01: float
    g: float
    f_Ci: np.ndarray
    stark: np.ndarray

    @property
    def delta(self) -> float:
        return self.f_C - self.f01

    @property
    def pull_01(self) -> float:
        """Cavity pull f_C0 - f_C1 in MHz."""
        return float(self.f_Ci[0] - self.f_Ci[1]) * 1e3

    @property
    def pull_02(self) -> float:
        return float(self.f_Ci[0] - self.f_Ci[2]) * 1e3


@dataclass(frozen=True)
class CoherenceBudget:
    T1: float
    T1_purcell: float
    T2: float
    T_phi: float
    cascade: dict = field(default_factory=dict)


class DephasingEstimate(NamedTuple):
    T_phi: float
    sensitivity: float
    second_order_limited: bool


def diagonalize_transmon(E_J: float, E_c: float, n_levels: int = 6,
                         charge_cutoff: int = 20, flux: float = 0.0) -> TransmonSpectrum:
    """Diagonalize the transmon in the Cooper-pair charge basis.

    The result is checked against a run at twice the charge cutoff; the
    0-1 transition must agree to 1e-6 relative or ``ConvergenceError`` is
    raised.
    """
    if E_J <= 0 or E_c <= 0:
        raise DomainError(f"E_J and E_c must be positive (got {E_J}, {E_c})")
    if charge_cutoff < 10:
        raise DomainError(f"charge_cutoff must be >= 10 (got {charge_cutoff})")
    if not 2 <= n_levels <= charge_cutoff:
        raise DomainError(f"n_levels must lie in [2, charge_cutoff] (got {n_levels})")

    levels, elems = _charge_basis_solve(E_J, E_c, n_levels, charge_cutoff)
    ref, _ = _charge_basis_solve(E_J, E_c, n_levels, 2 * charge_cutoff)
    if abs(levels[1] - ref[1]) > 1e-6 * abs(ref[1]):
        raise ConvergenceError(
            f"f01 not converged at charge_cutoff={charge_cutoff}: "
            f"{levels[1]:.9g} vs {ref[1]:.9g} GHz at twice the cutoff")
    return TransmonSpectrum(flux=flux, E_J=E_J, E_c=E_c, levels=levels, charge_elems=elems)


def _charge_basis_solve(E_J, E_c, n_levels, cutoff):
    n = np.arange(-cutoff, cutoff + 1, dtype=float)
    diag = E_c * n**2
    off = np.full(2 * cutoff, -0.5 * E_J)
    evals, evecs = eigh_tridiagonal(diag, off, select="i", select_range=(0, n_levels - 1))
    levels = evals - evals[0]
    # <k|n|k+1> between neighbouring eigenstates
    elems = np.abs(np.einsum("ik,i,ik->k", evecs[:, :-1], n, evecs[:, 1:]))
    if elems[0] == 0:
        raise ConvergenceError("vanishing 0-1 charge matrix element")
    return levels, elems / elems[0]


def flux_tune(device: DeviceParams, flux: float) -> float:
    """Josephson energy of the (possibly asymmetric) SQUID at reduced flux ``flux``."""
    c = math.cos(math.pi * flux)
    s = math.sin(math.pi * flux)
    return device.E_J_max * math.sqrt(c * c + device.d**2 * s * s)


def transmon_at_flux(device: DeviceParams, flux: float, n_levels: int = 6,
                     charge_cutoff: int = 20) -> TransmonSpectrum:
    return diagonalize_transmon(flux_tune(device, flux), device.E_c, n_levels,
                                charge_cutoff, flux=flux)


def flux_for_f01(device: DeviceParams, f01: float, n_levels: int = 6) -> float:
    """Reduced flux in [0, 1/2] at which the qubit frequency equals ``f01``."""
    def f01_of(E_J):
        return diagonalize_transmon(E_J, device.E_c, 2, 20).f01 - f01

    E_J_min = max(device.E_J_max * device.d, 1e-3 * device.E_c)
    lo, hi = f01_of(E_J_min), f01_of(device.E_J_max)
    if not lo <= 0 <= hi:
        raise DomainError(
            f"f01 = {f01} GHz is outside the tunable range "
            f"[{lo + f01:.4f}, {hi + f01:.4f}] GHz")
    E_J = brentq(f01_of, E_J_min, device.E_J_max, xtol=1e-13, rtol=1e-14)
    r2 = (E_J / device.E_J_max) ** 2
    cos2 = (r2 - device.d**2) / (1 - device.d**2)
    return math.acos(math.sqrt(min(max(cos2, 0.0), 1.0))) / math.pi


def dress_system(device: DeviceParams, spectrum: TransmonSpectrum,
                 n_photons_max: int = 20) -> DispersiveMap:
    """Dress the cavity by the transmon with the excitation-conserving coupling.

    The Hamiltonian ``H_t + f_C a^dag a + g sum_i m_i (|i><i+1| a^dag + h.c.)``
    conserves the total excitation number, so it is diagonalized exactly
    block by block.  Inside a block the bare states ``|i, N-i>`` are ordered
    by decreasing energy as long as every transmon transition lies below
    the cavity; the tridiagonal block has no degeneracies so the ordering
    survives the coupling and labels the dressed states.
    """
    if n_photons_max < 1:
        raise DomainError("n_photons_max must be >= 1")
    L = len(spectrum.levels)
    if L < 5:
        raise DomainError(f"need at least 5 transmon levels to dress the cavity (got {L})")
    gs = device.g * spectrum.charge_elems
    for k in range(min(3, L - 1)):
        gap = device.f_C - spectrum.transition(k)
        if gap <= gs[k]:
            raise DispersiveRegimeError(
                f"transition {k}->{k + 1} at {spectrum.transition(k):.4f} GHz lies within the "
                f"coupling {gs[k] * 1e3:.1f} MHz of the cavity at {device.f_C} GHz "
                f"(detuning {gap * 1e3:+.1f} MHz)")

    f_Ci, stark = _dressed_tables(device.f_C, spectrum.levels, gs, n_photons_max)
    f_Ci_ref, _ = _dressed_tables(device.f_C, spectrum.levels[:-1], gs[:-1], 1)
    if np.max(np.abs(f_Ci - f_Ci_ref)) > 1e-6:
        raise ConvergenceError(
            f"dressed cavity frequencies change by {np.max(np.abs(f_Ci - f_Ci_ref)) * 1e6:.2f} kHz "
            f"when dropping the top transmon level; increase n_levels")
    return DispersiveMap(f_C=device.f_C, f01=spectrum.f01, g=device.g, f_Ci=f_Ci, stark=stark)


def _dressed_tables(f_C, levels, gs, n_max):
    L = len(levels)
    cache = {}

    def block(N):
        if N not in cache:
            i = np.arange(min(N, L - 1) + 1)
            diag = levels[i] + (N - i) * f_C
            off = gs[i[:-1]] * np.sqrt(N - i[:-1])
            if len(i) == 1:
                cache[N] = diag
            else:
                cache[N] = eigh_tridiagonal(diag, off, eigvals_only=True)[::-1]
        return cache[N]

    def energy(i, n):
        return block(i + n)[i]

    f_Ci = np.array([energy(i, 1) - energy(i, 0) for i in range(3)])
    stark = np.array([energy(1, n) - energy(0, n) for n in range(n_max + 1)])
    return f_Ci, stark


def dispersive_map_at_delta(device: DeviceParams, delta: float, n_levels: int = 6,
                            n_photons_max: int = 20) -> tuple[float, TransmonSpectrum, DispersiveMap]:
    """Retune the flux so that ``f_C - f01 = delta`` and dress the cavity there."""
    flux = flux_for_f01(device, device.f_C - delta)
    spectrum = transmon_at_flux(device, flux, n_levels)
    return flux, spectrum, dress_system(device, spectrum, n_photons_max)


def stark_invert(dmap: DispersiveMap, f01_shifted: float) -> float:
    """Mean photon number giving the qubit frequency ``f01_shifted`` (linear interpolation)."""
    s = dmap.stark
    steps = np.diff(s)
    if not (np.all(steps < 0) or np.all(steps > 0)):
        raise DomainError("Stark table is not monotone; cannot invert")
    lo, hi = min(s[0], s[-1]), max(s[0], s[-1])
    if not lo <= f01_shifted <= hi:
        raise DomainError(
            f"f01 = {f01_shifted:.6f} GHz outside the tabulated Stark range [{lo:.6f}, {hi:.6f}]")
    n = np.arange(len(s), dtype=float)
    if steps[0] < 0:
        return float(np.interp(f01_shifted, s[::-1], n[::-1]))
    return float(np.interp(f01_shifted, s, n))


def purcell_rate(device: DeviceParams, delta: float, coupling: float | None = None) -> float:
    """Spontaneous emission rate through the cavity, kappa (g/Delta)^2 (1/us)."""
    if delta == 0:
        raise DomainError("Purcell rate diverges at zero detuning")
    g = device.g if coupling is None else coupling
    return device.kappa * (g / delta) ** 2 * 1e-6


def purcell_t1(device: DeviceParams, delta: float) -> tuple[float, float]:
    """Return ``(T1, T1_purcell)`` in us at qubit-cavity detuning ``delta`` (GHz)."""
    gamma_p = purcell_rate(device, delta)
    return 1.0 / (gamma_p + 1.0 / device.T1_int), 1.0 / gamma_p


def cascade_rates(device: DeviceParams, spectrum: TransmonSpectrum) -> dict:
    """Downward decay rates (1/us) keyed ``"1->0"`` and ``"2->1"``.

    Each step k -> k-1 combines the Purcell rate with the coupling scaled by
    the charge matrix element, and the intrinsic channel scaled by the
    squared matrix element.
    """
    rates = {}
    for k in (1, 2):
        m = spectrum.charge_elems[k - 1]
        gamma = purcell_rate(device, device.f_C - spectrum.transition(k - 1), device.g * m)
        rates[f"{k}->{k - 1}"] = gamma + m**2 / device.T1_int
    return rates


def flux_sensitivity(spectrum_fn: Callable[[float], float], flux: float,
                     step: float = 1e-4) -> float:
    """|df01/dflux| in GHz per flux quantum, Richardson-extrapolated central difference."""
    d1 = (spectrum_fn(flux + step) - spectrum_fn(flux - step)) / (2 * step)
    h = step / 2
    d2 = (spectrum_fn(flux + h) - spectrum_fn(flux - h)) / (2 * h)
    return abs((4 * d2 - d1) / 3)


def flux_dephasing_time(device: DeviceParams, flux: float,
                        spectrum_fn: Callable[[float], float] | None = None,
                        f_ir: float = 1.0, sweet_spot_tol: float = 1e-6) -> DephasingEstimate:
    """Pure dephasing time (us) from first-order 1/f flux noise.

    For a one-sided flux spectral density ``A^2 / f`` above ``f_ir`` the
    accumulated phase has variance

        var(t) = (2 pi A D t)^2 [ln(1 / (pi f_ir t)) + 3/2 - gamma_E - ln 2],

    with ``D = |df01/dflux|`` in Hz per flux quantum, and the coherence
    decays as ``exp(-var / 2)``.  The 1/e time is found by fixed-point
    iteration.  Where ``D`` or the noise amplitude vanishes the time is
    capped at ``TPHI_CAP_US`` and flagged as limited by second-order
    processes.
    """
    if spectrum_fn is None:
        def spectrum_fn(phi):
            return transmon_at_flux(device, phi, n_levels=2).f01

    D = flux_sensitivity(spectrum_fn, flux)
    if device.A_flux == 0 or D < sweet_spot_tol:
        return DephasingEstimate(TPHI_CAP_US, D, True)
    scale = TWO_PI * device.A_flux * D * 1e9
    t = 1e-6
    for _ in range(200):
        log_term = math.log(1.0 / (math.pi * f_ir * t)) + PHASE_VARIANCE_CONST
        t_new = math.sqrt(2.0 / log_term) / scale
        if abs(t_new - t) <= 1e-6 * t_new:
            t = t_new
            break
        t = t_new
    else:
        raise ConvergenceError("dephasing fixed point did not converge")
    t_us = t * 1e6
    if t_us > TPHI_CAP_US:
        return DephasingEstimate(TPHI_CAP_US, D, True)
    return DephasingEstimate(t_us, D, False)


def extract_tphi(T1: float, T2: float, rtol: float = 1e-9) -> float:
    """Pure dephasing time from T1 and the Ramsey time T2; ``inf`` when T2 = 2 T1."""
    if T1 <= 0 or T2 <= 0:
        raise DomainError(f"T1 and T2 must be positive (got {T1}, {T2})")
    if T2 > 2 * T1 * (1 + rtol):
        raise DomainError(f"T2 = {T2} exceeds 2 T1 = {2 * T1}: inconsistent coherence times")
    rate = 1.0 / T2 - 1.0 / (2 * T1)
    if rate <= 1.0 / (2 * T1) * rtol:
        return math.inf
    return 1.0 / rate


def compose_t2(T1: float, T_phi: float) -> float:
    return 1.0 / (1.0 / (2 * T1) + 1.0 / T_phi)


def coherence_budget(device: DeviceParams, spectrum: TransmonSpectrum) -> CoherenceBudget:
    T1, T1_p = purcell_t1(device, device.f_C - spectrum.f01)
    tphi = flux_dephasing_time(device, spectrum.flux).T_phi
    return CoherenceBudget(T1=T1, T1_purcell=T1_p, T2=compose_t2(T1, tphi), T_phi=tphi,
                           cascade=cascade_rates(device, spectrum))
