"""Single-shot readout of a transmon with a Josephson bifurcation amplifier."""

from .device import (CoherenceBudget, DeviceParams, DispersiveMap, TransmonSpectrum,
                     coherence_budget, diagonalize_transmon, dress_system, extract_tphi,
                     flux_dephasing_time, flux_tune, purcell_t1, stark_invert)
from .errors import (ConfigError, ConvergenceError, DispersiveRegimeError, DomainError,
                     NoBistabilityError, SimulationError)
from .jba import (EscapeModel, JbaOperatingPoint, SCurveModel, drive_from_power, escape_rate,
                  s_curve_analytic, spinodals, steady_states, threshold_power)
from .readout import (NoiseChain, ReadoutModel, ReadoutPulse, ShotRecord, discriminate,
                      homodyne_trace, run_scurve_mc, simulate_shot, two_readout_run)

__version__ = "0.1.0"

__all__ = [
    "CoherenceBudget", "ConfigError", "ConvergenceError", "DeviceParams", "DispersiveMap",
    "DispersiveRegimeError", "DomainError", "EscapeModel", "JbaOperatingPoint",
    "NoBistabilityError", "NoiseChain", "ReadoutModel", "ReadoutPulse", "SCurveModel",
    "ShotRecord", "SimulationError", "TransmonSpectrum", "coherence_budget",
    "diagonalize_transmon", "discriminate", "dress_system", "drive_from_power", "escape_rate",
    "extract_tphi", "flux_dephasing_time", "flux_tune", "homodyne_trace", "purcell_t1",
    "run_scurve_mc", "s_curve_analytic", "simulate_shot", "spinodals", "stark_invert",
    "steady_states", "threshold_power", "two_readout_run",
]
