"""Run configuration: strict JSON schema, defaults and JSON-pointer diagnostics.

Units are fixed by key: frequencies in GHz unless the key ends in ``_MHz``,
times in ns unless ``_us``, powers in dB re 1 mW at the fridge input.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .device import DeviceParams
from .errors import ConfigError, DomainError

EXPERIMENTS = {
    "scurve": "S-curves for |0>, |1>, |2> and the two readout contrasts",
    "rabi": "Rabi oscillation with plain or composite readout, damped-sine fit",
    "ramsey": "Ramsey fringes, T2 and fringe frequency",
    "t1": "Relaxation after a pi pulse, optionally under a cavity drive",
    "two_readout": "Back-action test with two successive readouts (R1, R2, R3)",
    "ac_stark": "AC-Stark shifted qubit frequency and photon number versus power",
    "sweep_detuning": "Contrast, effective pull, T1 and T_phi versus qubit detuning",
    "shot_trace": "Single shots with synthesized homodyne traces",
}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_GRID = {
    "oneOf": [
        {"type": "array", "items": _NUM, "minItems": 1},
        {"type": "object", "additionalProperties": False, "required": ["start", "stop", "num"],
         "properties": {"start": _NUM, "stop": _NUM, "num": {"type": "integer", "minimum": 1}}},
    ]
}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(required)}


DEVICE_SCHEMA = _obj({
    "f_C": _POS, "Q0": {"type": "number", "exclusiveMinimum": 1}, "I_C": _NONNEG,
    "K": {"type": "number", "exclusiveMaximum": 0}, "g": _POS, "E_J_max": _POS, "E_c": _POS,
    "d": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "T1_int": _POS,
    "A_flux": _NONNEG, "T_N": _NONNEG, "atten_dB": _NUM,
})

READOUT_DEFAULTS = {
    "delta_GHz": 0.38, "detuning_MHz": 17.0, "P_S_dB": None, "hold_drop_dB": 1.0,
    "t_R_ns": 15.0, "t_S_ns": 250.0, "t_H_ns": 700.0, "dt_ns": 0.5,
    "barrier_scale": 40.0, "attempt_rate_per_kappa": 0.5,
    "thermal_pop": 0.01, "pi_error": 0.01,
}
READOUT_SCHEMA = _obj({
    "delta_GHz": _POS, "detuning_MHz": _POS, "P_S_dB": {"type": ["number", "null"]},
    "hold_drop_dB": _NONNEG, "t_R_ns": _NONNEG, "t_S_ns": _NONNEG, "t_H_ns": _NONNEG,
    "dt_ns": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "barrier_scale": _POS, "attempt_rate_per_kappa": _POS, "thermal_pop": _PROB, "pi_error": _PROB,
})

_TIMING = _obj({"t_R_ns": _NONNEG, "t_S_ns": _NONNEG, "t_H_ns": _NONNEG})

EXPERIMENT_DEFAULTS = {
    "scurve": {"P_grid": {"start": -46.0, "stop": -36.0, "num": 41}},
    "rabi": {"dt_grid": {"start": 0.0, "stop": 300.0, "num": 151}, "f_rabi_MHz": 29.0,
             "rabi_decay_ns": 500.0, "shelve": True},
    "ramsey": {"delays": {"start": 0.0, "stop": 2000.0, "num": 101}, "detuning_MHz": 5.0,
               "T_phi_us": None},
    "t1": {"delays": {"start": 0.0, "stop": 2500.0, "num": 26}, "drive_powers_dB": [None]},
    "two_readout": {"dt_grid": {"start": 0.0, "stop": 200.0, "num": 101}, "delay_ns": 120.0,
                    "pulse": {"t_R_ns": 10.0, "t_S_ns": 40.0, "t_H_ns": 50.0},
                    "f_rabi_MHz": 29.0, "rabi_decay_ns": 500.0},
    "ac_stark": {"P_grid": {"start": -60.0, "stop": -26.0, "num": 69}, "n_photons_max": 150},
    "sweep_detuning": {"deltas": {"start": 0.15, "stop": 0.8, "num": 14}, "shift_shots": None},
    "shot_trace": {"states": [0, 1], "lpf_cutoff_MHz": 10.0, "window_ns": None},
}

EXPERIMENT_SCHEMAS = {
    "scurve": {"P_grid": _GRID},
    "rabi": {"dt_grid": _GRID, "f_rabi_MHz": _POS, "rabi_decay_ns": _POS,
             "shelve": {"type": "boolean"}},
    "ramsey": {"delays": _GRID, "detuning_MHz": {"type": "number", "not": {"const": 0}},
               "T_phi_us": {"type": ["number", "null"], "exclusiveMinimum": 0}},
    "t1": {"delays": _GRID,
           "drive_powers_dB": {"type": "array", "minItems": 1,
                               "items": {"type": ["number", "null"]}}},
    "two_readout": {"dt_grid": _GRID, "delay_ns": _NONNEG, "pulse": _TIMING,
                    "f_rabi_MHz": _POS, "rabi_decay_ns": _POS},
    "ac_stark": {"P_grid": _GRID, "n_photons_max": {"type": "integer", "minimum": 1}},
    "sweep_detuning": {"deltas": _GRID,
                       "shift_shots": {"type": ["integer", "null"], "minimum": 100}},
    "shot_trace": {"states": {"type": "array", "minItems": 1,
                              "items": {"type": "integer", "enum": [0, 1, 2]}},
                   "lpf_cutoff_MHz": _POS,
                   "window_ns": {"oneOf": [{"type": "null"},
                                           {"type": "array", "items": _NONNEG,
                                            "minItems": 2, "maxItems": 2}]}},
}

_EXPERIMENT_SCHEMA = {
    "type": "object", "required": ["type"],
    "properties": {"type": {"enum": list(EXPERIMENTS)}},
    "allOf": [
        {"if": {"properties": {"type": {"const": name}}},
         "then": {"additionalProperties": False,
                  "properties": {"type": {"const": name}, **props}}}
        for name, props in EXPERIMENT_SCHEMAS.items()
    ],
}

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    "shots": {"type": "integer", "minimum": 100},
    "output_dir": {"type": "string", "minLength": 1},
    "device": DEVICE_SCHEMA,
    "readout": READOUT_SCHEMA,
    "experiment": _EXPERIMENT_SCHEMA,
}, required=("seed", "device", "experiment"))


@dataclass(frozen=True)
class RunConfig:
    seed: int
    device: DeviceParams
    experiment: dict
    readout: dict
    shots: int = 10000
    output_dir: str = "out"

    @property
    def kind(self) -> str:
        return self.experiment["type"]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "shots": self.shots, "output_dir": self.output_dir,
                "device": self.device.to_dict(), "readout": copy.deepcopy(self.readout),
                "experiment": copy.deepcopy(self.experiment)}

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None) -> "RunConfig":
        data = self.to_dict()
        if seed is not None:
            data["seed"] = seed
        if output_dir is not None:
            data["output_dir"] = output_dir
        return parse_config(data)


def _pointer(path) -> str:
    return "".join(f"/{str(p).replace('~', '~0').replace('/', '~1')}" for p in path)


def _schema_error(data) -> ConfigError | None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = list(validator.iter_errors(data))
    if not errors:
        return None
    err = jsonschema.exceptions.best_match(errors)
    path = list(err.absolute_path)
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        if missing:
            path.append(missing[0])
    elif err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        if extra:
            path.append(extra[0])
            return ConfigError(f"unknown key {extra[0]!r}", _pointer(path))
    return ConfigError(err.message, _pointer(path))


def expand_grid(spec) -> np.ndarray:
    """A grid given as a list or as ``{start, stop, num}``."""
    if isinstance(spec, dict):
        return np.linspace(spec["start"], spec["stop"], spec["num"])
    return np.asarray(spec, dtype=float)


def parse_config(data) -> RunConfig:
    """Validate a decoded JSON document and fill in defaults."""
    err = _schema_error(data)
    if err is not None:
        raise err
    try:
        device = DeviceParams(**data["device"])
    except DomainError as exc:
        raise ConfigError(str(exc), f"/device/{getattr(exc, 'field', '')}") from None
    readout = {**READOUT_DEFAULTS, **data.get("readout", {})}
    exp = data["experiment"]
    experiment = {"type": exp["type"], **copy.deepcopy(EXPERIMENT_DEFAULTS[exp["type"]]),
                  **copy.deepcopy(exp)}
    for key, value in experiment.items():
        if key in ("P_grid", "dt_grid", "delays", "deltas"):
            grid = expand_grid(value)
            if np.any(np.diff(grid) <= 0):
                raise ConfigError("grid must be strictly increasing", f"/experiment/{key}")
    return RunConfig(seed=int(data["seed"]), device=device, experiment=experiment,
                     readout=readout, shots=int(data.get("shots", 10000)),
                     output_dir=data.get("output_dir", "out"))


def load_config(path) -> RunConfig:
    """Read and validate a JSON run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: "
                          f"{exc.msg}") from None
    return parse_config(data)


def bundled_configs() -> dict:
    """Names and paths of the configurations shipped with the package."""
    root = resources.files("jbasim") / "configs"
    return {p.name[:-5]: p for p in sorted(root.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".json")}
