"""Command-line entry point: ``sim run | validate | list-experiments``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import (EXPERIMENTS, RunConfig, bundled_configs, expand_grid, load_config)
from .device import flux_dephasing_time
from .errors import ConfigError, SimulationError
from .jba import EscapeModel
from .protocols import (ExperimentResult, composite_for, contrast_vs_detuning, optimize_power,
                        run_ac_stark, run_rabi, run_ramsey, run_scurves, run_t1,
                        run_two_readout)
from .readout import (NoiseChain, ReadoutModel, ReadoutPulse, discriminate, homodyne_trace,
                      simulate_shot)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


# --------------------------------------------------------------------------- model setup

def build_model(cfg: RunConfig, n_photons_max: int = 20) -> ReadoutModel:
    r = cfg.readout
    escape = EscapeModel(attempt_rate=cfg.device.kappa * r["attempt_rate_per_kappa"],
                         barrier_scale=r["barrier_scale"])
    return ReadoutModel.at_detuning(cfg.device, r["delta_GHz"], escape=escape,
                                    n_photons_max=n_photons_max, thermal_pop=r["thermal_pop"],
                                    pi_error=r["pi_error"])


def base_pulse(cfg: RunConfig, model: ReadoutModel, timing: dict | None = None) -> ReadoutPulse:
    r = {**cfg.readout, **(timing or {})}
    return ReadoutPulse(f_drive=model.readout_frequency(r["detuning_MHz"]), P_S=0.0,
                        P_H=-r["hold_drop_dB"], t_R=r["t_R_ns"], t_S=r["t_S_ns"],
                        t_H=r["t_H_ns"], dt=r["dt_ns"])


def sampling_power(cfg: RunConfig, model: ReadoutModel, pulse: ReadoutPulse,
                   excited: int = 1) -> float:
    """Configured sampling power, or the one maximizing the |excited> vs |0> contrast."""
    if cfg.readout["P_S_dB"] is not None:
        return float(cfg.readout["P_S_dB"])
    P, _ = optimize_power(model, pulse, model.populations(excited), model.populations(0))
    return round(P, 6)


# --------------------------------------------------------------------------- experiments

def _scurve(cfg):
    model = build_model(cfg)
    pulse = base_pulse(cfg, model)
    return run_scurves(model, expand_grid(cfg.experiment["P_grid"]), pulse, cfg.shots,
                       cfg.seed), {}


def _rabi(cfg):
    e = cfg.experiment
    model = build_model(cfg)
    pulse = base_pulse(cfg, model)
    P = sampling_power(cfg, model, pulse, 2 if e["shelve"] else 1)
    seq = composite_for(model, pulse.at_power(P), e["shelve"])
    return run_rabi(model, expand_grid(e["dt_grid"]), seq, cfg.shots, cfg.seed,
                    f_rabi=e["f_rabi_MHz"] * 1e-3, rabi_decay=e["rabi_decay_ns"]), {}


def _ramsey(cfg):
    e = cfg.experiment
    model = build_model(cfg)
    pulse = base_pulse(cfg, model)
    P = sampling_power(cfg, model, pulse)
    tphi = e["T_phi_us"]
    if tphi is None:
        tphi = flux_dephasing_time(cfg.device, model.spectrum.flux).T_phi
    return run_ramsey(model, expand_grid(e["delays"]), e["detuning_MHz"], pulse.at_power(P),
                      cfg.shots, cfg.seed, T_phi=tphi), {}


def _t1(cfg):
    e = cfg.experiment
    model = build_model(cfg)
    pulse = base_pulse(cfg, model)
    P = sampling_power(cfg, model, pulse)
    delays = expand_grid(e["delays"])
    runs = [run_t1(model, delays, pulse.at_power(P), cfg.shots, cfg.seed, drive_power=Pd)
            for Pd in e["drive_powers_dB"]]
    if len(runs) == 1:
        return runs[0], {}
    cols, errs, fits, summary = {}, {}, {}, {}
    for Pd, res in zip(e["drive_powers_dB"], runs):
        tag = "none" if Pd is None else f"{Pd:g}dB"
        cols[f"p_B[{tag}]"] = res.columns["p_B"]
        errs[f"p_B[{tag}]"] = res.stderr["p_B"]
        fits[tag] = res.fits["exponential"]
        for k, v in res.summary.items():
            summary[f"{k}[{tag}]"] = v
    return ExperimentResult("t1", "delay_ns", delays, cols, errs, fits, summary,
                            {"protocol": "t1", "seed": cfg.seed, "shots": cfg.shots, "P_S": P,
                             "drive_powers_dB": e["drive_powers_dB"]}), {}


def _two_readout(cfg):
    e = cfg.experiment
    model = build_model(cfg)
    pulse = base_pulse(cfg, model, e["pulse"])
    pulse = pulse.at_power(sampling_power(cfg, model, pulse))
    return run_two_readout(model, expand_grid(e["dt_grid"]), pulse, pulse, e["delay_ns"],
                           cfg.shots, cfg.seed, f_rabi=e["f_rabi_MHz"] * 1e-3,
                           rabi_decay=e["rabi_decay_ns"]), {}


def _ac_stark(cfg):
    e = cfg.experiment
    model = build_model(cfg, n_photons_max=e["n_photons_max"])
    f = model.readout_frequency(cfg.readout["detuning_MHz"])
    return run_ac_stark(model, expand_grid(e["P_grid"]), f), {}


def _sweep(cfg):
    e = cfg.experiment
    r = cfg.readout
    template = ReadoutPulse(f_drive=cfg.device.f_C, P_S=0.0, P_H=-r["hold_drop_dB"],
                            t_R=r["t_R_ns"], t_S=r["t_S_ns"], t_H=r["t_H_ns"], dt=r["dt_ns"])
    escape = EscapeModel(attempt_rate=cfg.device.kappa * r["attempt_rate_per_kappa"],
                         barrier_scale=r["barrier_scale"])
    return contrast_vs_detuning(cfg.device, expand_grid(e["deltas"]), cfg.shots, cfg.seed,
                                pulse_template=template, shift_shots=e["shift_shots"],
                                escape=escape, thermal_pop=r["thermal_pop"],
                                pi_error=r["pi_error"]), {}


def _shot_trace(cfg):
    e = cfg.experiment
    model = build_model(cfg)
    pulse = base_pulse(cfg, model)
    pulse = pulse.at_power(sampling_power(cfg, model, pulse))
    noise = NoiseChain(T_N=cfg.device.T_N, lpf_cutoff=e["lpf_cutoff_MHz"], dt=pulse.dt)
    window = tuple(e["window_ns"] or (pulse.t_sample_end + 100.0, pulse.duration))
    reference = model.point(0, pulse.f_drive)
    names = ("prepared", "bifurcated", "bifurcation_time_ns", "final_state", "classified_B",
             "margin")
    cols = {n: [] for n in names}
    traces = {}
    for k, state in enumerate(e["states"]):
        shot = simulate_shot(state, pulse, model, cfg.seed, index=k)
        t, I, Q, _ = homodyne_trace(shot, model.point(state, pulse.f_drive), pulse, cfg.device,
                                    noise, cfg.seed, index=k, reference=reference)
        label, margin = discriminate(I, window, 0.5, t=t)
        for n, v in zip(names, (state, shot.bifurcated, shot.bifurcation_time, shot.final_state,
                                label == "B", margin)):
            cols[n].append(math.nan if v is None else float(v))
        traces[f"shot_{k:03d}"] = (t, I, Q)
    result = ExperimentResult(
        "shot_trace", "shot", np.arange(len(e["states"])),
        {n: np.array(v) for n, v in cols.items()}, {}, {},
        {"n_shots": len(e["states"]),
         "agreement": float(np.mean(np.array(cols["bifurcated"]) == cols["classified_B"]))},
        {"protocol": "shot_trace", "seed": cfg.seed, "P_S": pulse.P_S, "window_ns": window})
    return result, traces


RUNNERS = {"scurve": _scurve, "rabi": _rabi, "ramsey": _ramsey, "t1": _t1,
           "two_readout": _two_readout, "ac_stark": _ac_stark, "sweep_detuning": _sweep,
           "shot_trace": _shot_trace}


def dispatch(cfg: RunConfig):
    """Run the configured experiment; returns ``(result, traces)``."""
    return RUNNERS[cfg.kind](cfg)


# --------------------------------------------------------------------------- output

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.10g}"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else _fmt(v)
    return obj


def long_format(result: ExperimentResult) -> str:
    rows = []
    for name, col in result.columns.items():
        err = result.stderr.get(name)
        for i, x in enumerate(result.x):
            rows.append([x, name, col[i], err[i] if err is not None else math.nan])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([result.x_name, "series", "value", "stderr"])
    for x, name, v, e in rows:
        w.writerow([_fmt(x), name, _fmt(v), _fmt(e)])
    return buf.getvalue()


def metadata(cfg: RunConfig, result: ExperimentResult) -> dict:
    return _jsonable({
        "experiment": cfg.kind,
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "versions": {"jbasim": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "summary": result.summary,
        "fits": {k: {"model": f.model, "params": f.params, "stderr": f.stderr,
                     "converged": f.converged, "flags": list(f.flags)}
                 for k, f in result.fits.items()},
        "protocol": result.metadata,
    })


def write_outputs(out: Path, cfg: RunConfig, result: ExperimentResult, traces: dict,
                  summary_text: str) -> list:
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "results.csv": _csv(*result.table()),
        "results_long.csv": long_format(result),
        "metadata.json": json.dumps(metadata(cfg, result), indent=2, sort_keys=True) + "\n",
        "summary.txt": summary_text,
    }
    written = []
    for name, text in files.items():
        (out / name).write_text(text)
        written.append(out / name)
    if traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for name, (t, I, Q) in traces.items():
            path = tdir / f"{name}.csv"
            path.write_text(_csv(["t_ns", "I", "Q"], zip(t, I, Q)))
            written.append(path)
    return written


def _pm(value, err, digits=4) -> str:
    if err is None or not math.isfinite(err):
        return f"{value:.{digits}f}"
    return f"{value:.{digits}f} ± {err:.{digits}f}"


def emit_summary(result: ExperimentResult | None) -> tuple[str, bool]:
    """Headline numbers with fixed formatting; ``ok`` is False for an empty result."""
    if result is None or len(result.x) == 0 or not result.columns:
        return "no data\n", False
    s = result.summary
    lines = [f"experiment: {result.protocol} ({len(result.x)} points)"]
    kind = result.protocol
    if kind == "scurve":
        lines.append(f"contrast(0→1) = {_pm(s['contrast_01'], s.get('contrast_01_err'))}, "
                     f"contrast(0→2) = {_pm(s['contrast_02'], s.get('contrast_02_err'))}")
    elif kind == "rabi":
        lines.append(f"visibility = {_pm(s['visibility'], s['visibility_err'])}")
        lines.append(f"decay = {_pm(s['decay_us'], s['decay_err_us'])} us")
        lines.append(f"frequency = {s['frequency_MHz']:.4f} MHz")
    elif kind == "ramsey":
        lines.append(f"T2 = {_pm(s['T2_us'], s['T2_err_us'])} us")
        lines.append(f"fringe = {_pm(s['fringe_MHz'], s['fringe_err_MHz'])} MHz")
    elif kind == "t1":
        for key in sorted(k for k in s if k.startswith("T1_us")):
            tag = key[len("T1_us"):]
            lines.append(f"T1{tag} = {_pm(s[key], s.get('T1_err_us' + tag))} us")
    elif kind == "two_readout":
        for name in ("R1", "R2", "R3"):
            lines.append(f"visibility {name} = "
                         f"{_pm(s[f'visibility_{name}'], s[f'visibility_{name}_err'])}")
    elif kind == "ac_stark":
        if s:
            lines.append(f"bifurcation at P = {s['P_jump_dB']:.4f} dB: "
                         f"nbar {s['nbar_below']:.4f} -> {s['nbar_above']:.4f}")
        else:
            lines.append("no bifurcation inside the power grid")
    elif kind == "sweep_detuning":
        if s:
            lines.append(f"max contrast = {s['max_contrast']:.4f} "
                         f"at delta = {s['delta_at_max']:.4f} GHz")
        n_bad = int(np.sum(result.columns["ok"] == 0))
        if n_bad:
            lines.append(f"failed points: {n_bad}")
    elif kind == "shot_trace":
        c = result.columns
        for k in range(len(result.x)):
            t_b = c["bifurcation_time_ns"][k]
            lines.append(f"shot {k}: prepared={int(c['prepared'][k])} "
                         f"bifurcated={'yes' if c['bifurcated'][k] else 'no'} "
                         f"t_B={'-' if math.isnan(t_b) else f'{t_b:.4f}'} ns "
                         f"classified={'B' if c['classified_B'][k] else 'Bbar'} "
                         f"margin={c['margin'][k]:.4f}")
    return "\n".join(lines) + "\n", True


# --------------------------------------------------------------------------- entry point

def _resolve(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        bundled = bundled_configs()
        if path in bundled:
            return Path(str(bundled[path]))
    return p


def _cmd_run(args) -> int:
    try:
        cfg = load_config(_resolve(args.config)).with_overrides(seed=args.seed,
                                                               output_dir=args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result, traces = dispatch(cfg)
    except SimulationError as exc:
        print(f"error: {cfg.kind} failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    text, ok = emit_summary(result)
    try:
        write_outputs(Path(cfg.output_dir), cfg, result, traces, text)
    except OSError as exc:
        print(f"error: cannot write {exc.filename or cfg.output_dir}: {exc.strerror}",
              file=sys.stderr)
        return EXIT_IO
    sys.stdout.write(text)
    failures = result.metadata.get("failures") or {}
    for delta, msg in failures.items():
        print(f"error: point delta={delta} failed: {msg}", file=sys.stderr)
    return EXIT_OK if ok and not failures else EXIT_FAILED


def _cmd_validate(args) -> int:
    try:
        cfg = load_config(_resolve(args.config))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"valid: experiment={cfg.kind} seed={cfg.seed} hash={cfg.digest()[:12]}")
    return EXIT_OK


def _cmd_list(args) -> int:
    width = max(map(len, EXPERIMENTS))
    for name, text in EXPERIMENTS.items():
        print(f"{name:<{width}}  {text}")
    bundled = bundled_configs()
    if bundled:
        print("\nbundled configs: " + ", ".join(bundled))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config", help="JSON config path or bundled config name")
    run.add_argument("--seed", type=int, default=None, help="override the master seed")
    run.add_argument("--out", default=None, help="override the output directory")
    run.set_defaults(func=_cmd_run)
    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("config")
    val.set_defaults(func=_cmd_validate)
    lst = sub.add_parser("list-experiments", help="list experiment types")
    lst.set_defaults(func=_cmd_list)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
