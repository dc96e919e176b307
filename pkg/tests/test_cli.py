import json
import re

import numpy as np
import pytest

from jbasim.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_IO, EXIT_OK, emit_summary, main
from jbasim.config import bundled_configs, load_config, parse_config
from jbasim.device import DeviceParams
from jbasim.errors import ConfigError
from jbasim.protocols import ExperimentResult, FitResult

DEFAULT_DEVICE = {"f_C": 6.4535, "Q0": 685, "g": 0.044, "E_J_max": 21.0, "E_c": 1.2,
                "T1_int": 0.7, "A_flux": 2e-5, "T_N": 3.0, "atten_dB": -77.0}


def small(experiment, **top):
    return {"seed": 7, "shots": 200, "device": dict(DEFAULT_DEVICE),
            "readout": {"P_S_dB": -41.1}, "experiment": experiment, **top}


def write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def pointer_of(data):
    with pytest.raises(ConfigError) as exc:
        parse_config(data)
    return exc.value.pointer


# --------------------------------------------------------------------------- config

def test_default_device_block_valid():
    cfg = parse_config(small({"type": "scurve"}))
    assert cfg.device == DeviceParams(**DEFAULT_DEVICE)


@pytest.mark.parametrize("mutate,pointer", [
    (lambda d: d.pop("seed"), "/seed"),
    (lambda d: d.pop("experiment"), "/experiment"),
    (lambda d: d["device"].update(Q0=-5), "/device/Q0"),
    (lambda d: d["device"].update(Qo=5), "/device/Qo"),
    (lambda d: d["readout"].update(t_S=250), "/readout/t_S"),
    (lambda d: d["experiment"].update(P_gird=[1, 2]), "/experiment/P_gird"),
    (lambda d: d.update(extra=1), "/extra"),
    (lambda d: d["experiment"].update(type="nope"), "/experiment/type"),
    (lambda d: d["experiment"].update(P_grid=[-40, -41]), "/experiment/P_grid"),
    (lambda d: d["device"].update(E_J_max=1.0), "/device/E_J_max"),
])
def test_schema_pointers(mutate, pointer):
    data = small({"type": "scurve"})
    mutate(data)
    assert pointer_of(data) == pointer


def test_unknown_key_in_nested_grid():
    data = small({"type": "scurve", "P_grid": {"start": -42, "stop": -40, "num": 3, "step": 1}})
    assert pointer_of(data).startswith("/experiment/P_grid")


def test_error_names_field():
    data = small({"type": "scurve"})
    data["device"]["Q0"] = -5
    with pytest.raises(ConfigError) as exc:
        parse_config(data)
    assert "Q0" in str(exc.value)


@pytest.mark.parametrize("name", sorted(bundled_configs()))
def test_bundled_config_round_trip(name):
    cfg = load_config(bundled_configs()[name])
    again = parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_overrides_change_digest():
    cfg = parse_config(small({"type": "scurve"}))
    assert cfg.with_overrides(seed=8).seed == 8
    assert cfg.with_overrides(seed=8).digest() != cfg.digest()


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    with pytest.raises(ConfigError) as exc:
        load_config(bad)
    assert "line 1" in str(exc.value)


# --------------------------------------------------------------------------- commands

def test_validate_and_list(tmp_path, capsys):
    assert main(["validate", str(write(tmp_path, small({"type": "scurve"})))]) == EXIT_OK
    assert main(["validate", "paper-defaults"]) == EXIT_OK
    assert main(["list-experiments"]) == EXIT_OK
    out = capsys.readouterr().out
    for kind in ("scurve", "rabi", "ramsey", "t1", "two_readout", "ac_stark",
                 "sweep_detuning", "shot_trace"):
        assert kind in out


def test_invalid_config_exit_code(tmp_path, capsys):
    data = small({"type": "scurve"})
    del data["seed"]
    assert main(["run", str(write(tmp_path, data))]) == EXIT_CONFIG
    assert "/seed" in capsys.readouterr().err


def test_io_error_exit_code(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write(tmp_path, small({"type": "scurve", "P_grid": [-41.0, -40.0]}))
    assert main(["run", str(cfg), "--out", str(blocker / "sub")]) == EXIT_IO
    assert str(blocker) in capsys.readouterr().err


def test_scurve_outputs_and_determinism(tmp_path, monkeypatch):
    data = small({"type": "scurve", "P_grid": {"start": -42, "stop": -40, "num": 5}})
    cfg = write(tmp_path, data)
    names = ("results.csv", "results_long.csv", "metadata.json", "summary.txt")
    assert main(["run", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    first = {n: (tmp_path / "a" / n).read_bytes() for n in names}
    monkeypatch.setenv("JBASIM_THREADS", "3")
    assert main(["run", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == first[n]
    header = (tmp_path / "a" / "results.csv").read_text().splitlines()[0].split(",")
    assert header == ["P_dB", "pB_state0", "pB_state1", "pB_state2", "stderr_pB_state0",
                      "stderr_pB_state1", "stderr_pB_state2"]
    meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
    assert meta["seed"] == 7 and len(meta["config_hash"]) == 64
    assert {"numpy", "scipy", "jbasim", "python"} <= set(meta["versions"])
    # the recorded config reproduces the run
    rerun = write(tmp_path, {**meta["config"], "output_dir": str(tmp_path / "c")}, "rerun.json")
    assert main(["run", str(rerun)]) == EXIT_OK
    assert (tmp_path / "c" / "results.csv").read_bytes() == \
        (tmp_path / "a" / "results.csv").read_bytes()


def test_seed_override(tmp_path):
    cfg = write(tmp_path, small({"type": "scurve", "P_grid": [-40.5, -40.0, -39.5]}))
    main(["run", str(cfg), "--out", str(tmp_path / "a")])
    main(["run", str(cfg), "--out", str(tmp_path / "b"), "--seed", "8"])
    assert (tmp_path / "a" / "results.csv").read_text() != \
        (tmp_path / "b" / "results.csv").read_text()


def test_shot_trace_outputs(tmp_path):
    cfg = write(tmp_path, small({"type": "shot_trace", "states": [0, 1]}))
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    traces = sorted((tmp_path / "o" / "traces").glob("*.csv"))
    assert [p.name for p in traces] == ["shot_000.csv", "shot_001.csv"]
    rows = traces[0].read_text().splitlines()
    assert rows[0] == "t_ns,I,Q" and len(rows) > 1000


def test_failed_sweep_point_exit_code(tmp_path, capsys):
    data = small({"type": "sweep_detuning", "deltas": [0.001, 0.38], "shift_shots": 200})
    data["readout"] = {}
    cfg = write(tmp_path, data)
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_FAILED
    assert "delta=0.001" in capsys.readouterr().err
    assert (tmp_path / "o" / "results.csv").exists()


# --------------------------------------------------------------------------- summaries

def _fit(**params):
    return FitResult(params, {k: 0.01 for k in params}, 0.0, True, "x")


def test_summary_rabi_format():
    r = ExperimentResult("rabi", "dt_ns", [0, 1], {"p_B": np.zeros(2)}, {}, {},
                         {"visibility": 0.9456, "visibility_err": 0.0123, "decay_us": 0.5,
                          "decay_err_us": 0.05, "frequency_MHz": 29.0})
    text, ok = emit_summary(r)
    assert ok
    assert re.search(r"^visibility = 0\.9456 ± 0\.0123$", text, re.M)


def test_summary_scurve_format():
    r = ExperimentResult("scurve", "P_dB", [0], {"pB_state0": np.zeros(1)}, {}, {},
                         {"contrast_01": 0.86, "contrast_02": 0.92, "contrast_01_err": 0.001,
                          "contrast_02_err": 0.002})
    text, _ = emit_summary(r)
    assert "contrast(0→1) = 0.8600 ± 0.0010, contrast(0→2) = 0.9200 ± 0.0020" in text


def test_summary_empty():
    text, ok = emit_summary(ExperimentResult("rabi", "dt_ns", [], {}))
    assert text.strip() == "no data" and not ok
    assert emit_summary(None) == ("no data\n", False)
