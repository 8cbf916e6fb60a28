import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdepde.cli import main
from sdepde.config import (ConfigError, decoupled_preset, emit_config,
                           fig1_preset, parse_config)


# ---------------------------------------------------------------------------
# configuration round trip and validation

def test_round_trip_fig1():
    cfg = fig1_preset()
    assert parse_config(emit_config(cfg)) == cfg


def test_round_trip_with_tables():
    cfg = parse_config({
        "params": {
            "lam": 1.0, "mu": 2.0,
            "eta_plus": {"table": [[0.0, 0.1], [1.0, 0.4]]},
            "eta_minus": {"constant": 0.2},
            "q": 0.3, "rho": 0.5,
            "A": [[0.1]], "B": [[1.0]], "M": [[0.5]],
            "sigma": {"table": [[0.0, 0.5], [4.0, 0.7]]},
            "X0": [1.0], "T": 4.0,
        },
        "grid": {"nx": 32},
        "controller": {"kind": "scripted", "signal": {"constant": 0.2}},
        "montecarlo": {"n_paths": 16, "base_seed": 3},
        "outputs": {"directory": "out", "csv": ["report", "trajectory"]},
    })
    assert parse_config(emit_config(cfg)) == cfg


@settings(max_examples=25, deadline=None)
@given(q=st.floats(0.05, 0.9), rho=st.floats(-0.9, 0.9),
       seed=st.integers(0, 2 ** 31), nx=st.integers(8, 64))
def test_round_trip_random_constants(q, rho, seed, nx):
    base = fig1_preset().to_dict()
    base["params"]["q"] = q
    base["params"]["rho"] = rho
    base["montecarlo"]["base_seed"] = seed
    base["grid"]["nx"] = nx
    cfg = parse_config(base)
    assert parse_config(emit_config(cfg)) == cfg


def test_unknown_keys_rejected():
    raw = fig1_preset().to_dict()
    raw["params"]["bogus"] = 1.0
    with pytest.raises(ConfigError):
        parse_config(raw)
    raw = fig1_preset().to_dict()
    raw["extra_section"] = {}
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_missing_required_rejected():
    raw = fig1_preset().to_dict()
    del raw["params"]["q"]
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_bad_controller_rejected():
    raw = fig1_preset().to_dict()
    raw["controller"] = {"kind": "stabilizing_feedback"}  # poles missing
    with pytest.raises(ConfigError):
        parse_config(raw)
    raw["controller"] = {"kind": "magic"}
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_semantic_validation_via_build():
    from sdepde.config import build_params
    raw = fig1_preset().to_dict()
    raw["params"]["rho"] = 8.0  # |rho q| >= 1
    with pytest.raises(ConfigError):
        build_params(parse_config(raw))


# ---------------------------------------------------------------------------
# subcommands

def test_kernels_subcommand(tmp_path):
    rc = main(["kernels", "--preset", "fig1", "--grid-nx", "16",
               "-o", str(tmp_path)])
    assert rc == 0
    gains = (tmp_path / "gains.csv").read_text().splitlines()
    header = gains[0].split(",")
    assert header == ["x", "gamma_alpha_1", "gamma_beta_1"]
    first = gains[1].split(",")
    assert float(first[1]) == -1.0  # gamma_alpha(0) = -M
    assert float(first[2]) == 0.0
    kern = (tmp_path / "kernels.csv").read_text().splitlines()
    assert kern[0] == "x,y,K_uu,K_uv,K_vu,K_vv"
    # triangle nodes only
    assert len(kern) == 1 + (16 + 1) * (16 + 2) // 2


def test_simulate_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        rc = main(["simulate", "--preset", "fig1", "--grid-nx", "16",
                   "--seed", "5", "--controller", "stabilizing_feedback",
                   "--poles", "-1", "-o", str(out)])
        assert rc == 0
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()


def test_simulate_fields_csv(tmp_path):
    rc = main(["simulate", "--preset", "decoupled", "--grid-nx", "16",
               "--fields", "-o", str(tmp_path)])
    assert rc == 0
    head = (tmp_path / "fields.csv").read_text().splitlines()[0]
    assert head == "t,x,u,v,alpha,beta"


def test_montecarlo_parallelism_bytes(tmp_path):
    outs = []
    for tag, workers in (("p1", "1"), ("p4", "4"), ("again", "1")):
        out = tmp_path / tag
        rc = main(["montecarlo", "--preset", "fig1", "--grid-nx", "16",
                   "--paths", "64", "--seed", "11", "--parallelism", workers,
                   "-o", str(out)])
        assert rc == 0
        outs.append((out / "report.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    summary = json.loads((tmp_path / "p1" / "summary.json").read_text())
    assert summary["n_paths"] == 64


def test_stabilize_and_lq_write_ensembles(tmp_path):
    rc = main(["stabilize", "--preset", "fig1", "--grid-nx", "16",
               "--paths", "32", "--seed", "2", "--poles", "-1.5",
               "-o", str(tmp_path / "st")])
    assert rc == 0
    head = (tmp_path / "st" / "ensemble.csv").read_text().splitlines()[0]
    assert head == "t,mean_X_1,var_X,v_min,cost_running"
    rc = main(["lq", "--preset", "fig1", "--grid-nx", "16", "--paths", "32",
               "--seed", "2", "--qweight", "1.0", "--rweight", "0.1",
               "-o", str(tmp_path / "lq")])
    assert rc == 0
    assert (tmp_path / "lq" / "summary.json").exists()


def test_csv_values_round_trip(tmp_path):
    rc = main(["montecarlo", "--preset", "decoupled", "--grid-nx", "16",
               "--paths", "16", "--seed", "4", "-o", str(tmp_path)])
    assert rc == 0
    data = np.genfromtxt(tmp_path / "report.csv", delimiter=",", names=True)
    # 17 significant digits survive parse/print round trip
    text = (tmp_path / "report.csv").read_text().splitlines()
    first_val = float(text[2].split(",")[1])
    assert first_val == data["mean_X_1"][1]


def test_check_quick_exit_zero():
    rc = main(["check", "--preset", "decoupled", "--quick"])
    assert rc == 0


def test_config_file_and_exit_codes(tmp_path):
    cfg_file = tmp_path / "scenario.json"
    cfg_file.write_text(emit_config(decoupled_preset(nx=16)))
    rc = main(["kernels", "--config", str(cfg_file), "-o", str(tmp_path)])
    assert rc == 0
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["kernels", "--config", str(bad), "-o", str(tmp_path)]) == 2
    missing = tmp_path / "missing.json"
    assert main(["kernels", "--config", str(missing), "-o", str(tmp_path)]) == 2
    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps({"params": {}}))
    assert main(["kernels", "--config", str(invalid), "-o", str(tmp_path)]) == 2


def test_outdir_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("SDEPDE_OUTDIR", str(tmp_path / "env_out"))
    rc = main(["kernels", "--preset", "decoupled", "--grid-nx", "16"])
    assert rc == 0
    assert (tmp_path / "env_out" / "kernels.csv").exists()
