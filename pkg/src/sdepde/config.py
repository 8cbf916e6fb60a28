"""Scenario configuration: JSON parsing with a published schema, presets, and
construction of runtime objects (parameters, controllers, weights).

Profile functions are specified as ``{"constant": c}`` or
``{"table": [[x, v], ...]}`` with linear interpolation, so a configuration is
fully serializable; unknown keys are rejected by the schema.
"""

from __future__ import annotations

import copy
import importlib.resources
import json
from dataclasses import asdict, dataclass
from typing import Callable

import jsonschema
import numpy as np

from .control import (Controller, FeedbackController, LqController, LqWeights,
                      OpenLoopController, ScriptedController, solve_riccati,
                      stabilizing_gain)
from .core import Profile, SystemParams, constant_profile, table_profile
from .kernels import KernelSet
from .gains import g_matrix, gamma_matrix
from scipy.linalg import expm

__all__ = [
    "ScenarioConfig",
    "ConfigError",
    "load_schema",
    "parse_config",
    "emit_config",
    "fig1_preset",
    "decoupled_preset",
    "PRESETS",
    "build_params",
    "build_controller_factory",
    "build_lq_weights",
]


class ConfigError(ValueError):
    """Configuration failed schema validation or is semantically invalid."""


def load_schema() -> dict:
    text = importlib.resources.files("sdepde").joinpath("schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario: five plain-data sections, equal iff their JSON is."""

    params: dict
    grid: dict
    controller: dict
    montecarlo: dict
    outputs: dict

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))


def parse_config(data) -> ScenarioConfig:
    """Validate a dict (or JSON string) against the schema and normalize."""
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    try:
        jsonschema.validate(data, load_schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"configuration rejected: {exc.message}") from exc
    data = copy.deepcopy(data)
    params = data["params"]
    params.setdefault("u0", {"constant": 0.0})
    params.setdefault("v0", {"constant": 0.0})
    data["grid"].setdefault("time_refine", 1)
    data["outputs"].setdefault("csv", ["report"])
    return ScenarioConfig(params=params, grid=data["grid"], controller=data["controller"],
                          montecarlo=data["montecarlo"], outputs=data["outputs"])


def emit_config(cfg: ScenarioConfig) -> str:
    """Serialize a configuration; ``parse_config(emit_config(c)) == c``."""
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def _profile(spec: dict) -> Profile:
    if "constant" in spec:
        return constant_profile(spec["constant"])
    return table_profile(spec["table"])


def build_params(cfg: ScenarioConfig) -> SystemParams:
    p = cfg.params
    sigma_profile = _profile(p["sigma"])
    try:
        return SystemParams(
            lam=p["lam"], mu=p["mu"],
            eta_plus=_profile(p["eta_plus"]), eta_minus=_profile(p["eta_minus"]),
            q=p["q"], rho=p["rho"],
            A=p["A"], B=p["B"], M=p["M"],
            sigma=lambda t: np.atleast_1d(sigma_profile(t)),
            X0=p["X0"], T=p["T"],
            u0=_profile(p["u0"]), v0=_profile(p["v0"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_lq_weights(cfg: ScenarioConfig, n: int) -> LqWeights | None:
    ctrl = cfg.controller
    if ctrl["kind"] == "lq_optimal":
        return LqWeights.constant(ctrl["qweight"], ctrl["rweight"], n)
    return None


def build_controller_factory(cfg: ScenarioConfig, params: SystemParams,
                             ks: KernelSet, grid) -> Callable[[], Controller]:
    """Zero-argument factory producing a fresh controller per ensemble batch."""
    ctrl = cfg.controller
    kind = ctrl["kind"]
    if kind == "open_loop":
        return OpenLoopController
    if kind == "scripted":
        prof = _profile(ctrl["signal"])
        return lambda: ScriptedController(prof)
    if kind == "stabilizing_feedback":
        K = stabilizing_gain(params.A, params.B, params.h, ctrl["poles"])
        return lambda: FeedbackController(K)
    if kind == "lq_optimal":
        weights = LqWeights.constant(ctrl["qweight"], ctrl["rweight"], params.n)
        Bbar = expm(-params.A * params.h) @ params.B
        lq = solve_riccati(
            weights, params.A, Bbar, params.T - params.h, grid.dt,
            g_fn=lambda u: g_matrix(params, ks, u),
            gamma_fn=lambda u: gamma_matrix(params, ks, u),
            h=params.h)
        return lambda: LqController(lq, params, ks)
    raise ConfigError(f"unknown controller kind {kind!r}")


def fig1_preset(n_paths: int = 10000, base_seed: int = 7, nx: int = 200,
                poles=(-1.0,)) -> ScenarioConfig:
    """Reference scenario: scalar unstable SDE behind the transport pair.

    A = 0.6, B = 1, sigma = 0.6, X0 = 2, mu = 2, lam = 1,
    eta+ = eta- = 0.3, M = rho = 1, q = 0.25.  Horizon T = 4, grid nx and the
    Monte Carlo sizes are toolkit choices.
    """
    return parse_config({
        "params": {
            "lam": 1.0, "mu": 2.0,
            "eta_plus": {"constant": 0.3}, "eta_minus": {"constant": 0.3},
            "q": 0.25, "rho": 1.0,
            "A": [[0.6]], "B": [[1.0]], "M": [[1.0]],
            "sigma": {"constant": 0.6},
            "X0": [2.0], "T": 4.0,
        },
        "grid": {"nx": nx},
        "controller": {"kind": "stabilizing_feedback", "poles": list(poles)},
        "montecarlo": {"n_paths": n_paths, "base_seed": base_seed},
        "outputs": {"directory": "."},
    })


def decoupled_preset(nx: int = 50) -> ScenarioConfig:
    """Trivially decoupled configuration (eta = 0, M = 0): the transport pair
    carries no feedback into the SDE, handy for smoke checks."""
    return parse_config({
        "params": {
            "lam": 1.0, "mu": 2.0,
            "eta_plus": {"constant": 0.0}, "eta_minus": {"constant": 0.0},
            "q": 0.25, "rho": 0.5,
            "A": [[-0.2]], "B": [[1.0]], "M": [[0.0]],
            "sigma": {"constant": 0.4},
            "X0": [1.0], "T": 3.0,
        },
        "grid": {"nx": nx},
        "controller": {"kind": "open_loop"},
        "montecarlo": {"n_paths": 256, "base_seed": 5},
        "outputs": {"directory": "."},
    })


PRESETS = {"fig1": fig1_preset, "decoupled": decoupled_preset}
