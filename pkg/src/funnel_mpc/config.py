"""Scenario configuration: TOML schema, defaults and construction of the
simulation objects for the reactor case study.

Schema (every key optional; unknown keys are rejected)::

    scenario = "case3"            # case1 | case2 | case3 | custom
    output_dir = "out"

    [mpc]
    delta = 0.05                  # time shift between OCP solves
    horizon_T = 0.75
    input_bound_M = 600.0
    lambda_u = 1e-4
    control_intervals = 15        # default: round(horizon_T / delta)
    integration_substeps = 10
    max_iterations = 200
    gradient_tolerance = 1e-6
    gradient = "auto"             # auto | exact | fd

    [funnel]                      # psi(t) = a exp(-decay t) + c
    a = 20.0
    decay = 2.0
    c = 4.0

    [reference]                   # ramp from y_start to y_final over [0, t_final]
    y_start = 270.0
    y_final = 337.1
    t_final = 2.0

    [controller]
    s_crit = 0.5
    phi_floor = 1e-9
    definite_gains = true         # N(s) = -s; false selects N(s) = s sin(s)
    fc_enabled = true             # custom scenario only
    init_strategy = "open_loop"   # custom scenario only
    xi = 0.0

    [reactor]
    b = 209.2
    c1 = -1.0
    c2 = 1.0
    d = 1.1
    q = 1.25
    ln_k0 = 25.0                  # or k0 = <value>
    k1 = 8700.0
    x1_in = 1.0
    x2_in = 0.0
    y_bar = 337.1                 # linearization temperature of the model

    [initial]
    plant = [270.0, 0.02, 0.9]
    model = [270.0, 0.02, 0.9]

    [simulation]
    sim_step = 1e-4
    t_end = 4.0
    log_interval = 1e-3
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import tomli

from .controller import FunnelControllerConfig, LoopConfig
from .errors import ConfigError
from .model import InitializationStrategy, InitVariant, linear_model
from .ocp import OcpConfig, StageCostParams
from .plant import ReactorParams, reactor_linearization, reactor_plant
from .signals import funnel_exp, ramp_reference, relu_activation, standard_gains

SCENARIOS = ("case1", "case2", "case3", "custom")

_SCENARIO_MODES = {
    "case1": (False, InitVariant.OPEN_LOOP),
    "case2": (True, InitVariant.OPEN_LOOP),
    "case3": (True, InitVariant.OUTPUT_RESET_KEEP_INTERNAL),
}


@dataclass
class ScenarioConfig:
    scenario: str = "case3"
    output_dir: str = "out"
    # mpc
    delta: float = 0.05
    horizon_T: float = 0.75
    input_bound_M: float = 600.0
    lambda_u: float = 1e-4
    control_intervals: Optional[int] = None
    integration_substeps: int = 10
    max_iterations: int = 200
    gradient_tolerance: float = 1e-6
    gradient: str = "auto"
    # funnel and reference
    funnel_a: float = 20.0
    funnel_decay: float = 2.0
    funnel_c: float = 4.0
    y_ref_start: float = 270.0
    y_ref_final: float = 337.1
    t_final: float = 2.0
    # funnel controller
    s_crit: float = 0.5
    phi_floor: float = 1e-9
    definite_gains: bool = True
    fc_enabled: bool = True
    init_strategy: str = "open_loop"
    xi: float = 0.0
    # reactor
    b: float = 209.2
    c1: float = -1.0
    c2: float = 1.0
    d: float = 1.1
    q: float = 1.25
    k0: float = math.exp(25.0)
    k1: float = 8700.0
    x1_in: float = 1.0
    x2_in: float = 0.0
    y_bar: float = 337.1
    plant_initial: list = field(default_factory=lambda: [270.0, 0.02, 0.9])
    model_initial: list = field(default_factory=lambda: [270.0, 0.02, 0.9])
    # simulation
    sim_step: float = 1e-4
    t_end: float = 4.0
    log_interval: float = 1e-3
    seed: Optional[int] = None

    @property
    def n_control_intervals(self) -> int:
        if self.control_intervals is not None:
            return self.control_intervals
        return max(1, round(self.horizon_T / self.delta))

    def reactor_params(self) -> ReactorParams:
        return ReactorParams(
            b=self.b, c1=self.c1, c2=self.c2, d=self.d, q=self.q, k0=self.k0, k1=self.k1,
            x1_in=self.x1_in, x2_in=self.x2_in,
        )


# TOML section -> {toml key: dataclass field}
_SECTIONS = {
    "mpc": {
        "delta": "delta", "horizon_T": "horizon_T", "input_bound_M": "input_bound_M",
        "lambda_u": "lambda_u", "control_intervals": "control_intervals",
        "integration_substeps": "integration_substeps", "max_iterations": "max_iterations",
        "gradient_tolerance": "gradient_tolerance", "gradient": "gradient",
    },
    "funnel": {"a": "funnel_a", "decay": "funnel_decay", "c": "funnel_c"},
    "reference": {"y_start": "y_ref_start", "y_final": "y_ref_final", "t_final": "t_final"},
    "controller": {
        "s_crit": "s_crit", "phi_floor": "phi_floor", "definite_gains": "definite_gains",
        "fc_enabled": "fc_enabled", "init_strategy": "init_strategy", "xi": "xi",
    },
    "reactor": {
        "b": "b", "c1": "c1", "c2": "c2", "d": "d", "q": "q", "k0": "k0", "ln_k0": "ln_k0",
        "k1": "k1", "x1_in": "x1_in", "x2_in": "x2_in", "y_bar": "y_bar",
    },
    "initial": {"plant": "plant_initial", "model": "model_initial"},
    "simulation": {"sim_step": "sim_step", "t_end": "t_end", "log_interval": "log_interval"},
}
_TOP_LEVEL = {"scenario": "scenario", "output_dir": "output_dir", "seed": "seed"}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ScenarioConfig)}


def _coerce(name: str, value, where: str):
    kind = _FIELD_TYPES.get(name, "float")
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean", field=where)
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string", field=where)
        return value
    if kind == "list":
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{where}: expected a list of numbers", field=where)
        return [float(v) for v in value]
    if kind in ("int", "Optional[int]"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer", field=where)
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number", field=where)
    return float(value)


def config_from_mapping(data: dict) -> ScenarioConfig:
    """Build and validate a :class:`ScenarioConfig` from parsed TOML."""
    values = {}
    for key, value in data.items():
        if key in _TOP_LEVEL:
            values[_TOP_LEVEL[key]] = _coerce(_TOP_LEVEL[key], value, key)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table", field=key)
            table = _SECTIONS[key]
            for sub, sub_value in value.items():
                where = f"{key}.{sub}"
                if sub not in table:
                    raise ConfigError(f"unknown key {where}", field=where)
                if sub == "ln_k0":
                    values["k0"] = math.exp(_coerce("k0", sub_value, where))
                else:
                    values[table[sub]] = _coerce(table[sub], sub_value, where)
        else:
            raise ConfigError(f"unknown key {key}", field=key)
    if "ln_k0" in data.get("reactor", {}) and "k0" in data.get("reactor", {}):
        raise ConfigError("reactor.k0 and reactor.ln_k0 are mutually exclusive", field="reactor.k0")
    cfg = ScenarioConfig(**values)
    validate(cfg, explicit=values)
    return cfg


def validate(cfg: ScenarioConfig, explicit: dict | None = None) -> None:
    """Check invariants; raise :class:`ConfigError` naming the offending field."""
    explicit = explicit or {}
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {', '.join(SCENARIOS)}", field="scenario")
    if cfg.scenario in _SCENARIO_MODES:
        fc, variant = _SCENARIO_MODES[cfg.scenario]
        if "fc_enabled" in explicit and explicit["fc_enabled"] != fc:
            raise ConfigError(
                f"controller.fc_enabled conflicts with scenario {cfg.scenario}", field="fc_enabled"
            )
        if "init_strategy" in explicit and InitVariant(explicit["init_strategy"]) is not variant:
            raise ConfigError(
                f"controller.init_strategy conflicts with scenario {cfg.scenario}",
                field="init_strategy",
            )
    try:
        InitVariant(cfg.init_strategy)
    except ValueError:
        raise ConfigError(
            "init_strategy must be one of " + ", ".join(v.value for v in InitVariant),
            field="init_strategy",
        ) from None
    positive = (
        "delta", "horizon_T", "input_bound_M", "sim_step", "t_final", "funnel_c", "phi_floor",
        "gradient_tolerance", "log_interval",
    )
    for name in positive:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive", field=name)
    for name in ("lambda_u", "funnel_a", "funnel_decay", "xi", "t_end"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be nonnegative", field=name)
    if cfg.horizon_T < cfg.delta:
        raise ConfigError("horizon_T < delta", field="horizon_T")
    if cfg.sim_step > cfg.delta:
        raise ConfigError("sim_step > delta", field="sim_step")
    if not 0 < cfg.s_crit < 1:
        raise ConfigError("s_crit must lie in (0, 1)", field="s_crit")
    if cfg.n_control_intervals < 1 or cfg.integration_substeps < 1 or cfg.max_iterations < 1:
        raise ConfigError("iteration and interval counts must be positive", field="control_intervals")
    if cfg.gradient not in ("auto", "exact", "fd"):
        raise ConfigError("gradient must be auto, exact or fd", field="gradient")
    for name in ("plant_initial", "model_initial"):
        if len(getattr(cfg, name)) != 3:
            raise ConfigError(f"{name} must have three components", field=name)
    if cfg.plant_initial[0] <= 0:
        raise ConfigError("initial plant temperature must be positive", field="plant_initial")
    for name in ("b", "d", "q", "k0", "k1"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"reactor parameter {name} must be positive", field=name)


def load_config(path, scenario: str | None = None) -> ScenarioConfig:
    """Read a TOML scenario file; ``scenario`` overrides the file's value."""
    path = Path(path)
    try:
        data = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if scenario is not None:
        data["scenario"] = scenario
    return config_from_mapping(data)


def scenario_modes(cfg: ScenarioConfig):
    """``(fc_enabled, InitializationStrategy)`` implied by the scenario."""
    if cfg.scenario in _SCENARIO_MODES:
        fc, variant = _SCENARIO_MODES[cfg.scenario]
    else:
        fc, variant = cfg.fc_enabled, InitVariant(cfg.init_strategy)
    return fc, InitializationStrategy(variant, cfg.xi)


@dataclass
class Scenario:
    """Everything :func:`run_robust_fmpc` needs for one run."""

    plant: object
    model: object
    funnel: object
    reference: object
    params: StageCostParams
    fc: FunnelControllerConfig
    loop: LoopConfig


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    params = cfg.reactor_params()
    A, B, C, offset = reactor_linearization(params, cfg.y_bar)
    model = linear_model(A, B, C, offset)
    psi = funnel_exp(cfg.funnel_a, cfg.funnel_decay, cfg.funnel_c)
    y_ref = ramp_reference([cfg.y_ref_start], [cfg.y_ref_final], cfg.t_final)
    fc_enabled, strategy = scenario_modes(cfg)
    ocp = OcpConfig(
        horizon_T=cfg.horizon_T,
        control_intervals=cfg.n_control_intervals,
        input_bound_M=cfg.input_bound_M,
        integration_substeps=cfg.integration_substeps,
        max_iterations=cfg.max_iterations,
        gradient_tolerance=cfg.gradient_tolerance,
        gradient=cfg.gradient,
    )
    loop = LoopConfig(
        delta=cfg.delta,
        ocp=ocp,
        init_strategy=strategy,
        sim_step=cfg.sim_step,
        t_end=cfg.t_end,
        fc_enabled=fc_enabled,
        model_x0=list(cfg.model_initial),
        log_interval=cfg.log_interval,
    )
    fc = FunnelControllerConfig(
        gains=standard_gains(cfg.definite_gains),
        activation=relu_activation(cfg.s_crit),
        phi_floor=cfg.phi_floor,
    )
    return Scenario(
        plant=reactor_plant(params, cfg.plant_initial),
        model=model,
        funnel=psi,
        reference=y_ref,
        params=StageCostParams(cfg.lambda_u, psi, y_ref),
        fc=fc,
        loop=loop,
    )
