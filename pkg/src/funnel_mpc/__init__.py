"""Robust funnel MPC: a barrier-cost model predictive controller on a
surrogate model combined with model-free funnel feedback on the plant."""

from .config import ScenarioConfig, build_scenario, load_config
from .controller import (
    FunnelControllerConfig,
    LoopConfig,
    TrajectoryLog,
    funnel_control,
    run_funnel_control,
    run_robust_fmpc,
)
from .errors import FunnelMPCError
from .model import (
    ControlAffineModel,
    InitializationStrategy,
    InitVariant,
    linear_model,
    proper_init,
)
from .ocp import OcpConfig, StageCostParams, solve_ocp
from .plant import Plant, ReactorParams, reactor_linearization, reactor_plant
from .signals import funnel_exp, ramp_reference, relu_activation, standard_gains

__all__ = [
    "ControlAffineModel",
    "FunnelControllerConfig",
    "FunnelMPCError",
    "InitVariant",
    "InitializationStrategy",
    "LoopConfig",
    "OcpConfig",
    "Plant",
    "ReactorParams",
    "ScenarioConfig",
    "StageCostParams",
    "TrajectoryLog",
    "build_scenario",
    "funnel_control",
    "funnel_exp",
    "linear_model",
    "load_config",
    "proper_init",
    "ramp_reference",
    "reactor_linearization",
    "reactor_plant",
    "relu_activation",
    "run_funnel_control",
    "run_robust_fmpc",
    "solve_ocp",
    "standard_gains",
]
