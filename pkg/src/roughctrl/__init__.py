"""Relaxed optimal control of rough differential equations."""
from .catalog import CATALOG, make_driver, make_problem, named_seed
from .dynamics import adjoint, grad_value, integrate_rde, jacobian, noise_flow, reward
from .errors import (ConfigError, DivergenceError, InvalidInput, InversionError, MonotonicityError, RoughCtrlError,
                     UnsupportedRegularity)
from .measures import ActionGrid, DiscreteMeasure, RelaxedControl, SpikeConfig
from .problem import EntropicSpec, ProblemSpec
from .rough import RoughPath, TimeGrid, lift_fbm, lift_smooth

__all__ = [
    "CATALOG", "make_driver", "make_problem", "named_seed",
    "adjoint", "grad_value", "integrate_rde", "jacobian", "noise_flow", "reward",
    "ConfigError", "DivergenceError", "InvalidInput", "InversionError", "MonotonicityError", "RoughCtrlError",
    "UnsupportedRegularity",
    "ActionGrid", "DiscreteMeasure", "RelaxedControl", "SpikeConfig",
    "EntropicSpec", "ProblemSpec",
    "RoughPath", "TimeGrid", "lift_fbm", "lift_smooth",
]
