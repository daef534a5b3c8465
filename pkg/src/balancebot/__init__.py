"""Learning-based control for underactuated balance robots.

Modules:
    gp          exact Gaussian-process regression with derivative outputs
    dynamics    analytic pendulum and autonomous-bicycle models
    stabilizer  GP inverse-dynamics balance control with a robust term
    planner     uncertainty-aware model predictive trajectory planning
    harness     data collection, trials, sweeps, and bound verification
    cli         command-line pipeline entry point
"""

from .dynamics import (
    BalanceDomainError,
    BikebotParams,
    BikebotPlant,
    CapsizeError,
    ControlInput,
    NoiseConfig,
    PendulumParams,
    PendulumPlant,
    StatePartition,
    step,
)
from .gp import GpModel, MultiGp, SeHyperparams, fit, fit_hyperparams
from .planner import (
    GpInputMap,
    MpcConfig,
    Planner,
    default_bikebot_config,
    default_pendulum_config,
)
from .stabilizer import BemSolver, build_gains, eic_control, gp_inverse_control

__version__ = "0.1.0"

__all__ = [
    "BalanceDomainError",
    "BikebotParams",
    "BikebotPlant",
    "CapsizeError",
    "ControlInput",
    "NoiseConfig",
    "PendulumParams",
    "PendulumPlant",
    "StatePartition",
    "step",
    "GpModel",
    "MultiGp",
    "SeHyperparams",
    "fit",
    "fit_hyperparams",
    "GpInputMap",
    "MpcConfig",
    "Planner",
    "default_bikebot_config",
    "default_pendulum_config",
    "BemSolver",
    "build_gains",
    "eic_control",
    "gp_inverse_control",
    "__version__",
]
