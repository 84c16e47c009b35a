from .params import (
    LiftedParams,
    ParamVector,
    build_params,
    lift,
    load_checkpoint,
    perturb_params,
    save_checkpoint,
)
from .toy import Toy, ToyModel, toy_log_joint, toy_log_marginal, toy_optimal_inference
from .vae import Vae

__all__ = [
    "LiftedParams",
    "ParamVector",
    "build_params",
    "lift",
    "load_checkpoint",
    "perturb_params",
    "save_checkpoint",
    "Toy",
    "ToyModel",
    "toy_log_joint",
    "toy_log_marginal",
    "toy_optimal_inference",
    "Vae",
]
