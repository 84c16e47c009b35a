from .gradients import (
    DESCENT_IDS,
    ESTIMATOR_IDS,
    GradEstimate,
    decompose_total_derivative,
    dreg_alpha_phi_grad,
    iwae_grad_dreg,
    iwae_grad_standard,
    iwae_grad_stl,
    jvi1_dreg_grad,
    jvi1_grad,
    phi_rows,
    rws_dreg_phi_grad,
    rws_theta_grad,
    rws_wake_phi_grad,
    theta_rows,
)
from .surrogates import SURROGATE_KINDS, SurrogateLoss, surrogate_gradient_split, surrogate_loss
from .weights import (
    LogWeightBatch,
    iwae_bound,
    jvi1_coefficients,
    jvi1_estimate,
    log_weights,
    loo_logsumexp,
    normalized_log_weights,
    normalized_weights,
    squared_normalized_weights,
)

__all__ = [
    "DESCENT_IDS",
    "ESTIMATOR_IDS",
    "GradEstimate",
    "LogWeightBatch",
    "SURROGATE_KINDS",
    "SurrogateLoss",
    "decompose_total_derivative",
    "dreg_alpha_phi_grad",
    "iwae_bound",
    "iwae_grad_dreg",
    "iwae_grad_standard",
    "iwae_grad_stl",
    "jvi1_coefficients",
    "jvi1_dreg_grad",
    "jvi1_estimate",
    "jvi1_grad",
    "log_weights",
    "loo_logsumexp",
    "normalized_log_weights",
    "normalized_weights",
    "phi_rows",
    "rws_dreg_phi_grad",
    "rws_theta_grad",
    "rws_wake_phi_grad",
    "squared_normalized_weights",
    "surrogate_gradient_split",
    "surrogate_loss",
    "theta_rows",
]
