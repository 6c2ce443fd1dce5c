from .conjugate import ConjugateConfig, conjugate_toy
from .furseal import (
    FurSealData,
    FurSealFixture,
    FurSealParams,
    NConditional,
    alpha_model,
    beta_params,
    furseal_conditional_N,
    furseal_conditional_alpha,
    furseal_log_joint,
    n_model,
    simulate_furseal,
    u1_model,
)
from .spatial import (
    KrigingResult,
    SpatialConfig,
    collapsed_log_posterior,
    gp_log_posterior,
    joint_log_density_nu,
    kriging_conditional,
    matern,
    matern_cov,
    simulate_spatial,
    spatial_model,
)

__all__ = [
    "ConjugateConfig",
    "conjugate_toy",
    "FurSealData",
    "FurSealFixture",
    "FurSealParams",
    "NConditional",
    "alpha_model",
    "beta_params",
    "furseal_conditional_N",
    "furseal_conditional_alpha",
    "furseal_log_joint",
    "n_model",
    "simulate_furseal",
    "u1_model",
    "KrigingResult",
    "SpatialConfig",
    "collapsed_log_posterior",
    "gp_log_posterior",
    "joint_log_density_nu",
    "kriging_conditional",
    "matern",
    "matern_cov",
    "simulate_spatial",
    "spatial_model",
]
