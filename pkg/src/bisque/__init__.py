"""Bayesian integration via sparse quadrature with Gaussian weights."""

from .core import (
    BisqueJob,
    ConvergenceResult,
    DensityCurve,
    Factorization,
    HierarchicalModel,
    MixtureApprox,
    bisque_weights,
    converge,
    direct_marginal,
    interval_probability,
    marginal_density,
    posterior_expectation,
    posterior_variance,
)
from .exceptions import (
    BisqueError,
    CholeskyError,
    DegenerateMixtureError,
    IntegrationError,
    ModeNotFoundError,
    NonFiniteDensityError,
    TableExhaustedError,
    TransformDomainError,
    WeightConstructionError,
)
from .gaussian_weight import GaussianWeight, build_weight, find_mode, map_nodes
from .sparse_quad import CLASSICAL, NESTED, SparseGrid, integrate, sparse_grid
from .transform import Transform

__all__ = [
    "BisqueJob",
    "ConvergenceResult",
    "DensityCurve",
    "Factorization",
    "HierarchicalModel",
    "MixtureApprox",
    "bisque_weights",
    "converge",
    "direct_marginal",
    "interval_probability",
    "marginal_density",
    "posterior_expectation",
    "posterior_variance",
    "BisqueError",
    "CholeskyError",
    "DegenerateMixtureError",
    "IntegrationError",
    "ModeNotFoundError",
    "NonFiniteDensityError",
    "TableExhaustedError",
    "TransformDomainError",
    "WeightConstructionError",
    "GaussianWeight",
    "build_weight",
    "find_mode",
    "map_nodes",
    "CLASSICAL",
    "NESTED",
    "SparseGrid",
    "integrate",
    "sparse_grid",
    "Transform",
]
