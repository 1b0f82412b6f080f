"""Supervised GP latent variable models.

A numpy/scipy library for two-layer GP models of multivariate outputs:
a collapsed variational lower bound with inducing points (used both as a
type-II maximum-likelihood baseline and as an importance proposal), fully
Bayesian hyperparameter inference through pseudo-marginal adaptive
Metropolis-Hastings within Gibbs, elliptical slice sampling of the latent
variables, and Monte Carlo marginalized prediction.
"""

from .kernels import (
    CholFactor,
    FactorizationError,
    SigmaKernelParams,
    ThetaKernelParams,
    kf_matrix,
    kz_matrix,
    stable_cholesky,
)
from .model import (
    Dataset,
    GammaPrior,
    HyperParams,
    HyperPriors,
    log_joint,
    log_prior_hyper,
    log_py_given_z,
    log_pz_given_x,
)
from .variational import (
    PsiStats,
    VariationalState,
    collapsed_bound,
    elbo,
    elbo_gradient,
    fit_ml,
    fit_variational,
    kl_qz_prior,
    psi_statistics,
)

__version__ = "0.1.0"

__all__ = [
    "CholFactor",
    "FactorizationError",
    "SigmaKernelParams",
    "ThetaKernelParams",
    "kf_matrix",
    "kz_matrix",
    "stable_cholesky",
    "Dataset",
    "GammaPrior",
    "HyperParams",
    "HyperPriors",
    "log_joint",
    "log_prior_hyper",
    "log_py_given_z",
    "log_pz_given_x",
    "PsiStats",
    "VariationalState",
    "collapsed_bound",
    "elbo",
    "elbo_gradient",
    "fit_ml",
    "fit_variational",
    "kl_qz_prior",
    "psi_statistics",
    "__version__",
]
