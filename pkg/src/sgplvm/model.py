"""Exact log-densities of the two-layer latent variable model.

The observed outputs ``Y`` are tied to latent representations ``Z`` through
independent GPs per feature with additive Gaussian noise; the latents carry
independent GP priors per latent dimension indexed by the observed inputs
``X``. All densities are computed in log space via shared Cholesky factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import (
    CholFactor,
    SigmaKernelParams,
    ThetaKernelParams,
    kf_matrix,
    kz_matrix,
    stable_cholesky,
)

__all__ = [
    "Dataset",
    "HyperParams",
    "GammaPrior",
    "HyperPriors",
    "gaussian_cols_logpdf",
    "log_py_given_z",
    "log_pz_given_x",
    "log_prior_hyper",
    "log_joint",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Dataset:
    """Observed inputs ``X`` (N, k_x) and outputs ``Y`` (N, k_y)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"row mismatch: X has {X.shape[0]} rows, Y has {Y.shape[0]}")
        if X.shape[0] < 2:
            raise ValueError("need at least two observations")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k_x(self) -> int:
        return self.X.shape[1]

    @property
    def k_y(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True)
class HyperParams:
    """Kernel hyperparameters for both layers plus the noise precision."""

    sigma: SigmaKernelParams
    theta: ThetaKernelParams
    beta: float

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise ValueError(f"noise precision must be positive, got {self.beta}")

    @property
    def k_x(self) -> int:
        return self.sigma.k_x

    @property
    def k_z(self) -> int:
        return self.theta.k_z

    def component_names(self) -> list[str]:
        """Canonical component order used by vectors, blocks and trace files."""
        return (
            [f"sigma_{l + 1}" for l in range(self.k_x)]
            + [f"theta_{j + 1}" for j in range(self.k_z)]
            + ["theta_S", "beta"]
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.sigma.precisions,
                self.theta.precisions,
                [self.theta.signal_variance, self.beta],
            ]
        )

    @classmethod
    def from_vector(
        cls, vec: np.ndarray, k_x: int, k_z: int, jitter: float = 1e-6
    ) -> "HyperParams":
        vec = np.asarray(vec, dtype=float)
        if vec.size != k_x + k_z + 2:
            raise ValueError(f"expected {k_x + k_z + 2} components, got {vec.size}")
        return cls(
            sigma=SigmaKernelParams(vec[:k_x], jitter=jitter),
            theta=ThetaKernelParams(vec[k_x + k_z], vec[k_x : k_x + k_z]),
            beta=float(vec[-1]),
        )

    def replace_vector(self, vec: np.ndarray) -> "HyperParams":
        return HyperParams.from_vector(vec, self.k_x, self.k_z, jitter=self.sigma.jitter)


@dataclass(frozen=True)
class GammaPrior:
    """Gamma prior in the shape-scale parameterization (mean = shape * scale)."""

    shape: float
    scale: float
    target: str = ""

    def __post_init__(self):
        if self.shape <= 0 or self.scale <= 0:
            raise ValueError(f"Gamma prior needs positive shape and scale, got {self}")

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    def logpdf(self, x: float) -> float:
        if not np.isfinite(x) or x <= 0:
            return -np.inf
        a, b = self.shape, self.scale
        return (a - 1.0) * math.log(x) - x / b - math.lgamma(a) - a * math.log(b)


@dataclass(frozen=True)
class HyperPriors:
    """One Gamma prior per hyperparameter component.

    ``beta_on`` selects whether the beta prior is placed on the noise
    precision itself (default) or on the noise variance 1/beta; the latter
    includes the change-of-variables Jacobian so the density is still with
    respect to the sampled precision.
    """

    sigma: tuple[GammaPrior, ...]
    theta: tuple[GammaPrior, ...]
    theta_s: GammaPrior
    beta: GammaPrior
    beta_on: str = "precision"

    def __post_init__(self):
        object.__setattr__(self, "sigma", tuple(self.sigma))
        object.__setattr__(self, "theta", tuple(self.theta))
        if self.beta_on not in ("precision", "variance"):
            raise ValueError(f"beta_on must be 'precision' or 'variance', got {self.beta_on!r}")

    @classmethod
    def broadcast(
        cls,
        k_x: int,
        k_z: int,
        sigma: GammaPrior,
        theta: GammaPrior,
        theta_s: GammaPrior,
        beta: GammaPrior,
        beta_on: str = "precision",
    ) -> "HyperPriors":
        """Share one prior across all lengthscale precisions of each layer."""
        return cls(
            sigma=(sigma,) * k_x,
            theta=(theta,) * k_z,
            theta_s=theta_s,
            beta=beta,
            beta_on=beta_on,
        )

    def _beta_logpdf(self, b: float) -> float:
        if not np.isfinite(b) or b <= 0:
            return -np.inf
        if self.beta_on == "precision":
            return self.beta.logpdf(b)
        # prior on 1/beta, expressed as a density over beta
        return self.beta.logpdf(1.0 / b) - 2.0 * math.log(b)

    def logpdf_fns(self) -> list:
        """Per-component log prior density callables in canonical component order."""
        fns = [p.logpdf for p in self.sigma]
        fns += [p.logpdf for p in self.theta]
        fns.append(self.theta_s.logpdf)
        fns.append(self._beta_logpdf)
        return fns

    def component_logpdfs(self, xi: HyperParams) -> np.ndarray:
        """Per-component log prior densities evaluated at ``xi``."""
        if len(self.sigma) != xi.k_x or len(self.theta) != xi.k_z:
            raise ValueError("prior table does not match hyperparameter dimensions")
        vals = [fn(v) for fn, v in zip(self.logpdf_fns(), xi.to_vector())]
        return np.array(vals)


def gaussian_cols_logpdf(cols: np.ndarray, chol: CholFactor) -> float:
    """Sum of zero-mean Gaussian log-densities of the columns of ``cols``.

    All columns share the covariance represented by ``chol``, so one factor
    serves every column.
    """
    cols = np.atleast_2d(np.asarray(cols, dtype=float))
    n, p = cols.shape
    half = chol.half_solve(cols)
    quad = float(np.sum(half * half))
    return -0.5 * (p * n * LOG_2PI + p * chol.log_det + quad)


def log_py_given_z(
    Y: np.ndarray, Z: np.ndarray, theta: ThetaKernelParams, beta: float
) -> float:
    """Log-density of the outputs given latents: independent GPs per feature."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Y.shape[0] != Z.shape[0]:
        raise ValueError(f"row mismatch: Y has {Y.shape[0]} rows, Z has {Z.shape[0]}")
    if beta <= 0:
        raise ValueError(f"noise precision must be positive, got {beta}")
    K = kf_matrix(Z, Z, theta)
    K[np.diag_indices_from(K)] += 1.0 / beta
    return gaussian_cols_logpdf(Y, stable_cholesky(K))


def log_pz_given_x(Z: np.ndarray, X: np.ndarray, sigma: SigmaKernelParams) -> float:
    """Log-density of the latents under their GP prior indexed by the inputs."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if Z.shape[0] != X.shape[0]:
        raise ValueError(f"row mismatch: Z has {Z.shape[0]} rows, X has {X.shape[0]}")
    K = kz_matrix(X, X, sigma, with_jitter=True)
    return gaussian_cols_logpdf(Z, stable_cholesky(K))


def log_prior_hyper(xi: HyperParams, priors: HyperPriors) -> float:
    """Sum of Gamma log prior densities over all hyperparameter components."""
    return float(np.sum(priors.component_logpdfs(xi)))


def log_joint(Y: np.ndarray, Z: np.ndarray, X: np.ndarray, xi: HyperParams) -> float:
    """Joint log-density of outputs and latents given inputs and hyperparameters."""
    return log_py_given_z(Y, Z, xi.theta, xi.beta) + log_pz_given_x(Z, X, xi.sigma)
