"""Squared-exponential ARD kernels and jitter-escalating Cholesky factorization.

Two kernel families are used throughout the package:

* an input-space kernel with magnitude fixed to one plus an optional
  white-noise jitter on the diagonal (``kz_matrix``), and
* a latent-space kernel carrying a signal-variance multiplier
  (``kf_matrix``).

Both weight squared distances by one precision per dimension, so a large
precision switches a dimension on and zero switches it off entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "DEFAULT_JITTER",
    "CHOL_JITTER_SCHEDULE",
    "FactorizationError",
    "SigmaKernelParams",
    "ThetaKernelParams",
    "CholFactor",
    "kz_matrix",
    "kf_matrix",
    "stable_cholesky",
]

DEFAULT_JITTER = 1e-6
CHOL_JITTER_SCHEDULE = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky failed at every jitter level of the escalation schedule."""

    def __init__(self, message: str, attempted_jitter: float):
        super().__init__(message)
        self.attempted_jitter = attempted_jitter


def _as_points(name: str, arr) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_precisions(name: str, prec: np.ndarray) -> np.ndarray:
    prec = np.asarray(prec, dtype=float).ravel()
    if prec.size == 0:
        raise ValueError(f"{name} must have at least one component")
    if not np.all(np.isfinite(prec)) or np.any(prec < 0):
        raise ValueError(f"{name} must be finite and non-negative, got {prec}")
    return prec


@dataclass(frozen=True)
class SigmaKernelParams:
    """Input-space kernel parameters: per-dimension precisions and jitter.

    The kernel magnitude is fixed to one, so the only free shape parameters
    are the inverse squared lengthscales. ``jitter`` is the white-noise
    variance added to same-point-set diagonals for numerical stability; it
    is a fixed constant, never sampled or optimized.
    """

    precisions: np.ndarray
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        object.__setattr__(
            self, "precisions", _check_precisions("sigma precisions", self.precisions)
        )
        if not np.isfinite(self.jitter) or self.jitter < 0:
            raise ValueError(f"jitter must be finite and non-negative, got {self.jitter}")

    @property
    def k_x(self) -> int:
        return self.precisions.size


@dataclass(frozen=True)
class ThetaKernelParams:
    """Latent-space kernel parameters: signal variance plus per-dimension precisions."""

    signal_variance: float
    precisions: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "precisions", _check_precisions("theta precisions", self.precisions)
        )
        if not np.isfinite(self.signal_variance) or self.signal_variance <= 0:
            raise ValueError(
                f"signal variance must be finite and positive, got {self.signal_variance}"
            )

    @property
    def k_z(self) -> int:
        return self.precisions.size


def _weighted_sqdist(a: np.ndarray, b: np.ndarray, precisions: np.ndarray) -> np.ndarray:
    # Broadcasting keeps (x - y)^2 exactly symmetric when a is b.
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("nmk,k->nm", diff * diff, precisions)


def kz_matrix(a, b, sigma: SigmaKernelParams, with_jitter: bool = False) -> np.ndarray:
    """Input-space kernel matrix ``exp(-0.5 * sum_l sigma_l (x_l - x'_l)^2)``.

    Parameters
    ----------
    a, b : array_like, shape (n_a, k_x) and (n_b, k_x)
        Point sets. ``with_jitter`` adds ``sigma.jitter`` to the diagonal and
        is only meaningful when ``a`` and ``b`` are the same point set.
    """
    a = _as_points("a", a)
    b = _as_points("b", b)
    if a.shape[1] != sigma.k_x or b.shape[1] != sigma.k_x:
        raise ValueError(
            f"point dimension {a.shape[1]}x{b.shape[1]} does not match k_x={sigma.k_x}"
        )
    k = np.exp(-0.5 * _weighted_sqdist(a, b, sigma.precisions))
    if with_jitter:
        if a.shape[0] != b.shape[0]:
            raise ValueError("with_jitter requires a and b to be the same point set")
        k[np.diag_indices_from(k)] += sigma.jitter
    return k


def kf_matrix(a, b, theta: ThetaKernelParams) -> np.ndarray:
    """Latent-space kernel matrix ``s * exp(-0.5 * sum_j theta_j (z_j - z'_j)^2)``."""
    a = _as_points("a", a)
    b = _as_points("b", b)
    if a.shape[1] != theta.k_z or b.shape[1] != theta.k_z:
        raise ValueError(
            f"point dimension {a.shape[1]}x{b.shape[1]} does not match k_z={theta.k_z}"
        )
    return theta.signal_variance * np.exp(-0.5 * _weighted_sqdist(a, b, theta.precisions))


@dataclass
class CholFactor:
    """Lower-triangular Cholesky factor with the jitter that made it succeed."""

    L: np.ndarray
    added_jitter: float = 0.0
    _log_det: float | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def log_det(self) -> float:
        """Log-determinant of the factorized matrix."""
        if self._log_det is None:
            self._log_det = 2.0 * float(np.sum(np.log(np.diag(self.L))))
        return self._log_det

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``(L L^T) x = b``."""
        return cho_solve((self.L, True), b)

    def half_solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``L x = b`` (useful for whitening and quadratic forms)."""
        return solve_triangular(self.L, b, lower=True)

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Draw ``L @ eps`` with standard-normal ``eps`` of the given shape."""
        return self.L @ rng.standard_normal(shape)

    def matrix(self) -> np.ndarray:
        return self.L @ self.L.T


def stable_cholesky(m, schedule=CHOL_JITTER_SCHEDULE) -> CholFactor:
    """Cholesky of ``m + c*I`` for the smallest ``c`` in ``schedule`` that succeeds.

    ``schedule`` must start at the preferred jitter (normally 0) and escalate.
    Raises :class:`FactorizationError` carrying the final attempted ``c`` when
    every level fails.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    if not np.allclose(m, m.T, rtol=1e-8, atol=1e-8):
        raise ValueError("matrix is not symmetric within tolerance")
    eye = np.eye(m.shape[0])
    last = 0.0
    for c in schedule:
        last = float(c)
        try:
            L = np.linalg.cholesky(m + c * eye if c else m)
        except np.linalg.LinAlgError:
            continue
        return CholFactor(L, added_jitter=last)
    raise FactorizationError(
        f"Cholesky failed for all jitter levels up to {last:g}", attempted_jitter=last
    )
