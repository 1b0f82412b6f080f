"""Monte Carlo marginalized prediction at test inputs.

Predictions chain two GP conditionals: test latents given the training
latents through the input-space kernel, then test outputs given the latent
draw through the latent-space kernel. Averaging over retained posterior
draws of hyperparameters and latents gives the marginalized predictive
density and posterior mean; a single draw reduces to plain GP prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import CholFactor, kf_matrix, kz_matrix, stable_cholesky
from .model import LOG_2PI, HyperParams

__all__ = [
    "ClampDiagnostics",
    "CLAMP_COUNTER",
    "predict_latent",
    "predict_output",
    "predictive_density",
    "posterior_mean",
    "variational_predictive",
]


@dataclass
class ClampDiagnostics:
    """Counts of negative predictive variances clamped to zero by round-off."""

    latent: int = 0
    output: int = 0

    def reset(self) -> None:
        self.latent = 0
        self.output = 0


CLAMP_COUNTER = ClampDiagnostics()


def predict_latent(
    x_star: np.ndarray,
    X: np.ndarray,
    Z: np.ndarray,
    sigma,
    rng: np.random.Generator | None = None,
    kz_chol: CholFactor | None = None,
):
    """GP conditional of the test latents given the training latents.

    Returns ``(means, var, draw)`` with means of shape (n_star, k_z), one
    shared variance per test point, and one sampled latent row per test
    point (``None`` when no generator is supplied). Cross-covariances carry
    no jitter; the test point's own variance does.
    """
    x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if kz_chol is None:
        kz_chol = stable_cholesky(kz_matrix(X, X, sigma, with_jitter=True))
    k_star = kz_matrix(X, x_star, sigma)  # (N, n_star)
    alpha = kz_chol.solve(k_star)
    means = alpha.T @ Z  # (n_star, k_z)
    prior_var = 1.0 + sigma.jitter
    var = prior_var - np.sum(k_star * alpha, axis=0)
    neg = var < 0
    if np.any(neg):
        CLAMP_COUNTER.latent += int(neg.sum())
        var = np.where(neg, 0.0, var)
    draw = None
    if rng is not None:
        draw = means + np.sqrt(var)[:, None] * rng.standard_normal(means.shape)
    return means, var, draw


def predict_output(
    z_star: np.ndarray,
    Z: np.ndarray,
    Y: np.ndarray,
    theta,
    beta: float,
    kf_chol: CholFactor | None = None,
):
    """GP predictive of the test outputs given a latent row per test point.

    Returns ``(means, var)``: means of shape (n_star, k_y) and one noise-
    inclusive variance per test point, shared across features.
    """
    z_star = np.atleast_2d(np.asarray(z_star, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if kf_chol is None:
        K = kf_matrix(Z, Z, theta)
        K[np.diag_indices_from(K)] += 1.0 / beta
        kf_chol = stable_cholesky(K)
    k_star = kf_matrix(Z, z_star, theta)  # (N, n_star)
    alpha = kf_chol.solve(k_star)
    means = alpha.T @ Y  # (n_star, k_y)
    latent_var = theta.signal_variance - np.sum(k_star * alpha, axis=0)
    neg = latent_var < 0
    if np.any(neg):
        CLAMP_COUNTER.output += int(neg.sum())
        latent_var = np.where(neg, 0.0, latent_var)
    return means, latent_var + 1.0 / beta


def _output_chol(Z: np.ndarray, theta, beta: float) -> CholFactor:
    K = kf_matrix(Z, Z, theta)
    K[np.diag_indices_from(K)] += 1.0 / beta
    return stable_cholesky(K)


def predictive_density(
    x_star: np.ndarray,
    y_grids: np.ndarray,
    X: np.ndarray,
    Y: np.ndarray,
    draws,
    rng: np.random.Generator,
) -> np.ndarray:
    """Equal-weight Gaussian mixture density over posterior draws.

    ``draws`` iterates over ``(hyper, Z)`` pairs; for each draw one test
    latent row is sampled per test point and the resulting per-feature
    Gaussian is accumulated on the grid. ``y_grids`` has shape
    (k_y, n_bins); the result has shape (k_y, n_star, n_bins).
    """
    x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
    y_grids = np.atleast_2d(np.asarray(y_grids, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    draws = list(draws)
    if not draws:
        raise ValueError("need at least one posterior draw")
    k_y = Y.shape[1]
    out = np.zeros((k_y, x_star.shape[0], y_grids.shape[1]))
    prev = _KernelCache()
    for xi, Z in draws:
        kzc, kfc = prev.factors(xi, Z, X)
        _, _, z_draw = predict_latent(x_star, X, Z, xi.sigma, rng, kz_chol=kzc)
        means, var = predict_output(z_draw, Z, Y, xi.theta, xi.beta, kf_chol=kfc)
        sd = np.sqrt(var)[:, None]
        for i in range(k_y):
            resid = (y_grids[i][None, :] - means[:, i][:, None]) / sd
            out[i] += np.exp(-0.5 * resid**2 - np.log(sd) - 0.5 * LOG_2PI)
    return out / len(draws)


def posterior_mean(
    x_star: np.ndarray,
    X: np.ndarray,
    Y: np.ndarray,
    draws,
    rng: np.random.Generator,
) -> np.ndarray:
    """Monte Carlo estimate of the predictive mean, shape (n_star, k_y)."""
    x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    draws = list(draws)
    if not draws:
        raise ValueError("need at least one posterior draw")
    total = np.zeros((x_star.shape[0], Y.shape[1]))
    prev = _KernelCache()
    for xi, Z in draws:
        kzc, kfc = prev.factors(xi, Z, X)
        _, _, z_draw = predict_latent(x_star, X, Z, xi.sigma, rng, kz_chol=kzc)
        means, _ = predict_output(z_draw, Z, Y, xi.theta, xi.beta, kf_chol=kfc)
        total += means
    return total / len(draws)


def variational_predictive(x_star: np.ndarray, X: np.ndarray, Y: np.ndarray, q, xi):
    """Single-Gaussian predictive of the fitted variational model.

    Test-latent uncertainty is propagated analytically through the sparse
    model by moment matching instead of sampling: the result is one Gaussian
    per feature per test point whose variance absorbs all latent-path
    uncertainty. Returns ``(means, variances)``, both (n_star, k_y), noise
    included.
    """
    from .variational import psi_cross_moments, _psi_internals

    x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    theta, beta = xi.theta, xi.beta
    n_star = x_star.shape[0]

    # test-latent distribution: GP conditional on the variational means plus
    # the extra spread the latent posterior covariances carry
    kz_chol = stable_cholesky(kz_matrix(X, X, xi.sigma, with_jitter=True))
    k_star = kz_matrix(X, x_star, xi.sigma)  # (N, n_star)
    alpha = kz_chol.solve(k_star)
    z_means = alpha.T @ q.mu  # (n_star, k_z)
    base_var = (1.0 + xi.sigma.jitter) - np.sum(k_star * alpha, axis=0)
    base_var = np.maximum(base_var, 0.0)
    extra = np.stack(
        [np.sum((q.cov_chols[j].T @ alpha) ** 2, axis=0) for j in range(q.k_z)], axis=1
    )
    z_vars = base_var[:, None] + extra  # (n_star, k_z)

    # training-side posterior over inducing values
    _, psi1, psi2, _ = _psi_internals(q, theta)
    ku = kf_matrix(q.inducing, q.inducing, theta)
    ku[np.diag_indices_from(ku)] += 1e-6
    lu = stable_cholesky(ku)
    lb = stable_cholesky(ku + beta * psi2)
    w = beta * lb.solve(psi1.T @ Y)  # (M, k_y)

    psi1_star, t_star, _ = psi_cross_moments(z_means, z_vars, q.inducing, theta)
    means = psi1_star @ w  # (n_star, k_y)
    tr_ku = np.einsum("ab,nab->n", lu.solve(np.eye(q.m)), t_star)
    tr_b = np.einsum("ab,nab->n", lb.solve(np.eye(q.m)), t_star)
    quad = np.einsum("nab,ai,bi->ni", t_star, w, w)
    var = (
        theta.signal_variance
        - tr_ku[:, None]
        + tr_b[:, None]
        + quad
        - means**2
        + 1.0 / beta
    )
    neg = var <= 0
    if np.any(neg):
        CLAMP_COUNTER.output += int(neg.sum())
        var = np.where(neg, 1.0 / beta, var)
    return means, var


class _KernelCache:
    """Reuse kernel factors across consecutive draws with unchanged parameters."""

    def __init__(self):
        self._sigma = None
        self._kzc = None
        self._key = None
        self._kfc = None

    def factors(self, xi: HyperParams, Z: np.ndarray, X: np.ndarray):
        if self._sigma is None or not np.array_equal(
            xi.sigma.precisions, self._sigma.precisions
        ):
            self._kzc = stable_cholesky(kz_matrix(X, X, xi.sigma, with_jitter=True))
            self._sigma = xi.sigma
        key = (
            Z.tobytes(),
            xi.theta.signal_variance,
            xi.theta.precisions.tobytes(),
            xi.beta,
        )
        if key != self._key:
            self._kfc = _output_chol(Z, xi.theta, xi.beta)
            self._key = key
        return self._kzc, self._kfc
