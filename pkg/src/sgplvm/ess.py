"""Elliptical slice sampling of the latent variables.

Rejection-free updates of the latent matrix under its GP prior: a prior draw
and the current state define an ellipse, a log-likelihood threshold defines a
slice, and the angle is shrunk toward zero until the proposal lands inside
the slice. Zero angle recovers the current state, so every step terminates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import CholFactor, kz_matrix, stable_cholesky
from .model import HyperParams, log_py_given_z

__all__ = ["EssState", "make_gp_loglik", "ess_step", "sample_latents"]


@dataclass
class EssState:
    """Current latent matrix with its prior factor and cached log-likelihood."""

    Z: np.ndarray
    kz_chol: CholFactor
    log_lik: float


def make_gp_loglik(Y: np.ndarray, theta, beta: float):
    """Log-likelihood of the outputs as a function of the latent matrix."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))

    def loglik(Z: np.ndarray) -> float:
        return log_py_given_z(Y, Z, theta, beta)

    return loglik


def _rotate(Z: np.ndarray, nu: np.ndarray, alpha: float) -> np.ndarray:
    return nu * math.sin(alpha) + Z * math.cos(alpha)


def ess_step(
    state: EssState,
    loglik,
    rng: np.random.Generator,
    max_shrink: int = 1000,
    trace_alphas: list | None = None,
) -> EssState:
    """One elliptical slice update of the whole latent matrix.

    Draws the ellipse companion columnwise from the latent prior using the
    cached factor, then shrinks the angle bracket until the rotated proposal
    clears the likelihood threshold. ``trace_alphas`` collects the proposed
    angles when provided.
    """
    Z = state.Z
    nu = state.kz_chol.sample(rng, Z.shape)
    log_h = state.log_lik + math.log(rng.uniform())
    alpha = rng.uniform(0.0, 2.0 * math.pi)
    alpha_min, alpha_max = alpha - 2.0 * math.pi, alpha
    for _ in range(max_shrink):
        if trace_alphas is not None:
            trace_alphas.append(alpha)
        candidate = _rotate(Z, nu, alpha)
        ll = loglik(candidate)
        if ll > log_h:
            return EssState(Z=candidate, kz_chol=state.kz_chol, log_lik=float(ll))
        if alpha < 0:
            alpha_min = alpha
        else:
            alpha_max = alpha
        alpha = rng.uniform(alpha_min, alpha_max)
    raise RuntimeError(
        f"slice shrinkage did not terminate within {max_shrink} proposals; "
        "the likelihood is likely returning non-comparable values"
    )


def sample_latents(
    Y: np.ndarray,
    X: np.ndarray,
    hyper_draws,
    steps_per_draw: int,
    rng: np.random.Generator,
    init_Z: np.ndarray | None = None,
) -> np.ndarray:
    """One latent draw per hyperparameter draw, from a persistent slice chain.

    For each hyperparameter draw the chain is advanced ``steps_per_draw``
    elliptical slice sweeps from the previous latent state and the final
    state is emitted, so the output length equals the number of draws. The
    prior factor is only recomputed when the input-kernel parameters change
    between consecutive draws.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    hyper_draws = list(hyper_draws)
    if not hyper_draws:
        return np.zeros((0, Y.shape[0], 0))
    k_z = hyper_draws[0].k_z
    if init_Z is None:
        init_Z = np.zeros((Y.shape[0], k_z))
    Z = np.array(init_Z, dtype=float)

    out = np.empty((len(hyper_draws), Y.shape[0], k_z))
    prev_sigma = None
    kzc = None
    for g, xi in enumerate(hyper_draws):
        if prev_sigma is None or not np.array_equal(
            xi.sigma.precisions, prev_sigma.precisions
        ):
            kzc = stable_cholesky(kz_matrix(X, X, xi.sigma, with_jitter=True))
            prev_sigma = xi.sigma
        loglik = make_gp_loglik(Y, xi.theta, xi.beta)
        state = EssState(Z=Z, kz_chol=kzc, log_lik=loglik(Z))
        for _ in range(steps_per_draw):
            state = ess_step(state, loglik, rng)
        Z = state.Z
        out[g] = Z
    return out
