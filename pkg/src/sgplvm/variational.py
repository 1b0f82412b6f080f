"""Collapsed variational lower bound with inducing points.

The latent posterior is approximated per latent dimension by a Gaussian with
free mean and full covariance, the likelihood term is collapsed through a
sparse-GP augmentation with the optimal inducing distribution integrated out
analytically, and the KL against the GP prior on the latents is exact. The
bound is maximized by quasi-Newton ascent over an unconstrained packing of
the variational parameters (covariances through their Cholesky factors), and
type-II maximum likelihood alternates that ascent with hyperparameter moves
in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import minimize

from .kernels import (
    DEFAULT_JITTER,
    SigmaKernelParams,
    ThetaKernelParams,
    kf_matrix,
    kz_matrix,
    stable_cholesky,
)
from .model import LOG_2PI, HyperParams, log_py_given_z

__all__ = [
    "VariationalState",
    "PsiStats",
    "FitResult",
    "MLFit",
    "initial_state",
    "psi_statistics",
    "collapsed_bound",
    "kl_qz_prior",
    "elbo",
    "elbo_gradient",
    "fit_variational",
    "fit_ml",
]

INDUCING_JITTER = 1e-6
_BAD_VALUE = 1e25


@dataclass
class VariationalState:
    """Gaussian latent posterior plus inducing locations.

    ``mu`` has shape (N, k_z); ``cov_chols`` stacks one lower-triangular
    Cholesky factor per latent dimension, shape (k_z, N, N); ``inducing``
    has shape (M, k_z) with M <= N.
    """

    mu: np.ndarray
    cov_chols: np.ndarray
    inducing: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.cov_chols = np.asarray(self.cov_chols, dtype=float)
        self.inducing = np.atleast_2d(np.asarray(self.inducing, dtype=float))
        n, k_z = self.mu.shape
        if self.cov_chols.shape != (k_z, n, n):
            raise ValueError(
                f"cov_chols shape {self.cov_chols.shape} does not match ({k_z}, {n}, {n})"
            )
        if self.inducing.shape[1] != k_z:
            raise ValueError("inducing locations must share the latent dimension")
        if self.inducing.shape[0] > n:
            raise ValueError("cannot use more inducing points than data points")
        if not all(
            np.all(np.isfinite(a)) for a in (self.mu, self.cov_chols, self.inducing)
        ):
            raise ValueError("variational state contains non-finite entries")

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def k_z(self) -> int:
        return self.mu.shape[1]

    @property
    def m(self) -> int:
        return self.inducing.shape[0]

    def covariances(self) -> np.ndarray:
        """Full covariances S_j, shape (k_z, N, N)."""
        return np.einsum("jab,jcb->jac", self.cov_chols, self.cov_chols)

    def marginal_variances(self) -> np.ndarray:
        """Per-point marginal variances, shape (N, k_z)."""
        return np.sum(self.cov_chols**2, axis=2).T

    def log_dets(self) -> np.ndarray:
        """log|S_j| per latent dimension."""
        diags = np.diagonal(self.cov_chols, axis1=1, axis2=2)
        return 2.0 * np.sum(np.log(np.abs(diags)), axis=1)

    def sample(self, rng: np.random.Generator, size: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``size`` latent matrices; returns (draws (size,N,k_z), eps)."""
        eps = rng.standard_normal((self.k_z, self.n, size))
        cols = np.einsum("jab,jbs->jas", self.cov_chols, eps) + self.mu.T[:, :, None]
        return np.transpose(cols, (2, 1, 0)), eps

    def log_q(self, Z: np.ndarray) -> float:
        """Log-density of one latent matrix under this state."""
        total = 0.0
        for j in range(self.k_z):
            L = self.cov_chols[j]
            resid = np.linalg.solve(L, Z[:, j] - self.mu[:, j])
            logdet = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
            total += -0.5 * (self.n * LOG_2PI + logdet + resid @ resid)
        return float(total)

    def copy(self) -> "VariationalState":
        return VariationalState(self.mu.copy(), self.cov_chols.copy(), self.inducing.copy())

    # -- unconstrained packing ------------------------------------------------

    def pack(self) -> np.ndarray:
        """Flatten into the unconstrained optimization vector.

        Layout: means per latent dimension, then the lower triangle of each
        covariance factor (row-major), then the inducing locations.
        """
        rows, cols = np.tril_indices(self.n)
        parts = [self.mu[:, j] for j in range(self.k_z)]
        parts += [self.cov_chols[j][rows, cols] for j in range(self.k_z)]
        parts.append(self.inducing.ravel())
        return np.concatenate(parts)

    def unpack(self, vec: np.ndarray) -> "VariationalState":
        """Inverse of :meth:`pack`, using this state as the shape template."""
        n, k_z, m = self.n, self.k_z, self.m
        rows, cols = np.tril_indices(n)
        ntri = rows.size
        vec = np.asarray(vec, dtype=float)
        mu = np.empty((n, k_z))
        pos = 0
        for j in range(k_z):
            mu[:, j] = vec[pos : pos + n]
            pos += n
        chols = np.zeros((k_z, n, n))
        for j in range(k_z):
            chols[j][rows, cols] = vec[pos : pos + ntri]
            pos += ntri
        inducing = vec[pos : pos + m * k_z].reshape(m, k_z)
        return VariationalState(mu, chols, inducing)


@dataclass(frozen=True)
class PsiStats:
    """Kernel expectations under the variational posterior."""

    psi0: float
    psi1: np.ndarray
    psi2: np.ndarray


@dataclass
class FitResult:
    state: VariationalState
    elbo: float
    trace: np.ndarray
    n_iter: int
    converged: bool


@dataclass
class MLFit:
    hyper: HyperParams
    state: VariationalState
    elbo: float
    restart_elbos: list[float] = field(default_factory=list)


def initial_state(
    Y: np.ndarray,
    k_z: int,
    n_inducing: int,
    rng: np.random.Generator,
    latent_variance: float = 0.5,
) -> VariationalState:
    """PCA means, neutral marginal variances, k-means inducing locations."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = Y.shape[0]
    if k_z > Y.shape[1]:
        raise ValueError("PCA initialization needs k_z <= k_y")
    yc = Y - Y.mean(axis=0)
    u, s, _ = np.linalg.svd(yc, full_matrices=False)
    scores = u[:, :k_z] * s[:k_z]
    sd = scores.std(axis=0)
    degenerate = sd < 1e-12
    sd[degenerate] = 1.0
    mu = scores / sd
    if np.any(degenerate):
        mu[:, degenerate] = 0.1 * rng.standard_normal((n, int(degenerate.sum())))
    chols = np.tile(math.sqrt(latent_variance) * np.eye(n), (k_z, 1, 1))
    m = min(n_inducing, n)
    if m == n:
        inducing = mu.copy()
    else:
        try:
            inducing, _ = kmeans2(mu, m, minit="++", seed=rng)
        except Exception:
            idx = np.linspace(0, n - 1, m).round().astype(int)
            inducing = mu[np.argsort(mu[:, 0])][idx]
    return VariationalState(mu, chols, np.atleast_2d(inducing))


def psi_statistics(q: VariationalState, theta: ThetaKernelParams) -> PsiStats:
    """Closed-form kernel expectations for the SE-ARD kernel.

    Only the per-point marginals of the latent posterior enter: each
    statistic is an expectation of a function of a single latent row, so
    cross-point covariance terms drop out.
    """
    psi0, psi1, psi2, _ = _psi_internals(q, theta)
    return PsiStats(psi0=psi0, psi1=psi1, psi2=psi2)


def psi_cross_moments(mu: np.ndarray, var: np.ndarray, inducing: np.ndarray, theta):
    """Kernel expectations against per-point Gaussians N(mu_n, diag(var_n)).

    Returns the expected cross-kernel (n, M) and the per-point expected outer
    kernel products (n, M, M); summing the latter over points gives the
    training second-moment statistic.
    """
    th = theta.precisions
    mu = np.atleast_2d(mu)
    var = np.atleast_2d(var)
    zu = np.atleast_2d(inducing)

    c = 1.0 + th * var  # (n, k_z)
    d = mu[:, None, :] - zu[None, :, :]  # (n, M, k_z)
    expo1 = -0.5 * np.einsum("nmk,nk->nm", d * d, th / c) - 0.5 * np.sum(
        np.log(c), axis=1
    )[:, None]
    psi1 = theta.signal_variance * np.exp(expo1)

    e = 1.0 + 2.0 * th * var  # (n, k_z)
    delta = zu[:, None, :] - zu[None, :, :]  # (M, M, k_z)
    dist2 = 0.25 * np.einsum("abk,k->ab", delta * delta, th)
    mid = 0.5 * (zu[:, None, :] + zu[None, :, :])  # (M, M, k_z)
    r = mu[:, None, None, :] - mid[None, :, :, :]  # (n, M, M, k_z)
    expo2 = (
        -np.einsum("nabk,nk->nab", r * r, th / e)
        - dist2[None, :, :]
        - 0.5 * np.sum(np.log(e), axis=1)[:, None, None]
    )
    t_terms = theta.signal_variance**2 * np.exp(expo2)  # (n, M, M)
    cache = {"s": var, "c": c, "d": d, "e": e, "delta": delta, "r": r, "t": t_terms}
    return psi1, t_terms, cache


def _psi_internals(q: VariationalState, theta: ThetaKernelParams):
    psi1, t_terms, cache = psi_cross_moments(
        q.mu, q.marginal_variances(), q.inducing, theta
    )
    psi2 = t_terms.sum(axis=0)
    psi0 = q.n * theta.signal_variance
    return psi0, psi1, psi2, cache


def _bound_internals(Y: np.ndarray, q: VariationalState, theta, beta: float):
    """Bound value plus everything the gradient needs."""
    n, k_y = Y.shape
    psi0, psi1, psi2, cache = _psi_internals(q, theta)
    ku = kf_matrix(q.inducing, q.inducing, theta)
    ku[np.diag_indices_from(ku)] += INDUCING_JITTER
    lu = stable_cholesky(ku)
    b_mat = ku + beta * psi2
    lb = stable_cholesky(b_mat)
    w = psi1.T @ Y  # (M, k_y)
    c_sol = lb.solve(w)
    kuinv_psi2 = lu.solve(psi2)
    bound = (
        k_y * 0.5 * n * (math.log(beta) - LOG_2PI)
        + 0.5 * k_y * (lu.log_det - lb.log_det)
        - 0.5 * beta * float(np.sum(Y * Y))
        + 0.5 * beta**2 * float(np.sum(w * c_sol))
        - 0.5 * beta * k_y * psi0
        + 0.5 * beta * k_y * float(np.trace(kuinv_psi2))
    )
    return bound, {
        "psi1": psi1,
        "psi2": psi2,
        "ku": ku,
        "lu": lu,
        "lb": lb,
        "c_sol": c_sol,
        "kuinv_psi2": kuinv_psi2,
        **cache,
    }


def collapsed_bound(
    Y: np.ndarray, q: VariationalState, theta: ThetaKernelParams, beta: float
) -> float:
    """Collapsed likelihood bound summed over features.

    Per feature this is the log of the Gaussian integral of the optimal
    inducing distribution against the expected log-likelihood, minus the
    variance corrections expressed through the kernel expectations.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    bound, _ = _bound_internals(Y, q, theta, beta)
    return float(bound)


def kl_qz_prior(q: VariationalState, X: np.ndarray, sigma: SigmaKernelParams) -> float:
    """KL divergence from the variational posterior to the GP prior on latents."""
    kz = kz_matrix(X, X, sigma, with_jitter=True)
    lz = stable_cholesky(kz)
    return _kl_given_chol(q, lz)


def _kl_given_chol(q: VariationalState, lz) -> float:
    n = q.n
    total = 0.0
    logdets = q.log_dets()
    for j in range(q.k_z):
        half_l = lz.half_solve(q.cov_chols[j])
        half_mu = lz.half_solve(q.mu[:, j])
        total += 0.5 * (
            float(np.sum(half_l * half_l))
            + float(half_mu @ half_mu)
            - n
            + lz.log_det
            - logdets[j]
        )
    return float(total)


def elbo(Y: np.ndarray, X: np.ndarray, q: VariationalState, xi: HyperParams) -> float:
    """Evidence lower bound: collapsed likelihood bound minus the latent KL."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    return collapsed_bound(Y, q, xi.theta, xi.beta) - kl_qz_prior(q, X, xi.sigma)


def elbo_gradient(
    Y: np.ndarray, X: np.ndarray, q: VariationalState, xi: HyperParams
) -> np.ndarray:
    """Gradient of the bound with respect to the packed variational vector.

    The packing is the one produced by :meth:`VariationalState.pack`:
    means, covariance-factor lower triangles, inducing locations.
    """
    kz = kz_matrix(X, X, xi.sigma, with_jitter=True)
    lz = stable_cholesky(kz)
    _, grad = _elbo_and_gradient(np.atleast_2d(np.asarray(Y, float)), q, xi, lz)
    return grad


def _elbo_and_gradient(Y: np.ndarray, q: VariationalState, xi: HyperParams, lz):
    beta = xi.beta
    theta = xi.theta
    n, k_y = Y.shape
    k_z, m = q.k_z, q.m
    th = theta.precisions

    bound, ctx = _bound_internals(Y, q, theta, beta)
    kl = _kl_given_chol(q, lz)

    lu, lb = ctx["lu"], ctx["lb"]
    psi1, psi2 = ctx["psi1"], ctx["psi2"]
    c_sol = ctx["c_sol"]
    eye_m = np.eye(m)
    b_inv = lb.solve(eye_m)
    ku_inv = lu.solve(eye_m)

    # adjoints of the bound with respect to the kernel expectations
    g_b = -0.5 * k_y * b_inv - 0.5 * beta**2 * (c_sol @ c_sol.T)
    g_psi1 = beta**2 * (Y @ c_sol.T)  # (N, M)
    g_psi2 = beta * g_b + 0.5 * k_y * beta * ku_inv
    kinv_psi2_kinv = lu.solve(ctx["kuinv_psi2"].T)
    g_ku = 0.5 * k_y * ku_inv + g_b - 0.5 * k_y * beta * kinv_psi2_kinv

    s, c, d, e, delta, r, t_terms = (
        ctx["s"],
        ctx["c"],
        ctx["d"],
        ctx["e"],
        ctx["delta"],
        ctx["r"],
        ctx["t"],
    )

    d_mu = np.zeros((n, k_z))
    d_s = np.zeros((n, k_z))
    d_zu = np.zeros((m, k_z))

    p1 = g_psi1 * psi1  # (N, M)
    wt = g_psi2[None, :, :] * t_terms  # (N, M, M)
    ku_raw = ctx["ku"] - INDUCING_JITTER * np.eye(m)
    gk = g_ku * ku_raw

    for j in range(k_z):
        thj = th[j]
        cj = c[:, j][:, None]  # (N,1)
        ej = e[:, j]
        dj = d[:, :, j]  # (N, M)
        rj = r[:, :, :, j]  # (N, M, M)
        deltaj = delta[:, :, j]  # (M, M)

        a1 = thj * dj / cj
        d_mu[:, j] += -np.sum(p1 * a1, axis=1)
        d_zu[:, j] += np.sum(p1 * a1, axis=0)
        b1 = (thj / (2.0 * cj)) * (thj * dj * dj / cj - 1.0)
        d_s[:, j] += np.sum(p1 * b1, axis=1)

        inv_e = 1.0 / ej
        d_mu[:, j] += -2.0 * thj * inv_e * np.sum(wt * rj, axis=(1, 2))
        d_s[:, j] += np.sum(
            wt * (-thj * inv_e[:, None, None] + 2.0 * thj**2 * rj * rj * inv_e[:, None, None] ** 2),
            axis=(1, 2),
        )
        wt_sum = wt.sum(axis=0)  # (M, M)
        d_zu[:, j] += -thj * np.sum(wt_sum * deltaj, axis=1)
        d_zu[:, j] += 2.0 * thj * np.sum(wt * rj * inv_e[:, None, None], axis=(0, 2))

        d_zu[:, j] += -2.0 * thj * np.sum(gk * deltaj, axis=1)

    # KL adjoints (subtracted: elbo = bound - kl)
    rows, cols = np.tril_indices(n)
    mu_parts = []
    tri_parts = []
    for j in range(k_z):
        kinv_mu = lz.solve(q.mu[:, j])
        mu_parts.append(d_mu[:, j] - kinv_mu)
        lj = q.cov_chols[j]
        dl = 2.0 * d_s[:, j][:, None] * lj  # fit term through marginal variances
        kl_dl = lz.solve(lj)
        kl_dl[np.arange(n), np.arange(n)] -= 1.0 / np.diag(lj)
        tri_parts.append((dl - kl_dl)[rows, cols])

    grad = np.concatenate(mu_parts + tri_parts + [d_zu.ravel()])
    return float(bound - kl), grad


def elbo_hyper_gradient(
    Y: np.ndarray, X: np.ndarray, q: VariationalState, xi: HyperParams
) -> np.ndarray:
    """Gradient of the bound with respect to the natural hyperparameters.

    Components follow the canonical order: input precisions, latent
    precisions, signal variance, noise precision.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    kz_raw = kz_matrix(X, X, xi.sigma, with_jitter=False)
    kz = kz_raw + xi.sigma.jitter * np.eye(kz_raw.shape[0])
    lz = stable_cholesky(kz)
    _, _, grad_hyper = _elbo_and_all_gradients(Y, X, q, xi, lz, kz_raw)
    return grad_hyper


def _elbo_and_all_gradients(Y, X, q, xi, lz, kz_raw):
    """Bound value with gradients for both variational and hyper parameters."""
    value, grad_var = _elbo_and_gradient(Y, q, xi, lz)
    beta, theta = xi.beta, xi.theta
    n, k_y = Y.shape
    k_z, m = q.k_z, q.m
    th = theta.precisions

    bound, ctx = _bound_internals(Y, q, theta, beta)
    lu, lb = ctx["lu"], ctx["lb"]
    psi1, psi2 = ctx["psi1"], ctx["psi2"]
    c_sol = ctx["c_sol"]
    eye_m = np.eye(m)
    b_inv = lb.solve(eye_m)
    ku_inv = lu.solve(eye_m)
    g_b = -0.5 * k_y * b_inv - 0.5 * beta**2 * (c_sol @ c_sol.T)
    g_psi1 = beta**2 * (Y @ c_sol.T)
    g_psi2 = beta * g_b + 0.5 * k_y * beta * ku_inv
    kinv_psi2_kinv = lu.solve(ctx["kuinv_psi2"].T)
    g_ku = 0.5 * k_y * ku_inv + g_b - 0.5 * k_y * beta * kinv_psi2_kinv
    psi0 = n * theta.signal_variance

    s, c, d, e, delta, r, t_terms = (
        ctx["s"], ctx["c"], ctx["d"], ctx["e"], ctx["delta"], ctx["r"], ctx["t"],
    )
    p1 = g_psi1 * psi1
    wt = g_psi2[None, :, :] * t_terms
    ku_raw = ctx["ku"] - INDUCING_JITTER * eye_m
    gk = g_ku * ku_raw

    # noise precision: explicit terms plus the B = K_u + beta psi2 route
    w_mat = psi1.T @ Y
    d_beta = (
        0.5 * k_y * n / beta
        - 0.5 * float(np.sum(Y * Y))
        + beta * float(np.sum(w_mat * c_sol))
        - 0.5 * k_y * psi0
        + 0.5 * k_y * float(np.trace(ctx["kuinv_psi2"]))
        + float(np.sum(g_b * psi2))
    )

    # signal variance: the kernel expectations scale linearly or quadratically
    d_theta_s = (
        float(np.sum(p1)) + 2.0 * float(np.sum(g_psi2 * psi2)) + float(np.sum(gk))
    ) / theta.signal_variance - 0.5 * beta * k_y * n

    d_theta = np.zeros(k_z)
    for j in range(k_z):
        sj = s[:, j]
        cj = c[:, j]
        ej = e[:, j]
        dj = d[:, :, j]
        rj = r[:, :, :, j]
        deltaj = delta[:, :, j]
        term1 = -0.5 * np.sum(p1 * (sj[:, None] / cj[:, None] + dj * dj / cj[:, None] ** 2))
        term2 = -np.sum(
            wt
            * (
                (sj / ej)[:, None, None]
                + 0.25 * (deltaj * deltaj)[None, :, :]
                + rj * rj / (ej[:, None, None] ** 2)
            )
        )
        term3 = -0.5 * np.sum(gk * (deltaj * deltaj))
        d_theta[j] = term1 + term2 + term3

    # input precisions act only through the latent-prior KL
    a_total = np.zeros((q.n, q.n))
    for j in range(k_z):
        lj = q.cov_chols[j]
        a_total += lj @ lj.T + np.outer(q.mu[:, j], q.mu[:, j])
    kz_inv = lz.solve(np.eye(q.n))
    m_mat = kz_inv @ a_total @ kz_inv
    dkl_dk = 0.5 * (k_z * kz_inv - m_mat)
    d_sigma = np.zeros(xi.k_x)
    for l in range(xi.k_x):
        dx2 = (X[:, l][:, None] - X[:, l][None, :]) ** 2
        d_sigma[l] = 0.5 * float(np.sum(dkl_dk * kz_raw * dx2))

    grad_hyper = np.concatenate([d_sigma, d_theta, [d_theta_s, d_beta]])
    return value, grad_var, grad_hyper


# -- optimizers --------------------------------------------------------------


def fit_variational(
    Y: np.ndarray,
    X: np.ndarray,
    xi: HyperParams,
    q0: VariationalState | None = None,
    *,
    n_inducing: int | None = None,
    rng: np.random.Generator | None = None,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> FitResult:
    """Maximize the bound over the variational parameters with fixed hyperparameters.

    Quasi-Newton ascent with the analytic gradient; the trace of accepted
    iterates is non-decreasing. Raises if the optimizer lands on a
    non-finite bound.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if q0 is None:
        if rng is None:
            rng = np.random.default_rng(0)
        m = n_inducing if n_inducing is not None else min(Y.shape[0], 20)
        q0 = initial_state(Y, xi.k_z, m, rng)
    kz = kz_matrix(X, X, xi.sigma, with_jitter=True)
    lz = stable_cholesky(kz)
    template = q0.copy()

    last: dict = {}

    def objective(vec):
        try:
            state = template.unpack(vec)
            value, grad = _elbo_and_gradient(Y, state, xi, lz)
        except (np.linalg.LinAlgError, ValueError):
            return _BAD_VALUE, np.zeros_like(vec)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return _BAD_VALUE, np.zeros_like(vec)
        last["x"] = np.array(vec)
        last["f"] = value
        return -value, -grad

    trace = []

    def callback(xk):
        if "x" in last and np.array_equal(last["x"], xk):
            trace.append(last["f"])
        else:
            val, _ = objective(xk)
            trace.append(-val)

    x0 = q0.pack()
    f0, _ = objective(x0)
    if f0 >= _BAD_VALUE:
        raise ValueError("bound is non-finite at the initial variational state")
    trace.append(-f0)
    res = minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={"maxiter": max_iter, "ftol": tol * 1e-3, "gtol": 1e-8},
    )
    state = template.unpack(res.x)
    final, _ = _elbo_and_gradient(Y, state, xi, lz)
    if not np.isfinite(final):
        raise ValueError(
            f"optimization ended at a non-finite bound after {res.nit} iterations"
        )
    trace.append(final)
    return FitResult(
        state=state,
        elbo=float(final),
        trace=np.asarray(trace),
        n_iter=int(res.nit),
        converged=bool(res.success),
    )


def _default_hyper(Y: np.ndarray, X: np.ndarray, k_z: int, jitter: float) -> HyperParams:
    med = np.median((X[:, None, :] - X[None, :, :]) ** 2, axis=(0, 1))
    med[med < 1e-12] = 1.0
    y_var = float(np.var(Y))
    if y_var <= 0:
        y_var = 1.0
    return HyperParams(
        sigma=SigmaKernelParams(1.0 / med, jitter=jitter),
        theta=ThetaKernelParams(y_var, np.ones(k_z)),
        beta=100.0 / y_var,
    )


def fit_ml(
    Y: np.ndarray,
    X: np.ndarray,
    k_z: int,
    *,
    n_inducing: int | None = None,
    rng: np.random.Generator | None = None,
    restarts: int = 1,
    rounds: int = 8,
    variational_max_iter: int = 300,
    hyper_max_iter: int = 60,
    tol: float = 1e-4,
    jitter: float = DEFAULT_JITTER,
    init_hyper: HyperParams | None = None,
    strategy: str = "joint",
) -> MLFit:
    """Type-II maximum likelihood over variational and hyperparameters.

    ``strategy="joint"`` runs one gradient ascent over everything at once,
    the way standard variational GPLVM toolboxes train; ``"alternate"``
    interleaves full variational fits with hyperparameter passes, which is
    slower but tends to escape poor optima. Each restart perturbs the
    initial hyperparameters; the restart with the best final bound wins.
    """
    if strategy not in ("joint", "alternate"):
        raise ValueError(f"strategy must be 'joint' or 'alternate', got {strategy!r}")
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if rng is None:
        rng = np.random.default_rng(0)
    n = Y.shape[0]
    m = n_inducing if n_inducing is not None else min(n, 20)
    base = init_hyper if init_hyper is not None else _default_hyper(Y, X, k_z, jitter)

    best: MLFit | None = None
    restart_elbos: list[float] = []
    for attempt in range(max(1, restarts)):
        vec = base.to_vector()
        if attempt > 0:
            vec = vec * np.exp(0.5 * rng.standard_normal(vec.size))
        xi = base.replace_vector(vec)
        q = initial_state(Y, k_z, m, rng)
        if strategy == "joint":
            xi, q, current = _fit_joint(
                Y, X, xi, q, max_iter=rounds * variational_max_iter
            )
        else:
            current = -np.inf
            for _ in range(rounds):
                fit = fit_variational(
                    Y, X, xi, q0=q, max_iter=variational_max_iter, tol=1e-7
                )
                q = fit.state
                xi, value = _optimize_hyper(Y, X, q, xi, max_iter=hyper_max_iter)
                if value - current < tol * max(1.0, abs(value)):
                    current = value
                    break
                current = value
        restart_elbos.append(float(current))
        if best is None or current > best.elbo:
            best = MLFit(hyper=xi, state=q, elbo=float(current))
    assert best is not None
    best.restart_elbos = restart_elbos
    return best


def _fit_joint(Y, X, xi0: HyperParams, q0: VariationalState, max_iter: int):
    """Simultaneous gradient ascent over variational and log hyperparameters."""
    template = q0.copy()
    k_x, k_z = xi0.k_x, xi0.k_z
    jitter = xi0.sigma.jitter
    n_var = q0.pack().size
    eye = np.eye(q0.n)

    def objective(vec):
        try:
            state = template.unpack(vec[:n_var])
            xi = HyperParams.from_vector(np.exp(vec[n_var:]), k_x, k_z, jitter=jitter)
            kz_raw = kz_matrix(X, X, xi.sigma, with_jitter=False)
            lz = stable_cholesky(kz_raw + jitter * eye)
            value, g_var, g_hyper = _elbo_and_all_gradients(Y, X, state, xi, lz, kz_raw)
        except (np.linalg.LinAlgError, ValueError):
            return _BAD_VALUE, np.zeros_like(vec)
        if not np.isfinite(value):
            return _BAD_VALUE, np.zeros_like(vec)
        grad = np.concatenate([g_var, g_hyper * np.exp(vec[n_var:])])
        if not np.all(np.isfinite(grad)):
            return _BAD_VALUE, np.zeros_like(vec)
        return -value, -grad

    x0 = np.concatenate([q0.pack(), np.log(xi0.to_vector())])
    bounds = [(None, None)] * n_var + [(-13.8, 13.8)] * (k_x + k_z + 2)
    res = minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": max_iter, "ftol": 1e-10, "gtol": 1e-7},
    )
    state = template.unpack(res.x[:n_var])
    xi = HyperParams.from_vector(np.exp(res.x[n_var:]), k_x, k_z, jitter=jitter)
    value, _ = objective(res.x)
    return xi, state, float(-value)


def _optimize_hyper(
    Y: np.ndarray,
    X: np.ndarray,
    q: VariationalState,
    xi: HyperParams,
    max_iter: int = 60,
) -> tuple[HyperParams, float]:
    """One L-BFGS pass over log hyperparameters with the variational state fixed."""
    kz0 = xi.to_vector()
    k_x, k_z = xi.k_x, xi.k_z
    jitter = xi.sigma.jitter

    def objective(log_vec):
        try:
            cand = HyperParams.from_vector(np.exp(log_vec), k_x, k_z, jitter=jitter)
            value = (
                collapsed_bound(Y, q, cand.theta, cand.beta)
                - kl_qz_prior(q, X, cand.sigma)
            )
        except (np.linalg.LinAlgError, ValueError):
            return _BAD_VALUE
        if not np.isfinite(value):
            return _BAD_VALUE
        return -value

    res = minimize(
        objective,
        np.log(kz0),
        method="L-BFGS-B",
        bounds=[(-13.8, 13.8)] * kz0.size,
        options={"maxiter": max_iter},
    )
    out = HyperParams.from_vector(np.exp(res.x), k_x, k_z, jitter=jitter)
    value = -objective(res.x)
    if value <= -_BAD_VALUE:
        return xi, -objective(np.log(kz0))
    return out, float(value)
