"""Independent reference implementations used to check the library.

Everything here is written from first principles with dense linear algebra
(explicit inverses, scipy distributions, tensor-grid quadrature) and does not
call into the package's computational paths.
"""

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, norm


def se_cov(a, b, precisions, amplitude=1.0):
    """Dense squared-exponential covariance between two point sets."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2 * np.asarray(precisions)).sum(-1)
    return amplitude * np.exp(-0.5 * d2)


def gh_grid(n_dims, nodes):
    """Probabilists' Gauss-Hermite tensor grid: standard-normal points and log weights."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    point_grids = np.meshgrid(*([x] * n_dims), indexing="ij")
    eps = np.stack([g.ravel() for g in point_grids], axis=-1)
    weight_grids = np.meshgrid(*([np.log(w)] * n_dims), indexing="ij")
    logw = sum(g.ravel() for g in weight_grids) - 0.5 * n_dims * np.log(2 * np.pi)
    return eps, logw


def _batched_gp_loglik(Y, Z_batch, theta_s, theta_prec, beta):
    """log p(Y | Z) for a batch of latent matrices, dense per-batch Cholesky."""
    n, k_y = Y.shape
    d2 = ((Z_batch[:, :, None, :] - Z_batch[:, None, :, :]) ** 2 * theta_prec).sum(-1)
    Kf = theta_s * np.exp(-0.5 * d2) + np.eye(n) / beta
    L = np.linalg.cholesky(Kf)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(-1)
    sol = np.linalg.solve(L, np.broadcast_to(Y, (Z_batch.shape[0], n, k_y)))
    quad = (sol**2).sum(axis=(-2, -1))
    return -0.5 * (k_y * n * np.log(2 * np.pi) + k_y * logdet + quad)


def gh_log_marginal(Y, X, sigma_prec, jitter, theta_s, theta_prec, beta, nodes=50):
    """Quadrature of the marginal likelihood over the latent prior (k_z = 1)."""
    Y = np.atleast_2d(Y)
    X = np.atleast_2d(X)
    n = X.shape[0]
    Kz = se_cov(X, X, sigma_prec) + jitter * np.eye(n)
    Lz = np.linalg.cholesky(Kz)
    eps, logw = gh_grid(n, nodes)
    Z = (eps @ Lz.T)[:, :, None]  # (B, n, 1)
    logp = _batched_gp_loglik(Y, Z, theta_s, np.atleast_1d(theta_prec), beta)
    return float(logsumexp(logw + logp))


def gh_latent_posterior_moments(Y, X, sigma_prec, jitter, theta_s, theta_prec, beta, nodes=60):
    """Posterior mean and second moment of the latent vector (k_z = 1)."""
    Y = np.atleast_2d(Y)
    X = np.atleast_2d(X)
    n = X.shape[0]
    Kz = se_cov(X, X, sigma_prec) + jitter * np.eye(n)
    Lz = np.linalg.cholesky(Kz)
    eps, logw = gh_grid(n, nodes)
    Zflat = eps @ Lz.T  # (B, n)
    logp = _batched_gp_loglik(Y, Zflat[:, :, None], theta_s, np.atleast_1d(theta_prec), beta)
    logpost = logw + logp
    logpost -= logsumexp(logpost)
    w = np.exp(logpost)
    mean = w @ Zflat
    second = np.einsum("b,bi,bj->ij", w, Zflat, Zflat)
    return mean, second


def dense_gaussian_logpdf_columns(cols, cov):
    """Naive per-column zero-mean Gaussian log-density via scipy."""
    cols = np.atleast_2d(cols)
    mvn = multivariate_normal(mean=np.zeros(cov.shape[0]), cov=cov)
    return float(sum(mvn.logpdf(cols[:, i]) for i in range(cols.shape[1])))


def block_diag_gaussian_logpdf(Y, cov):
    """Joint Gaussian over the stacked columns with block-diagonal covariance."""
    Y = np.atleast_2d(Y)
    n, k_y = Y.shape
    big = np.zeros((n * k_y, n * k_y))
    for i in range(k_y):
        big[i * n : (i + 1) * n, i * n : (i + 1) * n] = cov
    return float(multivariate_normal(mean=np.zeros(n * k_y), cov=big).logpdf(Y.T.ravel()))


def dense_conditional(joint_cov, obs_idx, test_idx, obs_values):
    """Conditional mean and covariance of a zero-mean joint Gaussian."""
    joint_cov = np.asarray(joint_cov)
    obs_idx = list(obs_idx)
    test_idx = list(test_idx)
    S_oo = joint_cov[np.ix_(obs_idx, obs_idx)]
    S_to = joint_cov[np.ix_(test_idx, obs_idx)]
    S_tt = joint_cov[np.ix_(test_idx, test_idx)]
    S_oo_inv = np.linalg.inv(S_oo)
    mean = S_to @ S_oo_inv @ np.asarray(obs_values)
    cov = S_tt - S_to @ S_oo_inv @ S_to.T
    return mean, cov


def gaussian_kl(m0, S0, m1, S1):
    """KL(N(m0, S0) || N(m1, S1)) with dense inverses and slogdet."""
    m0, m1 = np.asarray(m0, float), np.asarray(m1, float)
    S1_inv = np.linalg.inv(S1)
    _, ld1 = np.linalg.slogdet(S1)
    _, ld0 = np.linalg.slogdet(S0)
    d = m0.size
    diff = m1 - m0
    return 0.5 * (np.trace(S1_inv @ S0) + diff @ S1_inv @ diff - d + ld1 - ld0)


def batch_means_se(x, n_batches=40):
    """Standard error of the mean of a correlated sequence via batch means."""
    x = np.asarray(x, float)
    usable = (x.shape[0] // n_batches) * n_batches
    batches = x[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(batches.std(ddof=1) / np.sqrt(n_batches))


def normal_density_grid(grid, mean, sd):
    return norm.pdf(np.asarray(grid), loc=mean, scale=sd)
