import math

import numpy as np
import pytest

from conftest import random_hyper, random_state
from oracles import gaussian_kl, gh_log_marginal, se_cov
from sgplvm import (
    HyperParams,
    SigmaKernelParams,
    ThetaKernelParams,
    VariationalState,
    collapsed_bound,
    elbo,
    elbo_gradient,
    fit_ml,
    fit_variational,
    kl_qz_prior,
    log_py_given_z,
    psi_statistics,
)
from sgplvm.kernels import kf_matrix, kz_matrix, stable_cholesky
from sgplvm.simdata import SinusoidalSpec, generate
from sgplvm.variational import _elbo_and_gradient, initial_state


def tiny_quadrature(Y, X, xi, nodes=45):
    return gh_log_marginal(
        Y,
        X,
        xi.sigma.precisions,
        xi.sigma.jitter,
        xi.theta.signal_variance,
        xi.theta.precisions,
        xi.beta,
        nodes=nodes,
    )


class TestPsiStatistics:
    def test_psi0_is_trace_expectation(self, rng):
        q = random_state(rng, n=5, k_z=2, m=3)
        theta = ThetaKernelParams(2.3, np.array([0.7, 1.1]))
        assert psi_statistics(q, theta).psi0 == pytest.approx(5 * 2.3, rel=1e-14)

    def test_degenerate_q_collapses_to_kernel(self, rng):
        n, k_z, m = 5, 2, 3
        mu = rng.standard_normal((n, k_z))
        chols = np.tile(math.sqrt(1e-14) * np.eye(n), (k_z, 1, 1))
        zu = rng.standard_normal((m, k_z))
        q = VariationalState(mu, chols, zu)
        theta = ThetaKernelParams(1.5, np.array([0.9, 1.4]))
        stats = psi_statistics(q, theta)
        np.testing.assert_allclose(stats.psi1, kf_matrix(mu, zu, theta), atol=1e-6)

    def test_monte_carlo_agreement(self, rng):
        # closed forms match sampling under the full-covariance posterior
        theta = ThetaKernelParams(1.3, np.array([0.8, 1.6]))
        n_draws = 200000
        for _ in range(20):
            q = random_state(rng, n=4, k_z=2, m=2)
            stats = psi_statistics(q, theta)
            draws, _ = q.sample(rng, n_draws)
            diff = draws[:, :, None, :] - q.inducing[None, None, :, :]
            kf = theta.signal_variance * np.exp(
                -0.5 * np.einsum("snmk,k->snm", diff**2, theta.precisions)
            )
            psi1_mc = kf.mean(axis=0)
            se1 = kf.std(axis=0) / math.sqrt(n_draws)
            assert np.all(np.abs(psi1_mc - stats.psi1) <= 4.0 * se1 + 1e-12)
            prod = np.einsum("snm,snl->sml", kf, kf)
            psi2_mc = prod.mean(axis=0)
            se2 = prod.std(axis=0) / math.sqrt(n_draws)
            assert np.all(np.abs(psi2_mc - stats.psi2) <= 4.0 * se2 + 1e-12)

    def test_psi2_symmetric_psd(self, rng):
        q = random_state(rng, n=6, k_z=2, m=4)
        theta = ThetaKernelParams(1.1, np.array([0.5, 2.0]))
        psi2 = psi_statistics(q, theta).psi2
        assert np.allclose(psi2, psi2.T, atol=1e-12)
        assert np.min(np.linalg.eigvalsh(psi2)) > -1e-10


class TestCollapsedBound:
    def test_below_quadrature_marginal(self, rng):
        for _ in range(10):
            xi = random_hyper(rng, k_x=1, k_z=1)
            n = int(rng.integers(2, 4))
            X = rng.uniform(0, 2, (n, 1))
            Y = 0.7 * rng.standard_normal((n, 1))
            q = random_state(rng, n=n, k_z=1, m=n)
            bound = collapsed_bound(Y, q, xi.theta, xi.beta) - kl_qz_prior(q, X, xi.sigma)
            assert bound <= tiny_quadrature(Y, X, xi) + 1e-9

    def test_degenerate_q_recovers_exact_likelihood(self, rng):
        n, k_z = 6, 2
        mu = 1.5 * rng.standard_normal((n, k_z))
        chols = np.tile(math.sqrt(1e-9) * np.eye(n), (k_z, 1, 1))
        q = VariationalState(mu, chols, mu.copy())
        theta = ThetaKernelParams(1.4, np.array([0.8, 1.2]))
        Y = rng.standard_normal((n, 3))
        bound = collapsed_bound(Y, q, theta, 4.0)
        exact = log_py_given_z(Y, mu, theta, 4.0)
        assert bound == pytest.approx(exact, abs=1e-4)
        assert bound <= exact + 1e-12

    def test_duplicating_features_doubles_bound(self, rng):
        q = random_state(rng, n=5, k_z=1, m=3)
        theta = ThetaKernelParams(1.0, np.array([1.0]))
        Y = rng.standard_normal((5, 2))
        one = collapsed_bound(Y, q, theta, 2.0)
        two = collapsed_bound(np.hstack([Y, Y]), q, theta, 2.0)
        assert two == pytest.approx(2.0 * one, rel=1e-12)


class TestKlQzPrior:
    def test_zero_at_prior(self, rng):
        X = rng.uniform(0, 3, (5, 1))
        sigma = SigmaKernelParams(np.array([0.8]))
        kz = kz_matrix(X, X, sigma, with_jitter=True)
        L = np.linalg.cholesky(kz)
        q = VariationalState(np.zeros((5, 2)), np.tile(L, (2, 1, 1)), np.zeros((3, 2)))
        assert kl_qz_prior(q, X, sigma) == pytest.approx(0.0, abs=1e-9)

    def test_non_negative(self, rng):
        for _ in range(10):
            X = rng.uniform(0, 3, (4, 1))
            sigma = SigmaKernelParams(rng.uniform(0.3, 2.0, 1))
            q = random_state(rng, n=4, k_z=2, m=2)
            assert kl_qz_prior(q, X, sigma) >= 0.0

    def test_against_dense_kl_oracle(self, rng):
        X = rng.uniform(0, 2, (2, 1))
        sigma = SigmaKernelParams(np.array([1.1]))
        q = random_state(rng, n=2, k_z=2, m=2)
        kz = se_cov(X, X, sigma.precisions) + sigma.jitter * np.eye(2)
        expected = sum(
            gaussian_kl(q.mu[:, j], q.covariances()[j], np.zeros(2), kz) for j in range(2)
        )
        assert kl_qz_prior(q, X, sigma) == pytest.approx(expected, rel=1e-9)


class TestElbo:
    def test_below_quadrature(self, rng):
        for _ in range(20):
            xi = random_hyper(rng, k_x=1, k_z=1)
            n = int(rng.integers(2, 4))
            X = rng.uniform(0, 2, (n, 1))
            Y = 0.6 * rng.standard_normal((n, 2))
            q = random_state(rng, n=n, k_z=1, m=max(2, n - 1))
            assert elbo(Y, X, q, xi) <= tiny_quadrature(Y, X, xi) + 1e-9

    def test_equals_components(self, rng):
        xi = random_hyper(rng, k_x=1, k_z=2)
        X = rng.uniform(0, 2, (4, 1))
        Y = rng.standard_normal((4, 2))
        q = random_state(rng, n=4, k_z=2, m=3)
        assert elbo(Y, X, q, xi) == pytest.approx(
            collapsed_bound(Y, q, xi.theta, xi.beta) - kl_qz_prior(q, X, xi.sigma),
            rel=1e-14,
        )

    def test_scalar_case_closed_form(self):
        # single point: the exact marginal is N(y | 0, s + 1/beta) whatever the
        # latent is, the bound sits below it, and growing noise closes the gap
        theta = ThetaKernelParams(1.3, np.array([0.9]))
        mu = np.array([[0.4]])
        chol = np.array([[[0.8]]])
        zu = np.array([[-0.2]])
        q = VariationalState(mu, chol, zu)
        y = np.array([[0.0]])
        gaps = []
        for beta in [10.0, 1.0, 0.1, 0.01]:
            exact = -0.5 * math.log(2 * math.pi * (1.3 + 1.0 / beta))
            bound = collapsed_bound(y, q, theta, beta)
            assert bound <= exact + 1e-12
            gaps.append(exact - bound)
        assert gaps == sorted(gaps, reverse=True)
        assert gaps[-1] < 1e-3


class TestElboGradient:
    def test_matches_finite_differences(self, rng):
        h = 1e-5
        for _ in range(10):
            n = int(rng.integers(3, 5))
            k_z = int(rng.integers(1, 3))
            m = int(rng.integers(2, n + 1))
            k_y = int(rng.integers(1, 4))
            xi = random_hyper(rng, k_x=1, k_z=k_z)
            X = rng.uniform(0, 3, (n, 1))
            Y = rng.standard_normal((n, k_y))
            q = random_state(rng, n=n, k_z=k_z, m=m)
            grad = elbo_gradient(Y, X, q, xi)
            vec = q.pack()
            for i in range(vec.size):
                vp, vm = vec.copy(), vec.copy()
                vp[i] += h
                vm[i] -= h
                fd = (elbo(Y, X, q.unpack(vp), xi) - elbo(Y, X, q.unpack(vm), xi)) / (2 * h)
                rel = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6)
                assert rel <= 1e-4, f"coordinate {i}: fd={fd}, grad={grad[i]}"

    def test_mu_gradient_at_prior_matched_q(self, rng):
        # KL contributes nothing to the mean gradient when q matches the prior
        X = rng.uniform(0, 3, (4, 1))
        sigma = SigmaKernelParams(np.array([0.9]))
        kz = kz_matrix(X, X, sigma, with_jitter=True)
        L = np.linalg.cholesky(kz)
        q = VariationalState(np.zeros((4, 1)), L[None], rng.standard_normal((2, 1)))
        xi = HyperParams(sigma, ThetaKernelParams(1.2, np.array([0.8])), beta=3.0)
        Y = rng.standard_normal((4, 2))
        lz = stable_cholesky(kz)
        full = elbo_gradient(Y, X, q, xi)[:4]
        _, fit_only = _elbo_and_gradient(Y, q, HyperParams(sigma, xi.theta, xi.beta), lz)
        # reconstruct the fit-term mean gradient by adding back the KL part (zero here)
        np.testing.assert_allclose(full, fit_only[:4], atol=1e-12)

    def test_duplicated_features_double_fit_gradient(self, rng):
        # elbo = fit - kl and doubling Y doubles only the fit part, so the
        # gradient difference g(YY) - 2 g(Y) must equal the KL gradient
        X = rng.uniform(0, 2, (4, 1))
        xi = random_hyper(rng, k_x=1, k_z=1)
        Y = rng.standard_normal((4, 2))
        q = random_state(rng, n=4, k_z=1, m=3)
        g1 = elbo_gradient(Y, X, q, xi)
        g2 = elbo_gradient(np.hstack([Y, Y]), X, q, xi)
        h = 1e-6
        vec = q.pack()
        kl_grad = np.zeros_like(vec)
        for i in range(vec.size):
            vp, vm = vec.copy(), vec.copy()
            vp[i] += h
            vm[i] -= h
            kl_grad[i] = (
                kl_qz_prior(q.unpack(vp), X, xi.sigma) - kl_qz_prior(q.unpack(vm), X, xi.sigma)
            ) / (2 * h)
        np.testing.assert_allclose(g2 - 2.0 * g1, kl_grad, rtol=1e-5, atol=1e-3)


class TestFitVariational:
    def test_monotone_ascent_from_init(self, rng):
        ds, _ = generate(SinusoidalSpec(n_points=12, seed=3))
        xi = random_hyper(rng, k_x=1, k_z=2)
        q0 = initial_state(ds.Y, 2, 6, rng)
        fit = fit_variational(ds.Y, ds.X, xi, q0=q0, max_iter=100)
        assert fit.elbo >= fit.trace[0]
        drops = np.diff(fit.trace)
        assert np.all(drops >= -1e-7 * np.maximum(1.0, np.abs(fit.trace[:-1])))

    def test_recovers_linear_subspace(self, rng):
        # noiseless rank-2 linear outputs from latents that respect the smooth
        # prior on Z: fitted means stay in the PCA score plane
        n = 20
        x = np.linspace(0, 4, n)
        latents = np.column_stack([np.sin(1.3 * x), np.cos(0.7 * x)])
        latents -= latents.mean(axis=0)
        basis = rng.standard_normal((2, 6))
        Y = latents @ basis
        X = x[:, None]
        # long latent lengthscales keep the map near-linear, where the
        # probabilistic-PCA correspondence holds
        xi = HyperParams(
            SigmaKernelParams(np.array([1.0])),
            ThetaKernelParams(35.0, np.array([0.02, 0.02])),
            beta=1e4,
        )
        fit = fit_variational(Y, X, xi, q0=initial_state(Y, 2, 10, rng), max_iter=800)
        u, _, _ = np.linalg.svd(Y - Y.mean(0), full_matrices=False)
        pca_scores = u[:, :2]
        from scipy.linalg import subspace_angles

        angles = subspace_angles(fit.state.mu, pca_scores)
        assert np.degrees(angles).max() < 5.0

    def test_fixed_point_rerun(self, rng):
        ds, _ = generate(SinusoidalSpec(n_points=10, seed=8))
        xi = random_hyper(rng, k_x=1, k_z=1)
        fit1 = fit_variational(ds.Y, ds.X, xi, q0=initial_state(ds.Y, 1, 5, rng), max_iter=400)
        fit2 = fit_variational(ds.Y, ds.X, xi, q0=fit1.state, max_iter=400)
        assert abs(fit2.elbo - fit1.elbo) < 1e-4 * max(1.0, abs(fit1.elbo))


@pytest.mark.slow
class TestFitMl:
    def test_ascent_and_best_restart(self, rng):
        ds, _ = generate(SinusoidalSpec(n_points=16, seed=21))
        fit = fit_ml(ds.Y, ds.X, 2, n_inducing=8, rng=rng, restarts=3, rounds=3,
                     variational_max_iter=120, hyper_max_iter=30)
        assert fit.elbo == pytest.approx(max(fit.restart_elbos))
        assert len(fit.restart_elbos) == 3

    def test_case1_noise_recovery(self, rng):
        ds, _ = generate(SinusoidalSpec(seed=11))
        fit = fit_ml(ds.Y, ds.X, 2, rng=rng, restarts=2, rounds=6)
        noise_var = 1.0 / fit.hyper.beta
        assert 0.5 * 0.0025 <= noise_var <= 2.0 * 0.0025
