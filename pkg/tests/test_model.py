import math

import numpy as np
import pytest
from scipy.stats import gamma as gamma_dist
from scipy.stats import norm

from conftest import random_hyper
from oracles import block_diag_gaussian_logpdf, se_cov
from sgplvm import (
    Dataset,
    GammaPrior,
    HyperParams,
    HyperPriors,
    SigmaKernelParams,
    ThetaKernelParams,
    log_joint,
    log_prior_hyper,
    log_py_given_z,
    log_pz_given_x,
)


class TestDataset:
    def test_row_mismatch(self):
        with pytest.raises(ValueError, match="row mismatch"):
            Dataset(X=np.zeros((3, 1)), Y=np.zeros((4, 1)))

    def test_needs_two_rows(self):
        with pytest.raises(ValueError, match="two observations"):
            Dataset(X=np.zeros((1, 1)), Y=np.zeros((1, 1)))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            Dataset(X=np.array([[0.0], [np.inf]]), Y=np.zeros((2, 1)))


class TestLogPyGivenZ:
    def test_scalar_at_mean(self):
        theta = ThetaKernelParams(1.7, np.array([1.0]))
        val = log_py_given_z(np.array([[0.0], [0.0]]), np.array([[0.0], [50.0]]), theta, 2.0)
        # distant latents make the covariance effectively diagonal
        expected = 2 * norm.logpdf(0.0, scale=math.sqrt(1.7 + 0.5))
        assert val == pytest.approx(expected, abs=1e-8)

    def test_scalar_value(self):
        theta = ThetaKernelParams(1.0, np.array([1.0]))
        val = log_py_given_z(
            np.array([[1.0], [0.0]]), np.array([[0.0], [100.0]]), theta, 1.0
        )
        expected = norm.logpdf(1.0, scale=math.sqrt(2.0)) + norm.logpdf(
            0.0, scale=math.sqrt(2.0)
        )
        assert val == pytest.approx(expected, abs=1e-8)
        assert norm.logpdf(1.0, scale=math.sqrt(2.0)) == pytest.approx(-1.515512, abs=1e-6)

    def test_identical_columns_double(self, rng):
        theta = ThetaKernelParams(1.2, np.array([0.8]))
        Z = rng.standard_normal((4, 1))
        y = rng.standard_normal((4, 1))
        single = log_py_given_z(y, Z, theta, 3.0)
        double = log_py_given_z(np.hstack([y, y]), Z, theta, 3.0)
        assert double == pytest.approx(2.0 * single, rel=1e-12)

    def test_against_block_diagonal_oracle(self, rng):
        for _ in range(5):
            n, k_y = rng.integers(2, 6), rng.integers(1, 4)
            Z = rng.standard_normal((n, 2))
            Y = rng.standard_normal((n, k_y))
            theta = ThetaKernelParams(1.4, np.array([0.9, 1.3]))
            beta = 2.5
            ours = log_py_given_z(Y, Z, theta, beta)
            cov = se_cov(Z, Z, theta.precisions, amplitude=1.4) + np.eye(n) / beta
            assert ours == pytest.approx(block_diag_gaussian_logpdf(Y, cov), abs=1e-8)

    def test_monotone_along_rays(self, rng):
        theta = ThetaKernelParams(1.0, np.array([1.0]))
        Z = rng.standard_normal((4, 1))
        y = rng.standard_normal((4, 2))
        scales = [0.0, 0.5, 1.0, 2.0, 4.0]
        vals = [log_py_given_z(c * y, Z, theta, 2.0) for c in scales]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestLogPzGivenX:
    def test_scalar(self):
        sigma = SigmaKernelParams(np.array([1.0]), jitter=1e-6)
        val = log_pz_given_x(np.array([[0.0], [0.0]]), np.array([[0.0], [100.0]]), sigma)
        expected = 2 * norm.logpdf(0.0, scale=math.sqrt(1.0 + 1e-6))
        assert val == pytest.approx(expected, abs=1e-10)

    def test_identical_columns_double(self, rng):
        sigma = SigmaKernelParams(np.array([0.5]))
        X = rng.standard_normal((5, 1))
        z = rng.standard_normal((5, 1))
        single = log_pz_given_x(z, X, sigma)
        double = log_pz_given_x(np.hstack([z, z]), X, sigma)
        assert double == pytest.approx(2.0 * single, rel=1e-12)

    def test_huge_precision_is_diagonal(self, rng):
        # numerically infinite precision decorrelates distinct inputs
        sigma = SigmaKernelParams(np.array([1e12]), jitter=1e-6)
        X = np.array([[0.0], [1.0]])
        z = rng.standard_normal((2, 1))
        ours = log_pz_given_x(z, X, sigma)
        iid = norm.logpdf(z, scale=math.sqrt(1.0 + 1e-6)).sum()
        assert ours == pytest.approx(iid, abs=1e-8)

    def test_monotone_along_rays(self, rng):
        sigma = SigmaKernelParams(np.array([0.7]))
        X = rng.standard_normal((4, 1))
        z = rng.standard_normal((4, 1))
        vals = [log_pz_given_x(c * z, X, sigma) for c in [0.0, 1.0, 3.0]]
        assert vals[0] >= vals[1] >= vals[2]


class TestGammaPrior:
    def test_unit_case(self):
        assert GammaPrior(1.0, 1.0).logpdf(1.0) == pytest.approx(-1.0, abs=1e-14)

    def test_prior_mean_support(self):
        p = GammaPrior(3.0, 1.0 / 3.0)
        assert p.mean == pytest.approx(1.0)
        assert np.isfinite(p.logpdf(p.mean))

    def test_lengthscale_prior_value(self):
        p = GammaPrior(2.0, 10.0)
        assert p.logpdf(20.0) == pytest.approx(math.log(20.0) - 2.0 - math.log(100.0), abs=1e-12)

    def test_matches_scipy(self, rng):
        for _ in range(10):
            a, b = rng.uniform(0.5, 5.0), rng.uniform(0.1, 10.0)
            x = rng.uniform(0.01, 20.0)
            assert GammaPrior(a, b).logpdf(x) == pytest.approx(
                gamma_dist.logpdf(x, a, scale=b), abs=1e-10
            )

    def test_nonpositive_is_rejected_region(self):
        p = GammaPrior(2.0, 1.0)
        assert p.logpdf(0.0) == -np.inf
        assert p.logpdf(-1.0) == -np.inf


class TestHyperPriors:
    def _priors(self, k_x=1, k_z=2, beta_on="precision"):
        return HyperPriors.broadcast(
            k_x,
            k_z,
            sigma=GammaPrior(2.0, 10.0),
            theta=GammaPrior(2.0, 10.0),
            theta_s=GammaPrior(2.0, 1.0),
            beta=GammaPrior(2.0, 100.0),
            beta_on=beta_on,
        )

    def test_sum_of_components(self, rng):
        xi = random_hyper(rng, k_x=1, k_z=2)
        priors = self._priors()
        total = log_prior_hyper(xi, priors)
        assert total == pytest.approx(float(np.sum(priors.component_logpdfs(xi))))
        assert np.isfinite(total)

    def test_finite_exactly_on_positive_orthant(self):
        priors = self._priors()
        xi = HyperParams(
            SigmaKernelParams(np.array([1.0])),
            ThetaKernelParams(1.0, np.array([1.0, 1.0])),
            beta=2.0,
        )
        assert np.isfinite(log_prior_hyper(xi, priors))
        fns = priors.logpdf_fns()
        assert all(fn(0.0) == -np.inf for fn in fns)
        assert all(fn(-0.5) == -np.inf for fn in fns)

    def test_variance_parameterization_includes_jacobian(self):
        priors = self._priors(beta_on="variance")
        beta = 4.0
        expected = gamma_dist.logpdf(1.0 / beta, 2.0, scale=100.0) - 2.0 * math.log(beta)
        assert priors._beta_logpdf(beta) == pytest.approx(expected, abs=1e-12)


class TestLogJoint:
    def test_is_sum_of_parts(self, rng):
        xi = random_hyper(rng, k_x=1, k_z=1)
        X = rng.standard_normal((4, 1))
        Z = rng.standard_normal((4, 1))
        Y = rng.standard_normal((4, 2))
        total = log_joint(Y, Z, X, xi)
        parts = log_py_given_z(Y, Z, xi.theta, xi.beta) + log_pz_given_x(Z, X, xi.sigma)
        assert total == pytest.approx(parts, rel=1e-14)

    def test_permutation_invariance(self, rng):
        xi = random_hyper(rng, k_x=2, k_z=1)
        X = rng.standard_normal((5, 2))
        Z = rng.standard_normal((5, 1))
        Y = rng.standard_normal((5, 2))
        perm = rng.permutation(5)
        assert log_joint(Y, Z, X, xi) == pytest.approx(
            log_joint(Y[perm], Z[perm], X[perm], xi), rel=1e-10
        )

    def test_against_dense_oracle(self, rng):
        xi = random_hyper(rng, k_x=1, k_z=1)
        X = rng.standard_normal((2, 1))
        Z = rng.standard_normal((2, 1))
        Y = rng.standard_normal((2, 1))
        kf = se_cov(Z, Z, xi.theta.precisions, xi.theta.signal_variance) + np.eye(2) / xi.beta
        kz = se_cov(X, X, xi.sigma.precisions) + xi.sigma.jitter * np.eye(2)
        expected = block_diag_gaussian_logpdf(Y, kf) + block_diag_gaussian_logpdf(Z, kz)
        assert log_joint(Y, Z, X, xi) == pytest.approx(expected, abs=1e-8)
