import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sgplvm import SigmaKernelParams, ThetaKernelParams, HyperParams, VariationalState


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_hyper(rng, k_x=1, k_z=1, jitter=1e-6):
    return HyperParams(
        sigma=SigmaKernelParams(rng.uniform(0.3, 2.0, k_x), jitter=jitter),
        theta=ThetaKernelParams(rng.uniform(0.5, 2.0), rng.uniform(0.3, 2.0, k_z)),
        beta=rng.uniform(1.0, 6.0),
    )


def random_state(rng, n, k_z, m, scale=0.5):
    """Random variational state with well-conditioned covariance factors."""
    mu = rng.standard_normal((n, k_z))
    chols = np.zeros((k_z, n, n))
    for j in range(k_z):
        a = scale * rng.standard_normal((n, n)) / np.sqrt(n)
        chols[j] = np.linalg.cholesky(a @ a.T + 0.3 * np.eye(n))
    inducing = rng.standard_normal((m, k_z))
    return VariationalState(mu, chols, inducing)
