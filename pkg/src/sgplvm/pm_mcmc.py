"""Pseudo-marginal likelihood estimation and adaptive block Metropolis-Hastings.

The intractable marginal likelihood of the outputs given only the inputs and
hyperparameters is replaced by an unbiased importance-sampling estimate with
the variational posterior as proposal. Hyperparameters are updated in blocks
through random-walk proposals on log-transformed components, with per-block
proposal covariances adapted from the chain history. The estimate of the
current state is retained until a proposal is accepted; this retention is
what makes the chain target the exact hyperparameter posterior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .kernels import kz_matrix, stable_cholesky
from .model import LOG_2PI, Dataset, HyperParams, HyperPriors, log_py_given_z
from .variational import VariationalState, fit_variational

__all__ = [
    "EstimatorError",
    "ChainAborted",
    "BlockSpec",
    "AdaptiveProposal",
    "ChainRecord",
    "ChainTrace",
    "log_pseudo_marginal",
    "log_transform",
    "inverse_log_transform",
    "log_jacobian",
    "mh_block_step",
    "adapt_covariance",
    "run_chain",
]


class EstimatorError(RuntimeError):
    """The likelihood estimate is degenerate (all importance weights vanish)."""


class ChainAborted(RuntimeError):
    """A chain failed mid-run; carries the partial trace collected so far."""

    def __init__(self, message: str, trace: "ChainTrace"):
        super().__init__(message)
        self.trace = trace


# -- transforms ---------------------------------------------------------------


def log_transform(values: np.ndarray) -> np.ndarray:
    """Elementwise log map onto unconstrained space."""
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise ValueError(f"log transform needs strictly positive input, got {values}")
    return np.log(values)


def inverse_log_transform(eta: np.ndarray) -> np.ndarray:
    return np.exp(np.asarray(eta, dtype=float))


def log_jacobian(values: np.ndarray) -> float:
    """Log absolute determinant of the log transform at ``values``."""
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0):
        raise ValueError("log jacobian needs strictly positive input")
    return float(-np.sum(np.log(values)))


# -- estimator ----------------------------------------------------------------


def _log_weights(
    Y: np.ndarray,
    X: np.ndarray,
    xi: HyperParams,
    q: VariationalState,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Log importance weights of ``n_samples`` draws from the proposal."""
    kzc = stable_cholesky(kz_matrix(X, X, xi.sigma, with_jitter=True))
    draws, eps = q.sample(rng, n_samples)  # (Q, N, k_z), eps (k_z, N, Q)
    n = q.n

    # proposal log-density straight from the whitened draws
    logdet_q = q.log_dets()
    log_q = -0.5 * (
        q.k_z * n * LOG_2PI
        + np.sum(logdet_q)
        + np.einsum("jns->s", eps * eps)
    )

    # latent prior: one factor shared by every sample and latent dimension
    cols = np.transpose(draws, (1, 0, 2)).reshape(n, -1)  # (N, Q*k_z)
    half = kzc.half_solve(cols)
    quad = np.sum(half * half, axis=0).reshape(n_samples, q.k_z).sum(axis=1)
    log_prior = -0.5 * (q.k_z * n * LOG_2PI + q.k_z * kzc.log_det + quad)

    log_lik = np.array(
        [log_py_given_z(Y, draws[s], xi.theta, xi.beta) for s in range(n_samples)]
    )
    return log_lik + log_prior - log_q


def log_pseudo_marginal(
    Y: np.ndarray,
    X: np.ndarray,
    xi: HyperParams,
    q: VariationalState,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
    """Unbiased importance-sampling estimate of the log marginal likelihood.

    Averages ``n_samples`` weights ``p(Y|Z)p(Z|X) / q(Z)`` over draws from
    the proposal, in log space. The exponentiated estimator is unbiased for
    the true marginal for any proposal with full support; the proposal
    quality only affects the variance.
    """
    if n_samples < 1:
        raise ValueError("need at least one importance sample")
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    logw = _log_weights(Y, X, xi, q, n_samples, rng)
    if np.all(np.isneginf(logw)) or np.any(np.isnan(logw)):
        raise EstimatorError(
            "all importance weights vanished; proposal and prior supports do not overlap"
        )
    return float(logsumexp(logw) - np.log(n_samples))


# -- blocks and adaptation ------------------------------------------------


@dataclass(frozen=True)
class BlockSpec:
    """Ordered partition of hyperparameter components into update blocks."""

    blocks: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(b) for b in self.blocks))

    @classmethod
    def default(cls, k_x: int, k_z: int) -> "BlockSpec":
        """Lengthscale precisions in one block, magnitude and noise in the other."""
        lengthscales = tuple(
            [f"sigma_{l + 1}" for l in range(k_x)] + [f"theta_{j + 1}" for j in range(k_z)]
        )
        return cls(blocks=(lengthscales, ("theta_S", "beta")))

    def indices(self, component_names: list[str]) -> list[np.ndarray]:
        """Per-block index arrays into the canonical component vector."""
        lookup = {name: i for i, name in enumerate(component_names)}
        seen: list[str] = []
        out = []
        for block in self.blocks:
            for name in block:
                if name not in lookup:
                    raise ValueError(f"unknown component {name!r} in block spec")
                seen.append(name)
            out.append(np.array([lookup[name] for name in block], dtype=int))
        if sorted(seen) != sorted(component_names):
            raise ValueError(
                f"blocks must partition {component_names}, got {self.blocks}"
            )
        return out


def adapt_covariance(
    history: np.ndarray,
    g0: int,
    eps: float,
    s_d: float | None = None,
    initial: np.ndarray | None = None,
) -> np.ndarray:
    """Adapted proposal covariance from the full history of transformed draws.

    Applies the scaled sample second-moment recursion with a diagonal
    regularizer. Before the adaptation start (``len(history) <= g0``) the
    initial covariance is returned unchanged.
    """
    history = np.atleast_2d(np.asarray(history, dtype=float))
    g, d = history.shape
    if s_d is None:
        s_d = 2.38**2 / d
    if initial is None:
        initial = 0.01 * np.eye(d)
    if g <= g0 or g < 2:
        return np.array(initial, dtype=float)
    mean = history.mean(axis=0)
    second = history.T @ history
    cov = (s_d / (g - 1)) * (second - g * np.outer(mean, mean)) + s_d * eps * np.eye(d)
    return cov


@dataclass
class AdaptiveProposal:
    """Per-block random-walk proposal with streaming covariance adaptation.

    Streams the first and second moments of the recorded transformed draws,
    which reproduces the full-history recursion exactly without storing the
    history.
    """

    dim: int
    g0: int = 200
    eps: float = 1e-6
    initial_scale: float = 0.01
    s_d: float = field(init=False)
    count: int = field(init=False, default=0)
    _sum: np.ndarray = field(init=False, repr=False)
    _outer: np.ndarray = field(init=False, repr=False)
    cov: np.ndarray = field(init=False, repr=False)
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.s_d = 2.38**2 / self.dim
        self._sum = np.zeros(self.dim)
        self._outer = np.zeros((self.dim, self.dim))
        self.cov = self.initial_scale * np.eye(self.dim)
        self._chol = np.linalg.cholesky(self.cov)

    def record(self, eta: np.ndarray) -> None:
        """Record the post-update chain state and refresh the covariance."""
        eta = np.asarray(eta, dtype=float)
        self.count += 1
        self._sum += eta
        self._outer += np.outer(eta, eta)
        g = self.count
        if g > self.g0 and g >= 2:
            mean = self._sum / g
            cov = (self.s_d / (g - 1)) * (
                self._outer - g * np.outer(mean, mean)
            ) + self.s_d * self.eps * np.eye(self.dim)
            self.cov = cov
            self._chol = np.linalg.cholesky(cov)

    def propose(self, eta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return eta + self._chol @ rng.standard_normal(self.dim)


# -- chain state and records ---------------------------------------------


@dataclass
class ChainState:
    """Current hyperparameter vector (natural space) and its retained estimate."""

    hyper_vec: np.ndarray
    retained_log_pm: float


@dataclass(frozen=True)
class ChainRecord:
    g: int
    hyper: np.ndarray
    retained_log_pm: float
    accepted: tuple[bool, ...]


@dataclass
class ChainTrace:
    """Full history of one chain plus bookkeeping needed downstream."""

    records: list[ChainRecord]
    component_names: list[str]
    burn_in: int
    g0: int
    seed: object
    block_spec: BlockSpec
    acceptance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    error: str | None = None

    def hyper_matrix(self, after_burn_in: bool = False) -> np.ndarray:
        recs = self.retained() if after_burn_in else self.records
        return np.array([r.hyper for r in recs])

    def retained(self) -> list[ChainRecord]:
        return [r for r in self.records if r.g > self.burn_in]


def mh_block_step(
    state: ChainState,
    block_idx: np.ndarray,
    proposal: AdaptiveProposal,
    estimator,
    log_prior_block,
    rng: np.random.Generator,
) -> tuple[ChainState, bool, float]:
    """One Metropolis-Hastings update of a hyperparameter block.

    ``estimator(hyper_vec, rng)`` returns a fresh log marginal estimate at a
    candidate point; ``log_prior_block(block_values)`` the log prior of the
    block. Accepting swaps in the fresh estimate; rejecting leaves the state
    and retained estimate untouched.
    """
    current = state.hyper_vec
    cur_block = current[block_idx]
    eta = log_transform(cur_block)
    eta_new = proposal.propose(eta, rng)
    with np.errstate(over="ignore"):
        cand_block = inverse_log_transform(eta_new)

    candidate = current.copy()
    candidate[block_idx] = cand_block

    log_prior_new = log_prior_block(cand_block) if np.all(np.isfinite(cand_block)) else -np.inf
    log_prior_cur = log_prior_block(cur_block)
    if not np.isfinite(log_prior_new):
        # outside the representable support: auto-reject without estimating
        rng.uniform()  # keep the draw count aligned with the accept branch
        return state, False, -np.inf

    fresh = estimator(candidate, rng)
    delta = (
        fresh
        + log_prior_new
        + log_jacobian(cur_block)
        - state.retained_log_pm
        - log_prior_cur
        - log_jacobian(cand_block)
    )
    if np.log(rng.uniform()) < delta:
        return ChainState(candidate, float(fresh)), True, float(fresh)
    return state, False, float(fresh)


def run_chain(
    dataset: Dataset,
    init_hyper: HyperParams,
    init_q: VariationalState,
    priors: HyperPriors | None,
    *,
    blocks: BlockSpec | None = None,
    iterations: int = 1000,
    g0: int = 200,
    burn_in: int | None = None,
    n_importance: int = 64,
    seed=0,
    initial_step: float = 0.01,
    adapt_eps: float = 1e-6,
    refresh_every: int = 1,
    refresh_max_iter: int = 50,
    refresh_until: int | None = None,
    estimator=None,
) -> ChainTrace:
    """Run one pseudo-marginal adaptive MH-within-Gibbs chain.

    Sweeps all blocks once per iteration, records the post-sweep state, the
    retained log estimate and the per-block accept flags, and adapts each
    block's proposal covariance from its own history after ``g0`` sweeps.
    The variational proposal is re-optimized every ``refresh_every`` sweeps
    at the current hyperparameters (``refresh_until`` caps the last sweep
    that refreshes; retained estimates are never recomputed on refresh).

    ``priors=None`` means a flat prior; ``estimator=None`` builds the
    importance-sampling estimate with the current proposal state. Both
    hooks exist so the Metropolis machinery can be exercised against exact
    densities.
    """
    if burn_in is None:
        burn_in = iterations // 4
    if burn_in >= iterations:
        raise ValueError("burn-in must be smaller than the iteration count")
    rng = np.random.default_rng(seed)
    names = init_hyper.component_names()
    k_x, k_z = init_hyper.k_x, init_hyper.k_z
    jitter = init_hyper.sigma.jitter
    if blocks is None:
        blocks = BlockSpec.default(k_x, k_z)
    block_indices = blocks.indices(names)

    q = init_q.copy()
    if estimator is None:

        def estimator(vec, step_rng):
            xi = HyperParams.from_vector(vec, k_x, k_z, jitter=jitter)
            return log_pseudo_marginal(
                dataset.Y, dataset.X, xi, q, n_importance, step_rng
            )

    if priors is None:
        component_fns = [lambda v: 0.0] * len(names)
    else:
        component_fns = priors.logpdf_fns()
        if len(component_fns) != len(names):
            raise ValueError("prior table does not match hyperparameter dimensions")

    def block_prior(bi):
        fns = [component_fns[i] for i in bi]

        def _logp(values):
            return float(sum(fn(v) for fn, v in zip(fns, values)))

        return _logp

    proposals = [
        AdaptiveProposal(dim=len(bi), g0=g0, eps=adapt_eps, initial_scale=initial_step)
        for bi in block_indices
    ]
    block_priors = [block_prior(bi) for bi in block_indices]

    state = ChainState(init_hyper.to_vector(), -np.inf)
    records: list[ChainRecord] = []
    accept_counts = np.zeros(len(block_indices))
    trace = ChainTrace(
        records=records,
        component_names=names,
        burn_in=burn_in,
        g0=g0,
        seed=seed,
        block_spec=blocks,
    )

    try:
        state.retained_log_pm = float(estimator(state.hyper_vec, rng))
    except EstimatorError as exc:
        trace.error = str(exc)
        raise ChainAborted(f"initial estimate failed: {exc}", trace) from exc

    for g in range(1, iterations + 1):
        try:
            flags = []
            for r, (bi, proposal) in enumerate(zip(block_indices, proposals)):
                state, accepted, _ = mh_block_step(
                    state, bi, proposal, estimator, block_priors[r], rng
                )
                flags.append(accepted)
                accept_counts[r] += accepted
                proposal.record(np.log(state.hyper_vec[bi]))
            records.append(
                ChainRecord(
                    g=g,
                    hyper=state.hyper_vec.copy(),
                    retained_log_pm=state.retained_log_pm,
                    accepted=tuple(flags),
                )
            )
            refreshing = refresh_every > 0 and g % refresh_every == 0
            if refreshing and refresh_until is not None and g > refresh_until:
                refreshing = False
            if refreshing:
                xi_now = HyperParams.from_vector(state.hyper_vec, k_x, k_z, jitter=jitter)
                fit = fit_variational(
                    dataset.Y, dataset.X, xi_now, q0=q, max_iter=refresh_max_iter
                )
                q = fit.state
        except (EstimatorError, np.linalg.LinAlgError, ValueError) as exc:
            trace.acceptance = accept_counts / max(1, g - 1)
            trace.error = str(exc)
            raise ChainAborted(f"chain aborted at sweep {g}: {exc}", trace) from exc

    trace.acceptance = accept_counts / iterations
    return trace
