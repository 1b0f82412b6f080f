"""End-to-end experiment runner.

Wires the pieces into a reproducible batch pipeline: dataset generation or
loading, the type-II maximum-likelihood baseline, parallel pseudo-marginal
chains, latent sampling, marginalized and baseline predictive densities,
binned-density scoring, mixing diagnostics, and file emission. Every stage
reads and writes a run directory, and a manifest records enough to rerun
the experiment bitwise.
"""

from __future__ import annotations

import csv
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .ess import sample_latents
from .model import Dataset, GammaPrior, HyperParams, HyperPriors
from .pm_mcmc import BlockSpec, ChainAborted, ChainRecord, ChainTrace, run_chain
from .predict import (
    CLAMP_COUNTER,
    posterior_mean,
    predict_latent,
    predict_output,
    predictive_density,
    variational_predictive,
)
from .simdata import (
    SinusoidalSpec,
    SinusoidalTruth,
    generate,
    load_csv,
    save_csv,
    true_density,
)
from .variational import MLFit, VariationalState, fit_ml

__all__ = [
    "DatasetConfig",
    "PriorsConfig",
    "McmcConfig",
    "VariationalConfig",
    "PredictionConfig",
    "RunConfig",
    "ScoreReport",
    "nmse_binned",
    "diagnostics",
    "run_experiment",
    "run_experiment_from_manifest",
    "load_run_dataset",
    "load_ml_fit",
    "load_traces",
    "load_pooled_draws",
]


# -- configuration ------------------------------------------------------------


def _require_keys(d: dict, cls) -> dict:
    allowed = set(cls.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return d


@dataclass
class DatasetConfig:
    kind: str = "sinusoidal"
    case: str = "well_specified"
    n_points: int = 30
    noise_sd: float = 0.05
    seed: int = 0
    path: str | None = None
    k_x: int = 1
    k_y: int = 6
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in ("sinusoidal", "csv"):
            raise ValueError(f"dataset kind must be 'sinusoidal' or 'csv', got {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ValueError("csv datasets need a path")


@dataclass
class PriorsConfig:
    """Gamma (shape, scale) pairs per hyperparameter group."""

    sigma: tuple[float, float] = (2.0, 10.0)
    theta: tuple[float, float] = (2.0, 10.0)
    theta_s: tuple[float, float] = (2.0, 1.0)
    beta: tuple[float, float] = (2.0, 100.0)
    beta_on: str = "precision"

    def build(self, k_x: int, k_z: int) -> HyperPriors:
        return HyperPriors.broadcast(
            k_x,
            k_z,
            sigma=GammaPrior(*self.sigma, target="sigma"),
            theta=GammaPrior(*self.theta, target="theta"),
            theta_s=GammaPrior(*self.theta_s, target="theta_S"),
            beta=GammaPrior(*self.beta, target="beta"),
            beta_on=self.beta_on,
        )


@dataclass
class McmcConfig:
    iterations: int = 1000
    g0: int = 200
    burn_in: int | None = None
    n_importance: int = 64
    chains: int = 4
    init_noise_sd: float = 0.1
    initial_step: float = 0.01
    adapt_eps: float = 1e-6
    refresh_every: int = 1
    refresh_max_iter: int = 50
    refresh_until: int | None = None
    parallel: bool = True

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if self.burn_in is not None and self.burn_in >= self.iterations:
            raise ValueError("burn-in must be smaller than the iteration count")

    @property
    def effective_burn_in(self) -> int:
        return self.iterations // 4 if self.burn_in is None else self.burn_in


@dataclass
class VariationalConfig:
    n_inducing: int | None = None
    max_iter: int = 500
    ml_rounds: int = 8
    restarts: int = 2
    hyper_max_iter: int = 60


@dataclass
class PredictionConfig:
    n_test: int = 100
    n_bins: int = 200
    pad_sds: float = 3.0
    heatmap_features: tuple[int, ...] = (1,)  # 1-based feature numbers
    steps_per_draw: int = 5
    thin: int = 1
    ml_draws: int | None = None
    ml_predictive: str = "variational"

    def __post_init__(self):
        if self.ml_predictive not in ("variational", "sampled"):
            raise ValueError(
                "ml_predictive must be 'variational' (moment matched) or 'sampled'"
            )


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    k_z: int = 2
    priors: PriorsConfig = field(default_factory=PriorsConfig)
    blocks: tuple[tuple[str, ...], ...] | None = None
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    variational: VariationalConfig = field(default_factory=VariationalConfig)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    seed: int = 0
    ml_only: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(_require_keys(d, cls))
        if "dataset" in d:
            d["dataset"] = DatasetConfig(**_require_keys(d["dataset"], DatasetConfig))
        if "priors" in d:
            p = dict(_require_keys(d["priors"], PriorsConfig))
            for key in ("sigma", "theta", "theta_s", "beta"):
                if key in p:
                    p[key] = tuple(p[key])
            d["priors"] = PriorsConfig(**p)
        if "mcmc" in d:
            d["mcmc"] = McmcConfig(**_require_keys(d["mcmc"], McmcConfig))
        if "variational" in d:
            d["variational"] = VariationalConfig(
                **_require_keys(d["variational"], VariationalConfig)
            )
        if "prediction" in d:
            p = dict(_require_keys(d["prediction"], PredictionConfig))
            if "heatmap_features" in p:
                p["heatmap_features"] = tuple(p["heatmap_features"])
            d["prediction"] = PredictionConfig(**p)
        if d.get("blocks") is not None:
            d["blocks"] = tuple(tuple(b) for b in d["blocks"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = asdict(self)
        return out

    def block_spec(self, k_x: int) -> BlockSpec:
        if self.blocks is None:
            return BlockSpec.default(k_x, self.k_z)
        return BlockSpec(blocks=self.blocks)


@dataclass
class ScoreReport:
    """Per-feature density error pairs plus hyperparameter posterior summaries."""

    nmse: dict
    summaries: dict
    normalizer: str = "mean of squared true density over bins"


# -- small IO helpers ----------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _update_manifest(run_dir: Path, **entries) -> None:
    path = run_dir / "manifest.json"
    payload = {}
    if path.exists():
        with open(path) as fh:
            payload = json.load(fh)
    payload.update(entries)
    _write_json(path, payload)


# -- stages --------------------------------------------------------------------


def stage_generate(config: RunConfig, run_dir: Path):
    """Materialize the dataset (and ground truth when generated)."""
    run_dir.mkdir(parents=True, exist_ok=True)
    if config.dataset.kind == "sinusoidal":
        spec = SinusoidalSpec(
            n_points=config.dataset.n_points,
            case=config.dataset.case,
            noise_sd=config.dataset.noise_sd,
            seed=config.dataset.seed,
        )
        dataset, truth = generate(spec)
        save_csv(dataset, run_dir / "dataset.csv")
        _write_json(run_dir / "truth.json", truth.to_json())
    else:
        dataset = load_csv(
            config.dataset.path,
            config.dataset.k_x,
            config.dataset.k_y,
            normalize=config.dataset.normalize,
        )
        truth = None
        save_csv(dataset, run_dir / "dataset.csv")
    _update_manifest(run_dir, config=config.to_dict(), versions=_versions())
    return dataset, truth


def load_run_dataset(config: RunConfig, run_dir: Path):
    """Load the staged dataset, generating it first when absent."""
    path = run_dir / "dataset.csv"
    if not path.exists():
        return stage_generate(config, run_dir)
    if config.dataset.kind == "sinusoidal":
        dataset = load_csv(path, 1, 6)
        with open(run_dir / "truth.json") as fh:
            truth = SinusoidalTruth.from_json(json.load(fh))
        return dataset, truth
    dataset = load_csv(path, config.dataset.k_x, config.dataset.k_y)
    return dataset, None


def _seed_tree(config: RunConfig):
    root = np.random.SeedSequence(config.seed)
    ml, chains, latents, pred, ml_pred = root.spawn(5)
    return {
        "ml": ml,
        "chains": chains.spawn(config.mcmc.chains),
        "latents": latents.spawn(config.mcmc.chains),
        "predict": pred,
        "ml_predict": ml_pred,
    }


def stage_fit_ml(config: RunConfig, dataset: Dataset, run_dir: Path) -> MLFit:
    """Type-II maximum-likelihood baseline fit, persisted for later stages."""
    seeds = _seed_tree(config)
    rng = np.random.default_rng(seeds["ml"])
    fit = fit_ml(
        dataset.Y,
        dataset.X,
        config.k_z,
        n_inducing=config.variational.n_inducing,
        rng=rng,
        restarts=config.variational.restarts,
        rounds=config.variational.ml_rounds,
        variational_max_iter=config.variational.max_iter,
        hyper_max_iter=config.variational.hyper_max_iter,
    )
    _write_json(
        run_dir / "ml.json",
        {
            "components": fit.hyper.component_names(),
            "values": fit.hyper.to_vector().tolist(),
            "elbo": fit.elbo,
            "restart_elbos": fit.restart_elbos,
            "k_x": fit.hyper.k_x,
            "k_z": fit.hyper.k_z,
        },
    )
    np.savez(
        run_dir / "q_ml.npz",
        mu=fit.state.mu,
        cov_chols=fit.state.cov_chols,
        inducing=fit.state.inducing,
    )
    return fit


def load_ml_fit(run_dir: Path) -> MLFit:
    ml_path, q_path = run_dir / "ml.json", run_dir / "q_ml.npz"
    missing = [str(p) for p in (ml_path, q_path) if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing baseline artifacts: {missing}; run fit-ml first")
    with open(ml_path) as fh:
        payload = json.load(fh)
    hyper = HyperParams.from_vector(
        np.asarray(payload["values"]), payload["k_x"], payload["k_z"]
    )
    arrs = np.load(q_path)
    state = VariationalState(arrs["mu"], arrs["cov_chols"], arrs["inducing"])
    return MLFit(hyper=hyper, state=state, elbo=payload["elbo"], restart_elbos=payload["restart_elbos"])


def _chain_csv_path(run_dir: Path, chain: int) -> Path:
    return run_dir / "chains" / f"chain_{chain:02d}.csv"


def _chain_worker(payload):
    (chain_id, dataset, init_vec, q_arrays, priors, blocks, mcmc, k_x, k_z, seed) = payload
    init_hyper = HyperParams.from_vector(init_vec, k_x, k_z)
    q0 = VariationalState(*q_arrays)
    trace = run_chain(
        dataset,
        init_hyper,
        q0,
        priors,
        blocks=blocks,
        iterations=mcmc.iterations,
        g0=mcmc.g0,
        burn_in=mcmc.effective_burn_in,
        n_importance=mcmc.n_importance,
        seed=seed,
        initial_step=mcmc.initial_step,
        adapt_eps=mcmc.adapt_eps,
        refresh_every=mcmc.refresh_every,
        refresh_max_iter=mcmc.refresh_max_iter,
        refresh_until=mcmc.refresh_until,
    )
    return chain_id, trace


def stage_sample(
    config: RunConfig, dataset: Dataset, ml: MLFit, run_dir: Path
) -> list[ChainTrace]:
    """Run the configured number of chains, each from a noisy baseline start."""
    seeds = _seed_tree(config)
    priors = config.priors.build(ml.hyper.k_x, config.k_z)
    blocks = config.block_spec(ml.hyper.k_x)
    payloads = []
    for c in range(config.mcmc.chains):
        init_ss, chain_ss = seeds["chains"][c].spawn(2)
        init_rng = np.random.default_rng(init_ss)
        noise = np.exp(
            config.mcmc.init_noise_sd * init_rng.standard_normal(ml.hyper.to_vector().size)
        )
        init_vec = ml.hyper.to_vector() * noise
        payloads.append(
            (
                c,
                dataset,
                init_vec,
                (ml.state.mu, ml.state.cov_chols, ml.state.inducing),
                priors,
                blocks,
                config.mcmc,
                ml.hyper.k_x,
                config.k_z,
                chain_ss,
            )
        )
    traces: list[ChainTrace | None] = [None] * config.mcmc.chains
    try:
        if config.mcmc.parallel and config.mcmc.chains > 1:
            workers = min(config.mcmc.chains, os.cpu_count() or 1)
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for chain_id, trace in pool.map(_chain_worker, payloads):
                    traces[chain_id] = trace
        else:
            for payload in payloads:
                chain_id, trace = _chain_worker(payload)
                traces[chain_id] = trace
    except ChainAborted as exc:
        _persist_chain(exc.trace, -1, run_dir)
        raise
    for c, trace in enumerate(traces):
        _persist_chain(trace, c, run_dir)
    _update_manifest(
        run_dir,
        chains={
            "count": config.mcmc.chains,
            "iterations": config.mcmc.iterations,
            "burn_in": config.mcmc.effective_burn_in,
            "g0": config.mcmc.g0,
            "blocks": [list(b) for b in blocks.blocks],
            "acceptance": [t.acceptance.tolist() for t in traces],
        },
    )
    return traces


def _persist_chain(trace: ChainTrace, chain_id: int, run_dir: Path) -> None:
    names = trace.component_names
    n_blocks = len(trace.block_spec.blocks)
    header = (
        ["chain", "g"]
        + names
        + ["retained_log_pm"]
        + [f"accept_block_{r + 1}" for r in range(n_blocks)]
    )
    rows = []
    for rec in trace.records:
        rows.append(
            [chain_id, rec.g]
            + [_fmt(v) for v in rec.hyper]
            + [_fmt(rec.retained_log_pm)]
            + [int(a) for a in rec.accepted]
        )
    _write_csv(_chain_csv_path(run_dir, chain_id), header, rows)


def load_traces(run_dir: Path) -> list[ChainTrace]:
    """Rebuild chain traces from the persisted CSV files and manifest."""
    manifest_path = run_dir / "manifest.json"
    chain_dir = run_dir / "chains"
    if not manifest_path.exists() or not chain_dir.exists():
        missing = [str(p) for p in (manifest_path, chain_dir) if not p.exists()]
        raise FileNotFoundError(f"missing chain artifacts: {missing}; run sample first")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    info = manifest["chains"]
    blocks = BlockSpec(blocks=tuple(tuple(b) for b in info["blocks"]))
    traces = []
    for c in range(info["count"]):
        path = _chain_csv_path(run_dir, c)
        if not path.exists():
            raise FileNotFoundError(f"missing chain file {path}")
        with open(path) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            n_blocks = sum(1 for h in header if h.startswith("accept_block_"))
            names = header[2 : len(header) - 1 - n_blocks]
            records = []
            for row in reader:
                g = int(row[1])
                hyper = np.array([float(v) for v in row[2 : 2 + len(names)]])
                retained = float(row[2 + len(names)])
                accepted = tuple(bool(int(v)) for v in row[3 + len(names) :])
                records.append(
                    ChainRecord(g=g, hyper=hyper, retained_log_pm=retained, accepted=accepted)
                )
        traces.append(
            ChainTrace(
                records=records,
                component_names=names,
                burn_in=info["burn_in"],
                g0=info["g0"],
                seed=None,
                block_spec=blocks,
                acceptance=np.asarray(info["acceptance"][c]),
            )
        )
    return traces


def stage_latents(
    config: RunConfig,
    dataset: Dataset,
    traces: list[ChainTrace],
    ml: MLFit,
    run_dir: Path,
) -> list[tuple[HyperParams, np.ndarray]]:
    """Slice-sample one latent matrix per retained hyperparameter draw."""
    seeds = _seed_tree(config)
    pooled: list[tuple[HyperParams, np.ndarray]] = []
    thin = max(1, config.prediction.thin)
    (run_dir / "latents").mkdir(parents=True, exist_ok=True)
    for c, trace in enumerate(traces):
        records = trace.retained()[::thin]
        hypers = [
            HyperParams.from_vector(r.hyper, ml.hyper.k_x, config.k_z) for r in records
        ]
        rng = np.random.default_rng(seeds["latents"][c])
        draws = sample_latents(
            dataset.Y, dataset.X, hypers, config.prediction.steps_per_draw, rng,
            init_Z=ml.state.mu,
        )
        np.savez(
            run_dir / "latents" / f"chain_{c:02d}.npz",
            draws=draws,
            g=np.array([r.g for r in records]),
        )
        pooled.extend(zip(hypers, draws))
    _update_manifest(
        run_dir,
        latents={
            "files": [f"latents/chain_{c:02d}.npz" for c in range(len(traces))],
            "steps_per_draw": config.prediction.steps_per_draw,
            "thin": thin,
        },
    )
    return pooled


def load_pooled_draws(run_dir: Path, config: RunConfig) -> list[tuple[HyperParams, np.ndarray]]:
    """Zip retained hyperparameter draws with their persisted latent draws."""
    traces = load_traces(run_dir)
    ml = load_ml_fit(run_dir)
    thin = max(1, config.prediction.thin)
    pooled = []
    for c, trace in enumerate(traces):
        path = run_dir / "latents" / f"chain_{c:02d}.npz"
        if not path.exists():
            raise FileNotFoundError(f"missing latent draws {path}; run predict first")
        arrs = np.load(path)
        records = trace.retained()[::thin]
        for rec, Z in zip(records, arrs["draws"]):
            pooled.append((HyperParams.from_vector(rec.hyper, ml.hyper.k_x, config.k_z), Z))
    return pooled


def _prediction_grids(config: RunConfig, dataset: Dataset, ml: MLFit):
    """Shared test inputs and per-feature outcome grids, baseline-width padded."""
    x = dataset.X
    if x.shape[1] != 1:
        raise ValueError("density grids are only defined for scalar inputs")
    x_star = np.linspace(float(x.min()), float(x.max()), config.prediction.n_test)[:, None]
    means, _, _ = predict_latent(x_star, x, ml.state.mu, ml.hyper.sigma)
    _, out_var = predict_output(means, ml.state.mu, dataset.Y, ml.hyper.theta, ml.hyper.beta)
    sd_max = float(np.sqrt(out_var.max()))
    pad = config.prediction.pad_sds * sd_max
    grids = np.stack(
        [
            np.linspace(
                float(dataset.Y[:, i].min()) - pad,
                float(dataset.Y[:, i].max()) + pad,
                config.prediction.n_bins,
            )
            for i in range(dataset.k_y)
        ]
    )
    return x_star, grids


def _density_rows(x_star, grids, density):
    rows = []
    for i in range(density.shape[0]):
        for a, xv in enumerate(x_star[:, 0]):
            for b, yv in enumerate(grids[i]):
                rows.append([_fmt(xv), i + 1, _fmt(yv), _fmt(density[i, a, b])])
    return rows


def stage_predict(
    config: RunConfig,
    dataset: Dataset,
    ml: MLFit,
    run_dir: Path,
    pooled: list[tuple[HyperParams, np.ndarray]] | None,
    truth: SinusoidalTruth | None,
) -> dict:
    """Predictive densities and posterior means for both inference variants."""
    seeds = _seed_tree(config)
    x_star, grids = _prediction_grids(config, dataset, ml)
    header = ["x_star", "feature", "y", "density"]
    out: dict = {"x_star": x_star, "grids": grids}

    if pooled:
        rng = np.random.default_rng(seeds["predict"])
        marg = predictive_density(x_star, grids, dataset.X, dataset.Y, pooled, rng)
        out["marginalized"] = marg
        _write_csv(
            run_dir / "predictive" / "marginalized_density.csv",
            header,
            _density_rows(x_star, grids, marg),
        )
        marg_mean = posterior_mean(x_star, dataset.X, dataset.Y, pooled, rng)
        out["marginalized_mean"] = marg_mean

    if config.prediction.ml_predictive == "variational":
        ml_means, ml_vars = variational_predictive(
            x_star, dataset.X, dataset.Y, ml.state, ml.hyper
        )
        ml_density = _gaussian_grid_density(grids, ml_means, ml_vars)
        ml_mean = ml_means
        n_ml = 0
    else:
        n_ml = config.prediction.ml_draws
        if n_ml is None:
            n_ml = len(pooled) if pooled else 1000
        ml_draws = [(ml.hyper, ml.state.mu)] * n_ml
        rng_ml = np.random.default_rng(seeds["ml_predict"])
        ml_density = predictive_density(
            x_star, grids, dataset.X, dataset.Y, ml_draws, rng_ml
        )
        ml_mean = posterior_mean(x_star, dataset.X, dataset.Y, ml_draws, rng_ml)
    out["ml"] = ml_density
    _write_csv(
        run_dir / "predictive" / "ml_density.csv",
        header,
        _density_rows(x_star, grids, ml_density),
    )
    out["ml_mean"] = ml_mean

    mean_rows = []
    for variant, means in (("marginalized", out.get("marginalized_mean")), ("ml", ml_mean)):
        if means is None:
            continue
        for a, xv in enumerate(x_star[:, 0]):
            for i in range(dataset.k_y):
                mean_rows.append([variant, _fmt(xv), i + 1, _fmt(means[a, i])])
    _write_csv(
        run_dir / "predictive" / "posterior_mean.csv",
        ["variant", "x_star", "feature", "mean"],
        mean_rows,
    )

    if truth is not None:
        true_d = np.stack(
            [true_density(truth, x_star[:, 0], grids[i], i) for i in range(dataset.k_y)]
        )
        out["true"] = true_d
        _write_csv(
            run_dir / "predictive" / "true_density.csv",
            header,
            _density_rows(x_star, grids, true_d),
        )
    _update_manifest(
        run_dir,
        prediction={
            "n_test": config.prediction.n_test,
            "n_bins": config.prediction.n_bins,
            "pad_sds": config.prediction.pad_sds,
            "ml_predictive": config.prediction.ml_predictive,
            "ml_draws": n_ml,
            "clamp_counter": {"latent": CLAMP_COUNTER.latent, "output": CLAMP_COUNTER.output},
            "posterior_mean_formula": "predictive mean with the noise-covariance inverse applied",
        },
    )
    return out


def _gaussian_grid_density(grids: np.ndarray, means: np.ndarray, variances: np.ndarray):
    """Per-feature Gaussian densities on the outcome grids, shape (k_y, n*, bins)."""
    k_y = means.shape[1]
    out = np.empty((k_y, means.shape[0], grids.shape[1]))
    sd = np.sqrt(variances)
    for i in range(k_y):
        resid = (grids[i][None, :] - means[:, i][:, None]) / sd[:, i][:, None]
        out[i] = np.exp(-0.5 * resid**2 - np.log(sd[:, i])[:, None] - 0.5 * math.log(2 * math.pi))
    return out


def load_predicted(run_dir: Path) -> dict:
    """Read persisted predictive density grids back into stage_predict's form."""
    base = run_dir / "predictive"
    out: dict = {}
    found = False
    for variant in ("true", "marginalized", "ml"):
        path = base / f"{variant}_density.csv"
        if not path.exists():
            continue
        found = True
        xs, feats, ys, ds = [], [], [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                xs.append(float(row[0]))
                feats.append(int(row[1]))
                ys.append(float(row[2]))
                ds.append(float(row[3]))
        x_star = np.unique(np.asarray(xs))
        k_y = max(feats)
        n_bins = len(ds) // (k_y * x_star.size)
        density = np.asarray(ds).reshape(k_y, x_star.size, n_bins)
        grids = np.asarray(ys).reshape(k_y, x_star.size, n_bins)[:, 0, :]
        out.setdefault("x_star", x_star[:, None])
        out.setdefault("grids", grids)
        out[variant] = density
    if not found:
        raise FileNotFoundError(f"no predictive density files under {base}; run predict first")
    return out


def nmse_binned(p_est: np.ndarray, p_true: np.ndarray) -> float:
    """Percentage error between two aligned binned densities.

    Mean squared difference over all bins, normalized by the mean squared
    true density, times one hundred; a zero estimator scores exactly 100.
    """
    p_est = np.asarray(p_est, dtype=float)
    p_true = np.asarray(p_true, dtype=float)
    if p_est.shape != p_true.shape:
        raise ValueError(f"grid mismatch: {p_est.shape} vs {p_true.shape}")
    denom = float(np.mean(p_true**2))
    if denom == 0:
        raise ValueError("true density is identically zero on the grid")
    return 100.0 * float(np.mean((p_est - p_true) ** 2)) / denom


def stage_score(
    config: RunConfig,
    predicted: dict,
    traces: list[ChainTrace] | None,
    ml: MLFit,
    run_dir: Path,
) -> ScoreReport:
    """Binned-density NMSE per feature plus posterior summary statistics."""
    if "true" not in predicted:
        raise ValueError("scoring needs ground truth; only generated datasets have it")
    nmse: dict = {}
    k_y = predicted["true"].shape[0]
    for i in range(k_y):
        entry = {}
        if "marginalized" in predicted:
            entry["marginalized"] = nmse_binned(predicted["marginalized"][i], predicted["true"][i])
        entry["ml"] = nmse_binned(predicted["ml"][i], predicted["true"][i])
        nmse[f"feature_{i + 1}"] = entry
    summaries = diagnostics(traces)["summaries"] if traces else {}
    report = ScoreReport(nmse=nmse, summaries=summaries)
    _write_json(
        run_dir / "scores.json",
        {"nmse": report.nmse, "summaries": report.summaries, "normalizer": report.normalizer},
    )
    rows = []
    for i in range(k_y):
        entry = nmse[f"feature_{i + 1}"]
        rows.append(
            [i + 1, _fmt(entry.get("marginalized", math.nan)), _fmt(entry["ml"])]
        )
    _write_csv(
        run_dir / "scores.csv", ["feature", "marginalized_pct", "ml_pct"], rows
    )
    return report


# -- diagnostics ----------------------------------------------------------------


def _autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom == 0:
        out = np.zeros(min(max_lag, n - 1) + 1)
        out[0] = 1.0
        return out
    lags = min(max_lag, n - 1)
    return np.array([float(xc[: n - k] @ xc[k:]) / denom for k in range(lags + 1)])


def _split_rhat(per_chain: list[np.ndarray]) -> float:
    halves = []
    for x in per_chain:
        h = x.size // 2
        if h < 2:
            return math.nan
        halves.extend([x[:h], x[h : 2 * h]])
    m = len(halves)
    n = halves[0].size
    means = np.array([h.mean() for h in halves])
    variances = np.array([h.var(ddof=1) for h in halves])
    w = variances.mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return math.nan
    return math.sqrt((n - 1) / n + b / (w * n))


def diagnostics(traces: list[ChainTrace], max_lag: int = 50) -> dict:
    """Trace summaries: moments, quantiles, split R-hat, autocorrelations, acceptance."""
    if not traces or any(not t.records for t in traces):
        raise ValueError("diagnostics need at least one non-empty trace")
    names = traces[0].component_names
    per_chain = [t.hyper_matrix(after_burn_in=True) for t in traces]
    pooled = np.vstack(per_chain)

    summaries: dict = {}
    derived = {"beta_inv": 1.0 / pooled[:, names.index("beta")]}
    columns = {name: pooled[:, i] for i, name in enumerate(names)}
    columns.update(derived)
    for name, values in columns.items():
        entry = {
            "mean": float(values.mean()),
            "sd": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "q2.5": float(np.quantile(values, 0.025)),
            "q97.5": float(np.quantile(values, 0.975)),
        }
        if name in names and len(traces) >= 2:
            i = names.index(name)
            entry["rhat"] = _split_rhat([c[:, i] for c in per_chain])
            entry["chain_means"] = [float(c[:, i].mean()) for c in per_chain]
        summaries[name] = entry

    acf = {}
    for c, chain in enumerate(per_chain):
        for i, name in enumerate(names):
            acf[(c, name)] = _autocorrelation(chain[:, i], max_lag)
    acceptance = {c: t.acceptance.tolist() for c, t in enumerate(traces)}
    return {"summaries": summaries, "acf": acf, "acceptance": acceptance}


def stage_diagnostics(traces: list[ChainTrace], run_dir: Path) -> dict:
    report = diagnostics(traces)
    _write_json(run_dir / "diagnostics" / "summary.json", {"summaries": report["summaries"]})
    acf_rows = []
    for (c, name), series in report["acf"].items():
        for lag, value in enumerate(series):
            acf_rows.append([c, name, lag, _fmt(value)])
    _write_csv(run_dir / "diagnostics" / "acf.csv", ["chain", "component", "lag", "acf"], acf_rows)
    acc_rows = []
    for c, rates in report["acceptance"].items():
        for r, rate in enumerate(rates):
            acc_rows.append([c, r + 1, _fmt(rate)])
    _write_csv(
        run_dir / "diagnostics" / "acceptance.csv", ["chain", "block", "rate"], acc_rows
    )
    return report


# -- orchestration ---------------------------------------------------------------


def _versions() -> dict:
    import scipy

    return {"sgplvm": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def run_experiment(config: RunConfig, out_dir) -> Path:
    """Execute the full pipeline into ``out_dir`` and return the run directory.

    Any stage failure persists an error report (and whatever artifacts were
    already written) before re-raising.
    """
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    stage = "generate"
    try:
        dataset, truth = stage_generate(config, run_dir)
        stage = "fit-ml"
        ml = stage_fit_ml(config, dataset, run_dir)
        traces = None
        pooled = None
        if not config.ml_only:
            stage = "sample"
            traces = stage_sample(config, dataset, ml, run_dir)
            stage = "latents"
            pooled = stage_latents(config, dataset, traces, ml, run_dir)
        stage = "predict"
        predicted = stage_predict(config, dataset, ml, run_dir, pooled, truth)
        if truth is not None:
            stage = "score"
            stage_score(config, predicted, traces, ml, run_dir)
        if traces:
            stage = "diagnostics"
            stage_diagnostics(traces, run_dir)
        stage = "figures"
        from .figures import emit_figures

        emit_figures(run_dir, config)
    except Exception as exc:
        _write_json(
            run_dir / "error_report.json",
            {"stage": stage, "error": str(exc), "traceback": traceback.format_exc()},
        )
        raise
    _update_manifest(run_dir, status="complete")
    return run_dir


def run_experiment_from_manifest(manifest_path, out_dir) -> Path:
    """Rerun an experiment from its manifest; outputs reproduce bitwise."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    config = RunConfig.from_dict(manifest["config"])
    return run_experiment(config, out_dir)
