"""File-based figure emission: posterior pair plots and predictive heat maps.

Every figure is an SVG with a sibling CSV holding exactly the plotted data,
so plots can be regenerated without rerunning inference. SVG output is kept
byte-stable by fixing the hash salt and dropping the creation date.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .harness import RunConfig, _fmt, _write_csv, load_ml_fit, load_traces

__all__ = ["emit_figures", "PAIR_PLOTS"]

# (name, x component, y component); beta_inv is derived from beta
PAIR_PLOTS = (
    ("pair_sigma1_beta_inv", "sigma_1", "beta_inv"),
    ("pair_theta1_theta2", "theta_1", "theta_2"),
    ("pair_thetaS_beta_inv", "theta_S", "beta_inv"),
)

_SAVE_KW = {"metadata": {"Date": None}}


def _configure_determinism():
    plt.rcParams["svg.hashsalt"] = "sgplvm"


def _component_column(matrix: np.ndarray, names: list[str], comp: str) -> np.ndarray:
    if comp == "beta_inv":
        return 1.0 / matrix[:, names.index("beta")]
    return matrix[:, names.index(comp)]


def _pair_figures(run_dir: Path, fig_dir: Path) -> list[Path]:
    traces = load_traces(run_dir)
    ml = load_ml_fit(run_dir)
    names = traces[0].component_names
    ml_vec = ml.hyper.to_vector()

    def ml_value(comp: str) -> float:
        if comp == "beta_inv":
            return 1.0 / ml_vec[names.index("beta")]
        return float(ml_vec[names.index(comp)])

    written = []
    for fig_name, cx, cy in PAIR_PLOTS:
        if cx.replace("beta_inv", "beta") not in names or cy.replace("beta_inv", "beta") not in names:
            continue
        rows = []
        for c, trace in enumerate(traces):
            mat = trace.hyper_matrix(after_burn_in=True)
            xs = _component_column(mat, names, cx)
            ys = _component_column(mat, names, cy)
            rows.extend([c, _fmt(a), _fmt(b)] for a, b in zip(xs, ys))
        csv_path = fig_dir / f"{fig_name}.csv"
        _write_csv(csv_path, ["chain", cx, cy], rows)
        written.append(_render_pair(csv_path, cx, cy, ml_value(cx), ml_value(cy)))
        written.append(csv_path)
    return written


def _render_pair(csv_path: Path, cx: str, cy: str, ml_x: float, ml_y: float) -> Path:
    data = np.genfromtxt(csv_path, delimiter=",", names=True)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(data[cx], data[cy], s=4, alpha=0.3, color="tab:blue", linewidths=0)
    in_x = data[cx].min() <= ml_x <= data[cx].max()
    in_y = data[cy].min() <= ml_y <= data[cy].max()
    if in_x and in_y:
        ax.scatter([ml_x], [ml_y], marker="x", s=80, color="tab:red", label="ML")
        ax.legend(loc="best")
    ax.set_xlabel(cx)
    ax.set_ylabel(cy)
    fig.tight_layout()
    svg_path = csv_path.with_suffix(".svg")
    fig.savefig(svg_path, **_SAVE_KW)
    plt.close(fig)
    return svg_path


def _load_density_csv(path: Path, feature: int):
    xs, ys, ds = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if int(row[1]) != feature:
                continue
            xs.append(float(row[0]))
            ys.append(float(row[2]))
            ds.append(float(row[3]))
    x = np.unique(np.asarray(xs))
    y = np.unique(np.asarray(ys))
    d = np.asarray(ds).reshape(x.size, y.size)
    return x, y, d


def _heatmap_figures(run_dir: Path, fig_dir: Path, features) -> tuple[list[Path], dict]:
    variants = {
        "true": run_dir / "predictive" / "true_density.csv",
        "marginalized": run_dir / "predictive" / "marginalized_density.csv",
        "ml": run_dir / "predictive" / "ml_density.csv",
    }
    written = []
    meta = {}
    for feature in features:
        for variant, src in variants.items():
            if not src.exists():
                continue
            x, y, d = _load_density_csv(src, feature)
            name = f"heatmap_{variant}_feature_{feature}"
            csv_path = fig_dir / f"{name}.csv"
            rows = [
                [_fmt(xv), _fmt(yv), _fmt(d[a, b])]
                for a, xv in enumerate(x)
                for b, yv in enumerate(y)
            ]
            _write_csv(csv_path, ["x_star", "y", "density"], rows)
            vmin, vmax = float(d.min()), float(d.max())
            meta[name] = {"vmin": vmin, "vmax": vmax, "feature": feature, "variant": variant}
            fig, ax = plt.subplots(figsize=(4.2, 3.4))
            mesh = ax.pcolormesh(x, y, d.T, shading="auto", vmin=vmin, vmax=vmax, cmap="viridis")
            fig.colorbar(mesh, ax=ax)
            ax.set_xlabel("x*")
            ax.set_ylabel(f"y_{feature}")
            ax.set_title(f"{variant} predictive density")
            fig.tight_layout()
            svg_path = fig_dir / f"{name}.svg"
            fig.savefig(svg_path, **_SAVE_KW)
            plt.close(fig)
            written.extend([csv_path, svg_path])
    return written, meta


def emit_figures(run_dir, config: RunConfig | None = None) -> list[Path]:
    """Emit all figures for a run directory; returns the written paths.

    Needs chain traces, the baseline fit and at least one predictive
    density file; missing inputs raise with the absent paths listed.
    """
    run_dir = Path(run_dir)
    _configure_determinism()
    if config is None:
        manifest = run_dir / "manifest.json"
        if not manifest.exists():
            raise FileNotFoundError(f"missing inputs: ['{manifest}']")
        with open(manifest) as fh:
            config = RunConfig.from_dict(json.load(fh)["config"])
    fig_dir = run_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)

    missing = []
    if not (run_dir / "ml.json").exists():
        missing.append(str(run_dir / "ml.json"))
    have_chains = (run_dir / "chains").exists()
    have_density = any(
        (run_dir / "predictive" / f"{v}_density.csv").exists()
        for v in ("true", "marginalized", "ml")
    )
    if not have_density:
        missing.append(str(run_dir / "predictive"))
    if missing:
        raise FileNotFoundError(f"missing inputs: {missing}")

    written = []
    if have_chains:
        written.extend(_pair_figures(run_dir, fig_dir))
    heat_written, meta = _heatmap_figures(
        run_dir, fig_dir, config.prediction.heatmap_features
    )
    written.extend(heat_written)
    with open(fig_dir / "heatmap_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return written
