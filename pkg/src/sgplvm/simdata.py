"""Sinusoidal benchmark generator and generic CSV dataset loading.

Six output features follow scaled cosines (features 1-3) and sines
(features 4-6) of a scalar input on [0, 4*pi], with per-feature amplitude
drawn uniformly on (0, 1) and a frequency that is either exactly one
(well specified) or drawn from an interval around one (poorly specified).
Ground truth is retained alongside the noisy dataset for scoring.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset

__all__ = [
    "CASES",
    "SinusoidalSpec",
    "SinusoidalTruth",
    "generate",
    "true_density",
    "load_csv",
    "save_csv",
]

CASES = {
    "well_specified": (1.0, 1.0),
    "mix_0.8_1.2": (0.8, 1.2),
    "mix_0.7_1.3": (0.7, 1.3),
}

N_FEATURES = 6


@dataclass(frozen=True)
class SinusoidalSpec:
    """Recipe for one benchmark dataset."""

    n_points: int = 30
    case: str = "well_specified"
    noise_sd: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}, expected one of {sorted(CASES)}")
        if self.n_points < 2:
            raise ValueError("need at least two points")
        if self.noise_sd <= 0:
            raise ValueError("noise sd must be positive")


@dataclass
class SinusoidalTruth:
    """Realized generator state: amplitudes, frequencies, noiseless values."""

    spec: SinusoidalSpec
    zeta: np.ndarray
    freq: np.ndarray
    f_train: np.ndarray

    def f_at(self, x: np.ndarray) -> np.ndarray:
        """Noiseless feature values at arbitrary inputs, shape (n, 6)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        return _feature_values(x, self.zeta, self.freq)

    def to_json(self) -> dict:
        return {
            "case": self.spec.case,
            "n_points": self.spec.n_points,
            "noise_sd": self.spec.noise_sd,
            "seed": self.spec.seed,
            "zeta": self.zeta.tolist(),
            "freq": self.freq.tolist(),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SinusoidalTruth":
        spec = SinusoidalSpec(
            n_points=payload["n_points"],
            case=payload["case"],
            noise_sd=payload["noise_sd"],
            seed=payload["seed"],
        )
        zeta = np.asarray(payload["zeta"], dtype=float)
        freq = np.asarray(payload["freq"], dtype=float)
        x = np.linspace(0.0, 4.0 * math.pi, spec.n_points)
        return cls(spec=spec, zeta=zeta, freq=freq, f_train=_feature_values(x, zeta, freq))


def _feature_values(x: np.ndarray, zeta: np.ndarray, freq: np.ndarray) -> np.ndarray:
    phases = freq[None, :] * x[:, None]
    f = np.empty((x.size, N_FEATURES))
    f[:, :3] = zeta[:3] * np.cos(phases[:, :3])
    f[:, 3:] = zeta[3:] * np.sin(phases[:, 3:])
    return f


def generate(spec: SinusoidalSpec) -> tuple[Dataset, SinusoidalTruth]:
    """Draw one benchmark dataset and its ground truth, fully seed-determined."""
    rng = np.random.default_rng(spec.seed)
    x = np.linspace(0.0, 4.0 * math.pi, spec.n_points)
    zeta = rng.uniform(0.0, 1.0, N_FEATURES)
    lo, hi = CASES[spec.case]
    freq = np.full(N_FEATURES, 1.0) if lo == hi else rng.uniform(lo, hi, N_FEATURES)
    f = _feature_values(x, zeta, freq)
    y = f + spec.noise_sd * rng.standard_normal(f.shape)
    dataset = Dataset(X=x[:, None], Y=y)
    return dataset, SinusoidalTruth(spec=spec, zeta=zeta, freq=freq, f_train=f)


def true_density(
    truth: SinusoidalTruth, x_star: np.ndarray, y_grid: np.ndarray, feature: int
) -> np.ndarray:
    """Exact predictive density of one feature on a grid, shape (n_star, n_bins)."""
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    y_grid = np.asarray(y_grid, dtype=float).reshape(-1)
    center = truth.f_at(x_star)[:, feature]
    sd = truth.spec.noise_sd
    resid = (y_grid[None, :] - center[:, None]) / sd
    return np.exp(-0.5 * resid**2) / (sd * math.sqrt(2.0 * math.pi))


# -- CSV interchange ----------------------------------------------------------


def _column_names(k_x: int, k_y: int) -> list[str]:
    return [f"x_{i + 1}" for i in range(k_x)] + [f"y_{i + 1}" for i in range(k_y)]


def save_csv(dataset: Dataset, path) -> None:
    """Write a dataset as CSV with x_*/y_* headed columns."""
    header = _column_names(dataset.k_x, dataset.k_y)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for xrow, yrow in zip(dataset.X, dataset.Y):
            writer.writerow([repr(float(v)) for v in (*xrow, *yrow)])


def load_csv(path, k_x: int, k_y: int, normalize: bool = False) -> Dataset:
    """Load a dataset from CSV, validating header names and cell values.

    ``normalize`` maps every column to the unit interval (constant columns
    become zero), which makes heterogeneous inputs comparable.
    """
    expected = _column_names(k_x, k_y)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header != expected:
            raise ValueError(
                f"{path}: header mismatch, expected columns {expected}, got {header}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(expected)} cells, got {len(row)}"
                )
            try:
                values = [float(c) for c in row]
            except ValueError as exc:
                bad = next(c for c in row if not _is_float(c))
                col = expected[row.index(bad)]
                raise ValueError(
                    f"{path}:{lineno}: non-numeric cell {bad!r} in column {col}"
                ) from exc
            rows.append(values)
    data = np.asarray(rows, dtype=float)
    if data.size == 0 or not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: dataset is empty or contains non-finite values")
    if normalize:
        lo = data.min(axis=0)
        span = data.max(axis=0) - lo
        span[span == 0] = 1.0
        data = (data - lo) / span
    return Dataset(X=data[:, :k_x], Y=data[:, k_x:])


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False
