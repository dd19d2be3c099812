"""Sensor-data preprocessing: winsorize, impute, scale, window, discretize.

Everything here is a pure function of (values, scaler). Missing values are
represented as NaN. All statistics are computed independently per sensor
dimension.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, ContractError, FitError, ShapeError


@dataclass
class SensorFrame:
    """Raw multichannel time series with optional per-timestep labels."""

    values: np.ndarray              # (T, n) float, NaN = missing
    labels: np.ndarray | None = None  # (T,) int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ConfigError(f"SensorFrame values must be (T, n), got {self.values.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.values.shape[0],):
                raise ConfigError("labels length must equal the number of timesteps")

    @property
    def missing_mask(self):
        return ~np.isfinite(self.values)


@dataclass
class Scaler:
    """Per-dimension winsorized min/max/mean statistics."""

    x_min: np.ndarray
    x_max: np.ndarray
    mean: np.ndarray
    winsor_fraction: float = 0.05

    def to_dict(self):
        return {
            "x_min": self.x_min.tolist(),
            "x_max": self.x_max.tolist(),
            "mean": self.mean.tolist(),
            "winsor_fraction": self.winsor_fraction,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            x_min=np.asarray(d["x_min"], dtype=np.float64),
            x_max=np.asarray(d["x_max"], dtype=np.float64),
            mean=np.asarray(d["mean"], dtype=np.float64),
            winsor_fraction=float(d["winsor_fraction"]),
        )


@dataclass
class SequenceBatch:
    """Fixed-length scaled sequences, shape (B, L, n), values in [0, 1]."""

    data: np.ndarray
    L: int = field(init=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ConfigError(f"SequenceBatch data must be (B, L, n), got {self.data.shape}")
        self.L = self.data.shape[1]


@dataclass
class BinLabels:
    """Integer bin targets in [0, k), shape (B, L, n)."""

    labels: np.ndarray
    k: int


def _winsor_bounds(col, fraction):
    """Nearest-rank bounds: min/max of the data after dropping the top and
    bottom ``fraction`` of ranked values."""
    finite = np.sort(col[np.isfinite(col)])
    m = finite.size
    if m == 0:
        raise FitError("all-missing dimension cannot be winsorized")
    drop = int(np.floor(fraction * m))
    lo = finite[min(drop, m - 1)]
    hi = finite[max(m - 1 - drop, 0)]
    return lo, hi


def winsorize_percentile(values, fraction=0.05):
    """Clip each dimension to its nearest-rank [fraction, 1-fraction] range."""
    if not 0.0 <= fraction < 0.5:
        raise ConfigError(f"winsor fraction must be in [0, 0.5), got {fraction}")
    values = np.asarray(values, dtype=np.float64)
    out = values.copy()
    for j in range(values.shape[1]):
        lo, hi = _winsor_bounds(values[:, j], fraction)
        col = out[:, j]
        finite = np.isfinite(col)
        col[finite] = np.clip(col[finite], lo, hi)
    return out


def fit_minmax(values, fraction=0.05):
    """Fit a Scaler on winsorized data: per-dimension min, max, mean.

    ``values`` should already be winsorized (the mean is a post-winsorize
    statistic); the bounds are simply the finite min/max of each column.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[1]
    x_min = np.empty(n)
    x_max = np.empty(n)
    mean = np.empty(n)
    for j in range(n):
        col = values[:, j]
        finite = col[np.isfinite(col)]
        if finite.size == 0:
            raise FitError(f"dimension {j} has no finite values")
        x_min[j] = finite.min()
        x_max[j] = finite.max()
        mean[j] = finite.mean()
        if not x_min[j] < x_max[j]:
            raise FitError(f"dimension {j} is degenerate (min == max == {x_min[j]})")
    return Scaler(x_min=x_min, x_max=x_max, mean=mean, winsor_fraction=fraction)


def fit_scaler(frame_or_values, fraction=0.05):
    """Winsorize then fit; the usual entry point for a raw SensorFrame."""
    values = frame_or_values.values if isinstance(frame_or_values, SensorFrame) else frame_or_values
    return fit_minmax(winsorize_percentile(values, fraction), fraction)


def impute_missing_mean(values, scaler):
    """Replace NaN cells with their dimension's post-winsorization mean."""
    values = np.asarray(values, dtype=np.float64)
    out = values.copy()
    missing = ~np.isfinite(out)
    for j in range(out.shape[1]):
        out[missing[:, j], j] = scaler.mean[j]
    return out


def apply_minmax(values, scaler):
    """Scale to [0, 1] per dimension, clamping out-of-range values."""
    values = np.asarray(values, dtype=np.float64)
    scaled = (values - scaler.x_min) / (scaler.x_max - scaler.x_min)
    return np.clip(scaled, 0.0, 1.0)


def preprocess_values(values, scaler):
    """Full value pipeline with a fitted scaler: winsorize, impute, scale."""
    v = winsorize_percentile(values, scaler.winsor_fraction)
    v = impute_missing_mean(v, scaler)
    return apply_minmax(v, scaler)


def segment_sequences(values, L=300, labels=None):
    """Split into non-overlapping length-L windows; remainder discarded.

    Returns (SequenceBatch, window_labels) where window_labels is a
    (num_windows, L) array or None.
    """
    values = np.asarray(values)
    T, n = values.shape
    num = T // L
    if num == 0:
        warnings.warn(f"input has {T} timesteps, fewer than L={L}: zero windows")
    windows = values[: num * L].reshape(num, L, n)
    win_labels = None
    if labels is not None:
        win_labels = np.asarray(labels)[: num * L].reshape(num, L)
    return SequenceBatch(windows), win_labels


def discretize_bins(scaled, k):
    """Map scaled values in [0, 1] to bin labels min(floor(k*x), k-1)."""
    if k < 2:
        raise ConfigError(f"bin count must be >= 2, got {k}")
    data = scaled.data if isinstance(scaled, SequenceBatch) else np.asarray(scaled)
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ShapeError("discretize_bins expects values scaled into [0, 1]")
    labels = np.minimum(np.floor(k * data), k - 1).astype(np.int64)
    return BinLabels(labels=labels, k=k)


def vanilla_tokenize(scaled, vocab_size):
    """Baseline token path: one id stream per dimension, concatenated.

    Input is a single (L, n) scaled sequence; output is the length n*L
    integer id sequence (all of dimension 0 first, then dimension 1, ...).
    """
    if vocab_size < 2:
        raise ConfigError(f"vocab size must be >= 2, got {vocab_size}")
    scaled = np.asarray(scaled)
    ids = np.minimum(np.floor(scaled * vocab_size), vocab_size - 1).astype(np.int64)
    return ids.T.reshape(-1)


def central_label(window_labels):
    """The activity label at the central timestep, index floor(L/2)."""
    if window_labels is None:
        raise ContractError("central_label requires labels")
    window_labels = np.asarray(window_labels)
    return int(window_labels[len(window_labels) // 2])


def load_csv(path):
    """Read the dataset CSV contract: columns d0..d{n-1}[,label].

    Empty cells become NaN (missing). Returns a SensorFrame.
    """
    df = pd.read_csv(path)
    dim_cols = [c for c in df.columns if c.startswith("d") and c[1:].isdigit()]
    dim_cols.sort(key=lambda c: int(c[1:]))
    if not dim_cols:
        raise ConfigError(f"{path}: no d0..d{{n-1}} columns found")
    values = df[dim_cols].to_numpy(dtype=np.float64)
    labels = None
    if "label" in df.columns:
        labels = df["label"].to_numpy(dtype=np.int64)
    return SensorFrame(values=values, labels=labels)
