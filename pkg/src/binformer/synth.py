"""Synthetic labeled sensor data for desk-scale runs.

Each class is a family of 3-phase sinusoids: class-dependent frequency and
class-dependent inter-axis phase offsets, with a random base phase per
window and additive Gaussian noise. Windows carry a constant label, and
classes are interleaved round-robin so contiguous splits stay balanced.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

# cycles per window and inter-axis phase step, indexed by class (mod len)
_FREQS = [3.0, 7.0, 12.0, 5.0, 9.0, 15.0]
_AXIS_PHASES = [0.1, 0.2, 0.3, 0.15, 0.25, 0.35]


def generate_windows(classes, windows_per_class, length, dims, seed, noise=0.01):
    """Returns (values (W*L, dims), labels (W*L,)) with W = classes*windows."""
    if classes < 1 or windows_per_class < 1 or length < 1 or dims < 1:
        raise ConfigError("classes, windows-per-class, length, and dims must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    labels = []
    t = np.arange(length) / length
    for w in range(windows_per_class):
        for c in range(classes):
            freq = _FREQS[c % len(_FREQS)]
            axis_phase = _AXIS_PHASES[c % len(_AXIS_PHASES)]
            base = rng.uniform(0.0, 2.0 * np.pi)
            window = np.empty((length, dims))
            for j in range(dims):
                window[:, j] = np.sin(2.0 * np.pi * freq * t + base + j * axis_phase)
            window += rng.normal(0.0, noise, size=window.shape)
            rows.append(window)
            labels.append(np.full(length, c, dtype=np.int64))
    return np.concatenate(rows), np.concatenate(labels)


def write_csv(path, values, labels):
    """Write the dataset CSV contract with deterministic formatting."""
    dims = values.shape[1]
    with open(path, "w", newline="") as f:
        f.write(",".join([f"d{j}" for j in range(dims)] + ["label"]) + "\n")
        for row, lab in zip(values, labels):
            f.write(",".join(f"{v:.6f}" for v in row) + f",{lab}\n")
