"""Z-score statistics for inputs (per column) and outputs (one scalar per field set)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NormStats:
    """Mean/std of the input columns and of all output values at one fidelity.

    Zero-variance entries are stored as mean 0, std 1 so they pass through
    ``apply`` unchanged.
    """

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def identity(cls, d_x):
        return cls(np.zeros(d_x), np.ones(d_x), 0.0, 1.0)

    @property
    def is_identity(self):
        return (
            not np.any(self.x_mean) and np.all(self.x_std == 1.0)
            and self.y_mean == 0.0 and self.y_std == 1.0
        )

    def apply_x(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def invert_x(self, Xn):
        return np.asarray(Xn, dtype=float) * self.x_std + self.x_mean

    def apply_y(self, Y):
        return (Y - self.y_mean) / self.y_std

    def invert_y(self, Yn):
        return Yn * self.y_std + self.y_mean

    def to_dict(self):
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": float(self.y_mean),
            "y_std": float(self.y_std),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["x_mean"], float), np.asarray(d["x_std"], float), float(d["y_mean"]), float(d["y_std"]))


def _mean_std(values, axis=None):
    mean = np.mean(values, axis=axis)
    std = np.std(values, axis=axis)
    const = std == 0
    if np.ndim(std):
        mean = np.where(const, 0.0, mean)
        std = np.where(const, 1.0, std)
    elif const:
        mean, std = 0.0, 1.0
    return mean, std


def fit_norm(X, Y):
    """Statistics from training inputs ``X`` (N, d_x) and outputs ``Y`` (N, d_y)."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    x_mean, x_std = _mean_std(X, axis=0)
    y_mean, y_std = _mean_std(Y)
    return NormStats(np.asarray(x_mean, float), np.asarray(x_std, float), float(y_mean), float(y_std))


def apply_norm(X, Y, stats):
    return stats.apply_x(X), stats.apply_y(np.asarray(Y, dtype=float))


def invert_norm(X, Y, stats):
    return stats.invert_x(X), stats.invert_y(np.asarray(Y, dtype=float))
