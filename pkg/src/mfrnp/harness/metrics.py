"""Normalized error metrics, evaluated on de-normalized predictions."""

from __future__ import annotations

import numpy as np

from mfrnp.errors import MetricError


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise MetricError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if truth.size < 2:
        raise MetricError("need at least two values")
    std = truth.std()
    if std == 0:
        raise MetricError("truth is constant; nRMSE is undefined")
    return pred, truth, std


def nrmse(pred, truth):
    """Root-mean-square error over all entries divided by the population std of ``truth``."""
    pred, truth, std = _pair(pred, truth)
    return float(np.sqrt(np.mean((truth - pred) ** 2)) / std)


def lat_weighted_nrmse(pred, truth, latitudes):
    """nRMSE with squared errors weighted by ``cos(latitude)`` of their grid row.

    ``pred`` and ``truth`` are ``(N, H, W)`` grids or ``(N, H*W)`` rows;
    ``latitudes`` holds ``H`` values in degrees.  Weights are normalized by
    their mean over all grid points.
    """
    lat = np.asarray(latitudes, dtype=float).reshape(-1)
    pred, truth, std = _pair(pred, truth)
    H = lat.size
    grid = truth.reshape(truth.shape[0], H, -1) if truth.ndim > 1 else truth.reshape(1, H, -1)
    pred_grid = pred.reshape(grid.shape)
    cos = np.where(np.abs(lat) >= 90.0, 0.0, np.cos(np.deg2rad(lat)))
    w = np.broadcast_to(cos[None, :, None], grid.shape)
    w_mean = w.mean()
    if w_mean == 0 or not np.any(w):
        raise MetricError("latitude weights are all zero")
    return float(np.sqrt(np.mean((w / w_mean) * (grid - pred_grid) ** 2)) / std)


METRICS = {"nrmse": nrmse}
