"""Shape-fitting losses. Each returns its value together with its gradient."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .grid import DeformableShapeModel, ModelGrad, evaluate, evaluate_backward, interpolation_plan

BACKGROUND, FOREGROUND, UNKNOWN = 0, 1, 2


def loss_occupancy(occupancy, labels) -> Tuple[float, np.ndarray]:
    """Mean squared error against 1 on foreground and 0 on background rays.

    Unknown rays count neither in the sum nor in the mean.
    """
    m = np.asarray(occupancy, dtype=float)
    labels = np.asarray(labels)
    used = (labels == FOREGROUND) | (labels == BACKGROUND)
    grad = np.zeros_like(m)
    n = int(used.sum())
    if n == 0:
        return 0.0, grad
    err = np.where(labels == FOREGROUND, m - 1.0, m)
    grad[used] = 2.0 * err[used] / n
    return float(np.sum(err[used] ** 2) / n), grad


def loss_rgb(color, target, labels) -> Tuple[float, np.ndarray]:
    """Per-channel mean squared color error over foreground rays."""
    c = np.asarray(color, dtype=float)
    fg = np.asarray(labels) == FOREGROUND
    grad = np.zeros_like(c)
    n = int(fg.sum())
    if n == 0:
        return 0.0, grad
    err = c[fg] - np.asarray(target, dtype=float)[fg]
    grad[fg] = 2.0 * err / (3 * n)
    return float(np.sum(err ** 2) / (3 * n)), grad


def loss_lidar_nocs(nocs, target, valid) -> Tuple[float, np.ndarray, int]:
    """Per-component mean squared NOCS error over pixels with valid renders.

    Returns ``(loss, grad, skipped)`` where ``skipped`` counts supervised
    pixels dropped because their rendered NOCS was invalid.
    """
    o = np.asarray(nocs, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    grad = np.zeros_like(o)
    n = int(valid.sum())
    skipped = int(valid.size - n)
    if n == 0:
        return 0.0, grad, skipped
    err = o[valid] - np.asarray(target, dtype=float)[valid]
    grad[valid] = 2.0 * err / (3 * n)
    return float(np.sum(err ** 2) / (3 * n)), grad, skipped


def loss_kl(mean, log_variance) -> Tuple[float, np.ndarray, np.ndarray]:
    """KL(N(mean, exp(log_variance)) || N(0, I)) in closed form."""
    mu = np.asarray(mean, dtype=float)
    lv = np.asarray(log_variance, dtype=float)
    if mu.shape != lv.shape:
        raise ValueError("mean and log_variance differ in shape")
    var = np.exp(lv)
    value = 0.5 * float(np.sum(mu ** 2 + var - lv - 1.0))
    return value, mu.copy(), 0.5 * (var - 1.0)


def sample_dense_points(count: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-0.5, 0.5, size=(count, 3))


def loss_dense_prior(model: DeformableShapeModel, z, count: int, interval: float = 0.05, seed=0,
                     points=None) -> Tuple[float, ModelGrad]:
    """Mean of ``exp(-sigma * interval)`` over uniform NOCS points.

    Small values mean solid space. ``points`` overrides the seeded draw.
    """
    if count < 1:
        raise ValueError("dense prior needs at least one sample")
    o = sample_dense_points(count, seed) if points is None else np.asarray(points, dtype=float)
    sigma, _, cache = evaluate(model, z, interpolation_plan(model.layout, o + 0.5))
    e = np.exp(-sigma * interval)
    value = float(e.mean())
    grad = evaluate_backward(cache, -interval * e / e.size, None)
    return value, grad
