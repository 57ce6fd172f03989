"""Robust 4-DoF PnP from dense pixel/NOCS correspondences.

The pose minimizes ``sum_i huber(|w_i * (proj(R x_i + t) - p_i)|)`` with
``x_i = o_i * s``. A ring of yaw hypotheses, each with a closed-form
translation, seeds Levenberg-Marquardt over ``(yaw, t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .geometry import ObjectSize, Pose4DoF, wrap_angle, yaw_rotation, yaw_rotation_derivative

NOCS_SLACK = 0.1


class PnPError(ValueError):
    pass


class IllPosedError(PnPError):
    pass


class UnsolvableError(PnPError):
    pass


class NegativeDepthError(PnPError):
    pass


@dataclass
class Correspondences:
    """Normalized pixels ``p`` (N, 2), NOCS ``o`` (N, 3) and weights ``w`` (N, 2)."""

    p: np.ndarray
    o: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))[:, :2]
        self.o = np.atleast_2d(np.asarray(self.o, dtype=float))
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        n = self.p.shape[0]
        if self.o.shape != (n, 3) or self.w.shape != (n, 2):
            raise ValueError("correspondence arrays disagree in length or width")
        if not np.all(np.isfinite(self.w)) or np.any(self.w < 0):
            raise ValueError("weights must be finite and nonnegative")
        if n and np.abs(self.o).max() > 0.5 + NOCS_SLACK:
            raise ValueError("NOCS outside the normalized cube")

    def __len__(self) -> int:
        return self.p.shape[0]

    def subset(self, index) -> "Correspondences":
        return Correspondences(self.p[index], self.o[index], self.w[index])

    def to_dict(self) -> dict:
        return {"p": self.p.tolist(), "o": self.o.tolist(), "w": self.w.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Correspondences":
        return cls(np.asarray(d["p"]).reshape(-1, 2), np.asarray(d["o"]).reshape(-1, 3), np.asarray(d["w"]).reshape(-1, 2))


@dataclass(frozen=True)
class PnPSettings:
    huber_delta: float = 0.005
    max_iterations: int = 100
    yaw_hypotheses: int = 16
    rel_tol: float = 1e-10
    step_tol: float = 1e-10
    lambda_init: float = 1e-3
    irls_iterations: int = 3
    depth_penalty: float = 1e3

    def __post_init__(self):
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.yaw_hypotheses < 1:
            raise ValueError("need at least one yaw hypothesis")


@dataclass
class PnPProblem:
    correspondences: Correspondences
    size: ObjectSize
    settings: PnPSettings = field(default_factory=PnPSettings)

    def to_dict(self) -> dict:
        return {
            "correspondences": self.correspondences.to_dict(),
            "size": self.size.as_array().tolist(),
            "settings": self.settings.__dict__.copy(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PnPProblem":
        return cls(Correspondences.from_dict(d["correspondences"]), ObjectSize.from_array(d["size"]),
                   PnPSettings(**d.get("settings", {})))


@dataclass
class PnPSolution:
    pose: Pose4DoF
    cost: float
    iterations: int
    converged: bool
    hypothesis_costs: List[float]
    hypothesis_yaws: List[float]

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "cost": self.cost,
            "iterations": self.iterations,
            "converged": self.converged,
            "hypothesis_costs": list(self.hypothesis_costs),
            "hypothesis_yaws": list(self.hypothesis_yaws),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PnPSolution":
        return cls(Pose4DoF.from_dict(d["pose"]), float(d["cost"]), int(d["iterations"]), bool(d["converged"]),
                   list(d["hypothesis_costs"]), list(d["hypothesis_yaws"]))


def huber(x, delta: float):
    """``x^2 / 2`` inside ``|x| <= delta``, linear with slope ``delta`` outside."""
    a = np.abs(x)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_grad(x, delta: float):
    return np.clip(x, -delta, delta)


def _camera_points(yaw: float, t, corr: Correspondences, size: ObjectSize) -> np.ndarray:
    x = corr.o * size.as_array()
    return x @ yaw_rotation(yaw).T + np.asarray(t, dtype=float)


def residuals(yaw: float, t, corr: Correspondences, size: ObjectSize) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted reprojection residuals (N, 2) and a per-row positive-depth flag."""
    y = _camera_points(yaw, t, corr, size)
    ok = y[:, 2] > 0
    z = np.where(ok, y[:, 2], 1.0)
    r = (y[:, :2] / z[:, None] - corr.p) * corr.w
    return r, ok


def residual(pose: Pose4DoF, corr: Correspondences, s: ObjectSize) -> np.ndarray:
    """Residual of a single correspondence; raises on nonpositive depth."""
    r, ok = residuals(pose.yaw, pose.t, corr, s)
    if not ok.all():
        raise NegativeDepthError("correspondence projects behind the camera")
    return r[0] if len(corr) == 1 else r


def robust_cost(yaw: float, t, corr: Correspondences, size: ObjectSize, settings: PnPSettings) -> float:
    r, ok = residuals(yaw, t, corr, size)
    norms = np.where(ok, np.linalg.norm(r, axis=1), settings.depth_penalty)
    return float(np.sum(huber(norms, settings.huber_delta)))


def _linear_translation(yaw: float, corr: Correspondences, size: ObjectSize, settings: PnPSettings) -> np.ndarray:
    """Weighted least squares for ``t`` at fixed yaw, refined by a few Huber IRLS passes.

    Multiplying the projection equations by depth makes them linear in ``t``:
    ``w_u (y_x - u y_z) = 0`` and ``w_v (y_y - v y_z) = 0``.
    """
    rx = (corr.o * size.as_array()) @ yaw_rotation(yaw).T
    u, v = corr.p[:, 0], corr.p[:, 1]
    n = len(corr)
    a = np.zeros((2 * n, 3))
    a[:n, 0] = 1.0
    a[:n, 2] = -u
    a[n:, 1] = 1.0
    a[n:, 2] = -v
    b = np.concatenate([-(rx[:, 0] - u * rx[:, 2]), -(rx[:, 1] - v * rx[:, 2])])
    base_w = np.concatenate([corr.w[:, 0], corr.w[:, 1]])
    row_w = base_w.copy()
    t = np.zeros(3)
    for k in range(settings.irls_iterations + 1):
        t, *_ = np.linalg.lstsq(a * row_w[:, None], b * row_w, rcond=None)
        if k == settings.irls_iterations:
            break
        y = rx + t
        depth = np.where(y[:, 2] > 1e-6, y[:, 2], 1e-6)
        r = (y[:, :2] / depth[:, None] - corr.p) * corr.w
        norms = np.linalg.norm(r, axis=1)
        robust = np.where(norms <= settings.huber_delta, 1.0, settings.huber_delta / np.maximum(norms, 1e-300))
        scale = np.sqrt(robust) / depth
        row_w = base_w * np.concatenate([scale, scale])
    return t


def _normal_equations(theta: np.ndarray, corr: Correspondences, size: ObjectSize, delta: float):
    yaw, t = theta[0], theta[1:]
    x = corr.o * size.as_array()
    y = x @ yaw_rotation(yaw).T + t
    dy_dyaw = x @ yaw_rotation_derivative(yaw).T
    z = y[:, 2]
    r = (y[:, :2] / z[:, None] - corr.p) * corr.w
    # d r / d y for both rows, then chain through (yaw, t)
    jx = corr.w[:, 0:1] * np.stack([1.0 / z, np.zeros_like(z), -y[:, 0] / z ** 2], axis=1)
    jy = corr.w[:, 1:2] * np.stack([np.zeros_like(z), 1.0 / z, -y[:, 1] / z ** 2], axis=1)
    j = np.empty((len(corr), 2, 4))
    j[:, 0, 0] = np.einsum("nk,nk->n", jx, dy_dyaw)
    j[:, 1, 0] = np.einsum("nk,nk->n", jy, dy_dyaw)
    j[:, 0, 1:] = jx
    j[:, 1, 1:] = jy
    norms = np.linalg.norm(r, axis=1)
    omega = np.where(norms <= delta, 1.0, delta / np.maximum(norms, 1e-300))
    h = np.einsum("n,nai,naj->ij", omega, j, j)
    g = np.einsum("n,nai,na->i", omega, j, r)
    return h, g


def solve(problem: PnPProblem) -> PnPSolution:
    settings = problem.settings
    corr = problem.correspondences
    active = np.flatnonzero(np.any(corr.w > 0, axis=1))
    if active.size < 4:
        raise IllPosedError(f"need at least 4 positively weighted correspondences, got {active.size}")
    corr = corr.subset(active)
    size = problem.size

    k = settings.yaw_hypotheses
    yaws = [wrap_angle(2.0 * math.pi * i / k) for i in range(k)]
    costs, seeds = [], []
    for yaw in yaws:
        t = _linear_translation(yaw, corr, size, settings)
        seeds.append(t)
        costs.append(robust_cost(yaw, t, corr, size, settings) if t[2] > 0 else math.inf)
    if not np.isfinite(costs).any():
        raise UnsolvableError("every yaw hypothesis places the object behind the camera")
    best = int(np.argmin(costs))
    theta = np.concatenate([[yaws[best]], seeds[best]])
    cost = costs[best]

    lam = settings.lambda_init
    converged = cost == 0.0
    iterations = 0
    while not converged and iterations < settings.max_iterations:
        iterations += 1
        h, g = _normal_equations(theta, corr, size, settings.huber_delta)
        damp = np.diag(np.maximum(np.diag(h), 1e-12))
        accepted = False
        while True:
            try:
                step = np.linalg.solve(h + lam * damp, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                if lam > 1e20:
                    break
                continue
            trial = theta + step
            new_cost = robust_cost(trial[0], trial[1:], corr, size, settings)
            if new_cost < cost:
                accepted = True
                decrease = (cost - new_cost) / cost
                theta, cost = trial, new_cost
                lam = max(lam * 0.1, 1e-12)
                if decrease < settings.rel_tol or np.linalg.norm(step) < settings.step_tol or cost == 0.0:
                    converged = True
                break
            lam *= 10.0
            if np.linalg.norm(step) < settings.step_tol or lam > 1e20:
                converged = True
                break
        if not accepted and not converged:
            break

    pose = Pose4DoF(theta[0], tuple(theta[1:]))
    return PnPSolution(pose, float(cost), iterations, bool(converged), [float(c) for c in costs], yaws)


def jacobian_map(solution: PnPSolution, problem: PnPProblem) -> np.ndarray:
    """Per-correspondence ``(dr_x/dt_x, dr_x/dt_z, dr_y/dt_y, dr_y/dt_z)`` of the unweighted residual."""
    y = _camera_points(solution.pose.yaw, solution.pose.t, problem.correspondences, problem.size)
    z = y[:, 2]
    return np.stack([1.0 / z, -y[:, 0] / z ** 2, 1.0 / z, -y[:, 1] / z ** 2], axis=1)


def make_problem(corr: Correspondences, size: ObjectSize, settings: Optional[PnPSettings] = None) -> PnPProblem:
    return PnPProblem(corr, size, settings or PnPSettings())
