"""Blend the PnP depth with a directly regressed object depth.

Size and translation are rescaled by the same factor, so every projected ray
and therefore every reprojection residual is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ObjectSize, Pose4DoF
from .pnp import PnPSolution


@dataclass(frozen=True)
class FusionInput:
    solution: PnPSolution
    size: ObjectSize
    d_pred: float
    w: float = 0.5

    def __post_init__(self):
        if not self.d_pred > 0:
            raise ValueError(f"predicted depth must be positive, got {self.d_pred}")
        if not self.solution.pose.t[2] > 0:
            raise ValueError("PnP depth must be positive")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"fusion weight must lie in [0, 1], got {self.w}")


@dataclass(frozen=True)
class FusedEstimate:
    pose: Pose4DoF
    size: ObjectSize
    scale: float

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_dict(), "size": self.size.as_array().tolist(), "scale": self.scale}


def fusion_scale(depth: float, d_pred: float, w: float = 0.5) -> float:
    """``(w * d_pred + (1 - w) * depth) / depth``."""
    return (w * d_pred + (1.0 - w) * depth) / depth


def scale_fuse(inp: FusionInput) -> FusedEstimate:
    pose = inp.solution.pose
    depth = pose.t[2]
    if inp.d_pred == depth or inp.w == 0.0:
        return FusedEstimate(pose, inp.size, 1.0)
    lam = fusion_scale(depth, inp.d_pred, inp.w)
    t = np.asarray(pose.t) * lam
    fused_depth = inp.w * inp.d_pred + (1.0 - inp.w) * depth
    # exact convex combination rather than the rounded product
    t[2] = fused_depth
    return FusedEstimate(Pose4DoF(pose.yaw, tuple(t)), inp.size.scaled(lam), lam)
