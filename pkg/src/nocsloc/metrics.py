"""Box overlap and localization error metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .geometry import Box3D, Pose4DoF

COLLINEAR_TOL = 1e-12


def bev_polygon(box: Box3D) -> np.ndarray:
    """Footprint corners on the ground (x, z) plane, counter-clockwise, shape (4, 2)."""
    hl, hw = 0.5 * box.size.l, 0.5 * box.size.w
    local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
    c, s = math.cos(box.pose.yaw), math.sin(box.pose.yaw)
    # x' = c x + s z ; z' = -s x + c z
    x = c * local[:, 0] + s * local[:, 1] + box.pose.t[0]
    z = -s * local[:, 0] + c * local[:, 1] + box.pose.t[2]
    poly = np.stack([x, z], axis=1)
    if polygon_area(poly) < 0:
        poly = poly[::-1]
    return poly


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp, out = out, []
        for j in range(len(inp)):
            cur, prev = np.asarray(inp[j]), np.asarray(inp[j - 1])
            sc, sp = side(cur), side(prev)
            if sc >= -COLLINEAR_TOL:
                if sp < -COLLINEAR_TOL:
                    out.append(_crossing(prev, cur, sp, sc))
                out.append(tuple(cur))
            elif sp >= -COLLINEAR_TOL:
                out.append(_crossing(prev, cur, sp, sc))
    return np.array(out, dtype=float).reshape(-1, 2)


def _crossing(p, q, sp, sq):
    t = sp / (sp - sq)
    return tuple(p + t * (q - p))


def bev_intersection(a: Box3D, b: Box3D) -> float:
    poly = clip_polygon(bev_polygon(a), bev_polygon(b))
    return max(polygon_area(poly), 0.0)


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    union = a.size.l * a.size.w + b.size.l * b.size.w - inter
    return float(min(max(inter / union, 0.0), 1.0))


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.pose.t[1] - 0.5 * a.size.h, b.pose.t[1] - 0.5 * b.size.h)
    hi = min(a.pose.t[1] + 0.5 * a.size.h, b.pose.t[1] + 0.5 * b.size.h)
    return max(hi - lo, 0.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b) * vertical_overlap(a, b)
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0))


def depth_mae(pred: Sequence[float], gt: Sequence[float]) -> float:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in length")
    if pred.size == 0:
        raise ValueError("depth MAE of an empty list")
    return float(np.mean(np.abs(pred - gt)))


def pose_errors(pred: Pose4DoF, gt: Pose4DoF):
    """``(yaw_error_deg, translation_error_m)``; yaw error wraps into [0, 180]."""
    d = abs(math.remainder(pred.yaw - gt.yaw, 2.0 * math.pi))
    return math.degrees(d), float(np.linalg.norm(pred.translation - gt.translation))


METRIC_FIELDS = ("iou3d", "iou_bev", "depth_abs_error", "yaw_error_deg", "translation_error_m")


@dataclass
class MetricReport:
    rows: List[Dict[str, float]] = field(default_factory=list)

    def add(self, pred: Box3D, gt: Box3D, **extra) -> Dict[str, float]:
        yaw_err, t_err = pose_errors(pred.pose, gt.pose)
        row = dict(extra)
        row.update(
            iou3d=iou_3d(pred, gt),
            iou_bev=iou_bev(pred, gt),
            depth_abs_error=abs(pred.pose.t[2] - gt.pose.t[2]),
            yaw_error_deg=yaw_err,
            translation_error_m=t_err,
        )
        self.rows.append(row)
        return row

    def aggregates(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for key in METRIC_FIELDS:
            vals = [r[key] for r in self.rows if key in r]
            if vals:
                out[key] = {"mean": float(np.mean(vals)), "median": float(np.median(vals))}
        return out
