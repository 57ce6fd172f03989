"""Camera model, yaw-only object pose, 3D boxes and ray/box intersection.

Conventions
-----------
Camera frame: x right, y down, z forward (optical axis).

Object frame: origin at the box center, x along the length ``l``, y along the
height ``h`` (pointing down, like the camera), z along the width ``w``.
Yaw is a rotation about the camera-frame y axis::

    R(yaw) = [[ cos, 0, sin],
              [   0, 1,   0],
              [-sin, 0, cos]]

Normalized object coordinates (NOCS) live in the centered cube
``[-0.5, 0.5]^3`` so that an object-frame point is ``x = o * s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


def wrap_angle(angle: float) -> float:
    """Wrap an angle in radians to ``(-pi, pi]``."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass(frozen=True)
class Pose4DoF:
    """Yaw angle plus object center, both in the camera frame."""

    yaw: float
    t: Tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        if len(self.t) != 3:
            raise ValueError("translation must have three components")

    @property
    def rotation(self) -> np.ndarray:
        return yaw_rotation(self.yaw)

    @property
    def translation(self) -> np.ndarray:
        return np.asarray(self.t, dtype=float)

    def to_dict(self) -> dict:
        return {"yaw": self.yaw, "t": list(self.t)}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose4DoF":
        return cls(float(d["yaw"]), tuple(d["t"]))


@dataclass(frozen=True)
class ObjectSize:
    l: float
    h: float
    w: float

    def __post_init__(self):
        if not (self.l > 0 and self.h > 0 and self.w > 0):
            raise ValueError(f"object size must be strictly positive, got {self.as_array()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.l, self.h, self.w], dtype=float)

    def scaled(self, factor: float) -> "ObjectSize":
        return ObjectSize(self.l * factor, self.h * factor, self.w * factor)

    @classmethod
    def from_array(cls, a) -> "ObjectSize":
        l, h, w = (float(v) for v in a)
        return cls(l, h, w)


@dataclass(frozen=True)
class Box3D:
    pose: Pose4DoF
    size: ObjectSize

    def corners(self) -> np.ndarray:
        """The 8 corners in the camera frame, shape (8, 3)."""
        signs = np.array([[sx, sy, sz] for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)])
        return object_to_world(signs * self.size.as_array(), self.pose)

    @property
    def volume(self) -> float:
        return self.size.l * self.size.h * self.size.w

    def to_dict(self) -> dict:
        return {"yaw": self.pose.yaw, "center": list(self.pose.t), "size": self.size.as_array().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(Pose4DoF(float(d["yaw"]), tuple(d["center"])), ObjectSize.from_array(d["size"]))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got norm {n}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d)

    def at(self, gamma: float) -> np.ndarray:
        return self.origin + gamma * self.direction


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def yaw_rotation_derivative(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def pixel_to_normalized(u_px, v_px, K: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates to normalized camera coordinates ``[u, v, 1]``.

    Accepts scalars or equally shaped arrays; the result has a trailing axis
    of length 3.
    """
    u = (np.asarray(u_px, dtype=float) - K.cx) / K.fx
    v = (np.asarray(v_px, dtype=float) - K.cy) / K.fy
    return np.stack([u, v, np.ones_like(u)], axis=-1)


def normalized_to_pixel(p, K: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.stack([p[..., 0] / p[..., 2] * K.fx + K.cx, p[..., 1] / p[..., 2] * K.fy + K.cy], axis=-1)


def project(points_cam, K: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixels (..., 2)."""
    return normalized_to_pixel(points_cam, K)


def object_to_world(x_obj, pose: Pose4DoF) -> np.ndarray:
    """``R(yaw) x + t`` for points with a trailing axis of length 3."""
    return np.asarray(x_obj, dtype=float) @ pose.rotation.T + pose.translation


def world_to_object(x_cam, pose: Pose4DoF) -> np.ndarray:
    """``R(yaw)^T (x - t)``; inverse of :func:`object_to_world`."""
    return (np.asarray(x_cam, dtype=float) - pose.translation) @ pose.rotation


def nocs_of(x_obj, s: ObjectSize) -> np.ndarray:
    return np.asarray(x_obj, dtype=float) / s.as_array()


def camera_rays(pixels_uv, K: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Rays through pixel positions from the camera center.

    Returns ``(origins, directions)``, each (N, 3), directions unit length.
    """
    p = pixel_to_normalized(pixels_uv[..., 0], pixels_uv[..., 1], K).reshape(-1, 3)
    d = p / np.linalg.norm(p, axis=1, keepdims=True)
    return np.zeros_like(d), d


def slab_intersect(origins, directions, half_extent) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized slab test against the axis-aligned box ``[-half, half]``.

    Returns ``(hit, gamma_near, gamma_far)``. The near distance is clipped to
    zero for rays starting inside the box; for misses both distances are 0.
    """
    q = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    half = np.asarray(half_extent, dtype=float)
    near = np.full(q.shape[0], -np.inf)
    far = np.full(q.shape[0], np.inf)
    inside = np.ones(q.shape[0], dtype=bool)
    for a in range(3):
        parallel = np.abs(d[:, a]) < 1e-300
        inside &= ~(parallel & (np.abs(q[:, a]) > half[a]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[a] - q[:, a]) / d[:, a]
            t2 = (half[a] - q[:, a]) / d[:, a]
        lo = np.where(parallel, -np.inf, np.minimum(t1, t2))
        hi = np.where(parallel, np.inf, np.maximum(t1, t2))
        near = np.maximum(near, lo)
        far = np.minimum(far, hi)
    near = np.maximum(near, 0.0)
    hit = inside & (far > near)
    return hit, np.where(hit, near, 0.0), np.where(hit, far, 0.0)


def rays_to_object(origins, directions, box: Box3D) -> Tuple[np.ndarray, np.ndarray]:
    """Express camera-frame rays in the box's object frame (metric, unscaled)."""
    R = box.pose.rotation
    q = (np.atleast_2d(origins) - box.pose.translation) @ R
    d = np.atleast_2d(directions) @ R
    return q, d


def ray_box_intersect(ray: Ray, box: Box3D) -> Optional[Tuple[float, float]]:
    """Entry/exit distances of a ray through a yawed box, or ``None`` on a miss."""
    q, d = rays_to_object(ray.origin, ray.direction, box)
    hit, near, far = slab_intersect(q, d, 0.5 * box.size.as_array())
    if not hit[0]:
        return None
    return float(near[0]), float(far[0])
