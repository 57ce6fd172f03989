"""Deterministic synthetic scenes with analytic shapes.

Stands in for real driving data: every object is an analytic density field
inside its 3D box, rendered by fine ray marching into ground-truth occupancy,
NOCS and color crops. Tri-masks, simulated lidar, noisy correspondences and a
noisy direct depth estimate are derived from those renders with per-object
random streams keyed on ``(seed, object index)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .fit import TrainingObject, TriMask, is_basis_eligible
from .geometry import (
    Box3D,
    CameraIntrinsics,
    ObjectSize,
    Pose4DoF,
    camera_rays,
    pixel_to_normalized,
    project,
    rays_to_object,
    slab_intersect,
)
from .losses import BACKGROUND, FOREGROUND, UNKNOWN
from .pnp import Correspondences

SIGMA_MAX = 1e4
SCHEMA_VERSION = 1
BACKGROUND_COLOR = (0.35, 0.35, 0.38)
OCCLUDER_COLOR = (0.15, 0.15, 0.15)


class SceneError(ValueError):
    """Invalid scene description; the message names the offending field."""


# --------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Primitive:
    """``box`` (extent), ``ellipsoid`` (radii) or ``union`` (parts), all in NOCS units."""

    kind: str = "box"
    extent: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    radii: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    parts: Tuple["Primitive", ...] = ()

    def to_dict(self) -> dict:
        if self.kind == "union":
            return {"type": "union", "parts": [p.to_dict() for p in self.parts]}
        d = {"type": self.kind, "center": list(self.center)}
        d["extent" if self.kind == "box" else "radii"] = list(self.extent if self.kind == "box" else self.radii)
        return d

    @classmethod
    def from_dict(cls, d: dict, where: str = "primitive") -> "Primitive":
        kind = d.get("type", "box")
        try:
            if kind == "union":
                parts = d.get("parts") or []
                if not parts:
                    raise SceneError(f"{where}.parts: union needs at least one part")
                return cls("union", parts=tuple(cls.from_dict(p, f"{where}.parts[{i}]") for i, p in enumerate(parts)))
            center = _vec3(d.get("center", (0, 0, 0)), f"{where}.center")
            if kind == "box":
                return cls("box", extent=_vec3(d.get("extent", (1, 1, 1)), f"{where}.extent", positive=True), center=center)
            if kind == "ellipsoid":
                return cls("ellipsoid", radii=_vec3(d.get("radii", (0.5, 0.5, 0.5)), f"{where}.radii", positive=True), center=center)
        except (TypeError, ValueError) as e:
            if isinstance(e, SceneError):
                raise
            raise SceneError(f"{where}: {e}") from None
        raise SceneError(f"{where}.type: unknown primitive {kind!r}")


def analytic_density(primitive: Primitive, o) -> np.ndarray:
    """``SIGMA_MAX`` inside the primitive (clipped to the NOCS cube), 0 elsewhere."""
    o = np.asarray(o, dtype=float)
    single = o.ndim == 1
    o = np.atleast_2d(o)
    inside = _inside(primitive, o) & np.all(np.abs(o) <= 0.5, axis=1)
    out = np.where(inside, SIGMA_MAX, 0.0)
    return out[0] if single else out


def _inside(p: Primitive, o: np.ndarray) -> np.ndarray:
    if p.kind == "union":
        mask = np.zeros(o.shape[0], dtype=bool)
        for part in p.parts:
            mask |= _inside(part, o)
        return mask
    rel = o - np.asarray(p.center)
    if p.kind == "box":
        return np.all(np.abs(rel) <= 0.5 * np.asarray(p.extent), axis=1)
    return np.sum((rel / np.asarray(p.radii)) ** 2, axis=1) <= 1.0


def _vec3(v, where, positive=False):
    try:
        out = tuple(float(x) for x in v)
    except TypeError:
        raise SceneError(f"{where}: expected a list of 3 numbers") from None
    if len(out) != 3:
        raise SceneError(f"{where}: expected 3 values, got {len(out)}")
    if positive and min(out) <= 0:
        raise SceneError(f"{where}: values must be positive")
    return out


# --------------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class ObjectSpec:
    box: Box3D
    primitive: Primitive = Primitive()
    albedo: Tuple[float, float, float] = (0.8, 0.2, 0.2)
    allow_behind: bool = False


@dataclass(frozen=True)
class LidarSpec:
    samples: int = 0
    dropout: float = 0.0
    depth_noise: float = 0.02


@dataclass(frozen=True)
class NoiseSpec:
    nocs_sigma: float = 0.0
    outlier_fraction: float = 0.0
    weight_noise: float = 0.0
    depth_sigma: float = 0.05
    size_sigma: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    camera: CameraIntrinsics
    width: int
    height: int
    objects: Tuple[ObjectSpec, ...]
    occluders: Tuple[Tuple[int, int, int, int], ...] = ()
    lidar: LidarSpec = LidarSpec()
    noise: NoiseSpec = NoiseSpec()
    seed: int = 0
    march_samples: int = 4096
    crop_margin: int = 4

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "camera": {**self.camera.to_dict(), "width": self.width, "height": self.height},
            "objects": [
                {"box": o.box.to_dict(), "primitive": o.primitive.to_dict(), "albedo": list(o.albedo),
                 "allow_behind": o.allow_behind}
                for o in self.objects
            ],
            "occluders": [list(r) for r in self.occluders],
            "lidar": self.lidar.__dict__.copy(),
            "noise": self.noise.__dict__.copy(),
            "march_samples": self.march_samples,
            "crop_margin": self.crop_margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        if not isinstance(d, dict):
            raise SceneError("scene: expected a JSON object")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise SceneError(f"schema_version: unsupported version {version}")
        cam = d.get("camera")
        if not isinstance(cam, dict):
            raise SceneError("camera: missing camera block")
        try:
            camera = CameraIntrinsics.from_dict(cam)
            width, height = int(cam["width"]), int(cam["height"])
        except KeyError as e:
            raise SceneError(f"camera.{e.args[0]}: missing field") from None
        except (TypeError, ValueError) as e:
            raise SceneError(f"camera: {e}") from None
        if width < 1 or height < 1:
            raise SceneError("camera.width/height: must be positive")
        raw_objects = d.get("objects")
        if not isinstance(raw_objects, list):
            raise SceneError("objects: expected a list")
        if not raw_objects:
            raise SceneError("objects: empty scene")
        objects = []
        for i, o in enumerate(raw_objects):
            where = f"objects[{i}]"
            try:
                b = o["box"]
                box = Box3D(Pose4DoF(float(b["yaw"]), _vec3(b["center"], f"{where}.box.center")),
                            ObjectSize.from_array(_vec3(b["size"], f"{where}.box.size", positive=True)))
            except KeyError as e:
                raise SceneError(f"{where}.box.{e.args[0]}: missing field") from None
            except (TypeError, ValueError) as e:
                if isinstance(e, SceneError):
                    raise
                raise SceneError(f"{where}.box: {e}") from None
            objects.append(ObjectSpec(
                box,
                Primitive.from_dict(o.get("primitive", {"type": "box"}), f"{where}.primitive"),
                _vec3(o.get("albedo", (0.8, 0.2, 0.2)), f"{where}.albedo"),
                bool(o.get("allow_behind", False)),
            ))
        occluders = []
        for i, r in enumerate(d.get("occluders", [])):
            if len(r) != 4:
                raise SceneError(f"occluders[{i}]: expected [x0, y0, x1, y1]")
            occluders.append(tuple(int(v) for v in r))
        try:
            lidar = LidarSpec(**d.get("lidar", {}))
            noise = NoiseSpec(**d.get("noise", {}))
        except TypeError as e:
            raise SceneError(f"lidar/noise: {e}") from None
        return cls(camera, width, height, tuple(objects), tuple(occluders), lidar, noise,
                   int(d.get("seed", 0)), int(d.get("march_samples", 4096)), int(d.get("crop_margin", 4)))


# --------------------------------------------------------------------------
# generation


@dataclass
class GeneratedObject:
    index: int
    training: TrainingObject
    gt_occupancy: np.ndarray  # (H, W)
    gt_nocs: np.ndarray  # (H, W, 3), NaN where empty
    silhouette: np.ndarray  # (H, W) bool
    clean: Correspondences
    noisy: Correspondences
    outliers: np.ndarray  # (N,) bool, rows of ``noisy`` replaced by uniform draws
    correspondence_pixels: np.ndarray  # (N, 2) crop (col, row)
    d_pred: float
    size_pred: ObjectSize
    box_height_px: float

    @property
    def box(self) -> Box3D:
        return self.training.box


def march_analytic(primitive: Primitive, box: Box3D, origins, directions, samples: int,
                   albedo=(0.8, 0.2, 0.2), chunk: int = 256):
    """Fine ray marching of an analytic field.

    Returns ``(hit, occupancy, nocs, color, depth)``; NOCS and depth are NaN
    where the occupancy is below 1e-3.
    """
    q, d = rays_to_object(origins, directions, box)
    size = box.size.as_array()
    hit, near, far = slab_intersect(q, d, 0.5 * size)
    n = q.shape[0]
    occ = np.zeros(n)
    nocs = np.full((n, 3), np.nan)
    color = np.zeros((n, 3))
    depth = np.full(n, np.nan)
    idx = np.flatnonzero(hit)
    frac = (np.arange(samples) + 0.5) / samples
    albedo = np.asarray(albedo, dtype=float)
    for start in range(0, idx.size, chunk):
        sel = idx[start:start + chunk]
        length = far[sel] - near[sel]
        gamma = near[sel, None] + frac * length[:, None]
        pts = (q[sel, None, :] + gamma[..., None] * d[sel, None, :]) / size
        sigma = analytic_density(primitive, pts.reshape(-1, 3)).reshape(sel.size, samples)
        a = sigma * (length / samples)[:, None]
        acc = np.cumsum(a, axis=1)
        w = np.exp(-(acc - a)) * -np.expm1(-a)
        m = w.sum(axis=1)
        ok = m >= 1e-3
        num = np.einsum("hs,hsk->hk", w, pts)
        # brighter towards the top face (object y points down)
        shade = np.einsum("hs,hs->h", w, 0.75 + 0.25 * (0.5 - pts[..., 1]))
        occ[sel] = m
        color[sel] = shade[:, None] * albedo
        good = sel[ok]
        nocs[good] = num[ok] / m[ok, None]
        depth[good] = np.einsum("hs,hs->h", w[ok], gamma[ok]) / m[ok]
    return hit, occ, nocs, color, depth


def object_crop(box: Box3D, camera: CameraIntrinsics, width: int, height: int, margin: int):
    """Integer crop ``(x0, y0, x1, y1)`` around the projected box (half-open) and its pixel height."""
    uv = project(box.corners(), camera)
    x0 = max(int(np.floor(uv[:, 0].min())) - margin, 0)
    y0 = max(int(np.floor(uv[:, 1].min())) - margin, 0)
    x1 = min(int(np.ceil(uv[:, 0].max())) + margin + 1, width)
    y1 = min(int(np.ceil(uv[:, 1].max())) + margin + 1, height)
    return (x0, y0, x1, y1), float(uv[:, 1].max() - uv[:, 1].min())


def generate(spec: SceneSpec, only: Optional[Sequence[int]] = None) -> List[GeneratedObject]:
    """Render every object of ``spec`` (or the indices in ``only``)."""
    if not spec.objects:
        raise SceneError("objects: empty scene")
    out = []
    for i, ospec in enumerate(spec.objects):
        if only is not None and i not in only:
            continue
        corners_z = ospec.box.corners()[:, 2]
        if np.all(corners_z <= 0):
            if ospec.allow_behind:
                continue
            raise SceneError(f"objects[{i}]: object is fully behind the camera")
        if np.any(corners_z <= 0):
            raise SceneError(f"objects[{i}]: object crosses the camera plane")
        out.append(_generate_object(spec, i, ospec))
    return out


def _generate_object(spec: SceneSpec, index: int, ospec: ObjectSpec) -> GeneratedObject:
    streams = np.random.SeedSequence([spec.seed, index]).spawn(4)
    rng_lidar, rng_noise, rng_depth, rng_weight = (np.random.default_rng(s) for s in streams)
    box, cam = ospec.box, spec.camera
    (x0, y0, x1, y1), box_height = object_crop(box, cam, spec.width, spec.height, spec.crop_margin)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise SceneError(f"objects[{index}]: object projects outside the image")
    rows, cols = np.mgrid[0:h, 0:w]
    uv = np.stack([cols.ravel() + x0, rows.ravel() + y0], axis=1).astype(float)
    origins, dirs = camera_rays(uv, cam)
    _, occ, nocs, shade, depth = march_analytic(ospec.primitive, box, origins, dirs, spec.march_samples, ospec.albedo)
    occ = occ.reshape(h, w)
    nocs = nocs.reshape(h, w, 3)
    shade = shade.reshape(h, w, 3)
    depth = depth.reshape(h, w)

    silhouette = occ >= 0.5
    occluded = np.zeros((h, w), dtype=bool)
    for (ox0, oy0, ox1, oy1) in spec.occluders:
        occluded[max(oy0 - y0, 0):max(oy1 - y0, 0), max(ox0 - x0, 0):max(ox1 - x0, 0)] = True
    labels = np.full((h, w), BACKGROUND, dtype=np.uint8)
    labels[silhouette] = FOREGROUND
    labels[occluded] = UNKNOWN
    mask = TriMask(labels)

    colors = np.where(silhouette[..., None], shade, np.asarray(BACKGROUND_COLOR))
    colors[occluded] = OCCLUDER_COLOR

    fg = labels == FOREGROUND
    lidar_pixels, lidar_nocs = _simulate_lidar(spec.lidar, box, cam, fg, depth, (x0, y0), rng_lidar)

    pix = np.argwhere(fg & np.isfinite(nocs[..., 0]))[:, ::-1]  # (col, row)
    p = pixel_to_normalized(pix[:, 0] + x0, pix[:, 1] + y0, cam)[:, :2]
    o = nocs[pix[:, 1], pix[:, 0]]
    prob = occ[pix[:, 1], pix[:, 0]]
    wts = np.stack([prob, prob], axis=1)
    clean = Correspondences(p, o, wts)
    noisy_o, outliers = corrupt_nocs(o, spec.noise, rng_noise)
    noisy_w = wts * np.exp(spec.noise.weight_noise * rng_weight.standard_normal(wts.shape)) if spec.noise.weight_noise else wts
    noisy = Correspondences(p, noisy_o, noisy_w)

    d_pred = float(box.pose.t[2] * np.exp(spec.noise.depth_sigma * rng_depth.standard_normal()))
    size_factor = float(np.exp(spec.noise.size_sigma * rng_depth.standard_normal())) if spec.noise.size_sigma else 1.0
    size_pred = box.size.scaled(size_factor)

    training = TrainingObject(
        colors=colors, mask=mask, box=box, camera=cam, crop_offset=(x0, y0),
        lidar_pixels=lidar_pixels, lidar_nocs=lidar_nocs,
        basis_eligible=is_basis_eligible(box_height, mask, silhouette),
    )
    return GeneratedObject(index, training, occ, nocs, silhouette, clean, noisy, outliers, pix,
                           d_pred, size_pred, box_height)


def corrupt_nocs(o: np.ndarray, noise: NoiseSpec, rng: np.random.Generator):
    """Gaussian jitter plus a fraction of rows replaced by uniform cube draws."""
    out = o + noise.nocs_sigma * rng.standard_normal(o.shape) if noise.nocs_sigma else o.copy()
    outliers = np.zeros(o.shape[0], dtype=bool)
    if noise.outlier_fraction:
        k = int(round(noise.outlier_fraction * o.shape[0]))
        idx = rng.choice(o.shape[0], size=k, replace=False)
        outliers[idx] = True
        out[idx] = rng.uniform(-0.5, 0.5, size=(k, 3))
    return out, outliers


def _simulate_lidar(lidar: LidarSpec, box: Box3D, cam: CameraIntrinsics, fg: np.ndarray, depth: np.ndarray,
                    offset, rng: np.random.Generator):
    if lidar.samples <= 0 or not fg.any():
        return None, None
    h, w = fg.shape
    picks = []
    # rejection sampling over the crop; bounded number of rounds
    for _ in range(50):
        cand = rng.integers(0, h * w, size=lidar.samples)
        picks.extend(int(c) for c in cand if fg.flat[c] and np.isfinite(depth.flat[c]))
        if len(picks) >= lidar.samples:
            break
    picks = np.array(picks[:lidar.samples], dtype=np.int64)
    keep = rng.random(picks.size) >= lidar.dropout
    picks = picks[keep]
    if picks.size == 0:
        return None, None
    cols, rows = picks % w, picks // w
    uv = np.stack([cols + offset[0], rows + offset[1]], axis=1).astype(float)
    _, dirs = camera_rays(uv, cam)
    gamma = depth.flat[picks] + lidar.depth_noise * rng.standard_normal(picks.size)
    pts = dirs * gamma[:, None]
    q = (pts - box.pose.translation) @ box.pose.rotation
    o = q / box.size.as_array()
    inside = np.all(np.abs(o) <= 0.5, axis=1)
    if not inside.any():
        return None, None
    return uv[inside], o[inside]


def box_surface_correspondences(box: Box3D, camera: CameraIntrinsics, count: int, rng: np.random.Generator,
                                width: Optional[int] = None, height: Optional[int] = None) -> Tuple[Correspondences, np.ndarray]:
    """Exact visible-surface NOCS of a solid box at random pixels inside its projection.

    Fast analytic path for large PnP benchmarks: for a box-filling primitive
    the marched NOCS converges to the ray's entry point. Returns the
    correspondences and their pixel positions.
    """
    uv_c = project(box.corners(), camera)
    lo, hi = uv_c.min(axis=0), uv_c.max(axis=0)
    if width is not None:
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, [width, height])
    found_o, found_uv = [], []
    total = 0
    for _ in range(100):
        uv = rng.uniform(lo, hi, size=(2 * count, 2))
        origins, dirs = camera_rays(uv, camera)
        q, d = rays_to_object(origins, dirs, box)
        hit, near, _ = slab_intersect(q, d, 0.5 * box.size.as_array())
        o = (q[hit] + near[hit, None] * d[hit]) / box.size.as_array()
        found_o.append(o)
        found_uv.append(uv[hit])
        total += int(hit.sum())
        if total >= count:
            break
    o = np.concatenate(found_o)[:count]
    uv = np.concatenate(found_uv)[:count]
    if len(o) < count:
        raise SceneError("box covers too few pixels for the requested correspondence count")
    o = np.clip(o, -0.5, 0.5)
    p = pixel_to_normalized(uv[:, 0], uv[:, 1], camera)[:, :2]
    return Correspondences(p, o, np.ones((count, 2))), uv


def random_box(rng: np.random.Generator, depth_range=(8.0, 30.0), lateral=4.0) -> Box3D:
    """A car-sized box in front of the camera."""
    z = rng.uniform(*depth_range)
    size = ObjectSize(rng.uniform(3.5, 4.8), rng.uniform(1.4, 1.8), rng.uniform(1.5, 1.9))
    t = (rng.uniform(-lateral, lateral), rng.uniform(0.8, 1.8), z)
    return Box3D(Pose4DoF(rng.uniform(-np.pi, np.pi), t), size)


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(720.0, 720.0, 620.0, 190.0)
