"""Emission-absorption rendering of occupancy, color and NOCS inside a 3D box.

Rays are clipped to the object's box and sampled uniformly between the entry
and exit distances. With ``a_j = sigma_j * delta`` the compositing weights are

    T_j = exp(-sum_{k<j} a_k),    w_j = T_j (1 - exp(-a_j))

and the pixel values are ``m = sum w_j``, ``c = sum w_j c_j`` and
``o = sum w_j r_j / m`` where ``r_j`` is the NOCS of sample ``j``. NOCS is
reported only when ``m >= occupancy_epsilon``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Box3D, CameraIntrinsics, Ray, camera_rays, rays_to_object, slab_intersect
from .grid import DeformableShapeModel, ModelGrad, evaluate, evaluate_backward, interpolation_plan

CHUNK_RAYS = 1024


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 64
    stratified_jitter: bool = False
    occupancy_epsilon: float = 1e-3

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be at least 2")
        if not 0.0 < self.occupancy_epsilon < 1.0:
            raise ValueError("occupancy_epsilon must lie in (0, 1)")


@dataclass
class RenderedPixel:
    occupancy: float
    color: np.ndarray
    nocs: Optional[np.ndarray]
    hit: bool


@dataclass
class RenderBatch:
    """Per-ray outputs of :func:`render_rays`; ``nocs`` is NaN where invalid."""

    occupancy: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    nocs: np.ndarray  # (N, 3)
    valid: np.ndarray  # (N,) NOCS valid
    hit: np.ndarray  # (N,)
    cache: Optional["_RenderCache"] = None


@dataclass
class RenderedMaps:
    width: int
    height: int
    occupancy: np.ndarray  # (H, W)
    color: np.ndarray  # (H, W, 3)
    nocs: np.ndarray  # (H, W, 3), NaN where invalid
    valid: np.ndarray  # (H, W)
    hit: np.ndarray  # (H, W)
    rendered: np.ndarray  # (H, W) pixels that were actually rendered

    def pixel(self, col: int, row: int) -> Optional[RenderedPixel]:
        if not self.rendered[row, col]:
            return None
        nocs = self.nocs[row, col].copy() if self.valid[row, col] else None
        return RenderedPixel(float(self.occupancy[row, col]), self.color[row, col].copy(), nocs, bool(self.hit[row, col]))


@dataclass
class _RenderCache:
    hit_idx: np.ndarray
    delta: np.ndarray  # (H,)
    trans: np.ndarray  # (H, S) T_j
    trans_next: np.ndarray  # (H, S) T_{j+1}
    weights: np.ndarray  # (H, S)
    sample_color: np.ndarray  # (H, S, 3)
    sample_nocs: np.ndarray  # (H, S, 3)
    shape_cache: object
    color_cache: object
    occupancy: np.ndarray  # (H,) for the hit rays
    nocs: np.ndarray  # (H, 3)
    valid: np.ndarray  # (H,)


def hash_uniform(seed: int, keys: np.ndarray, count: int) -> np.ndarray:
    """Counter-based uniforms in [0, 1): shape ``keys.shape + (count,)``.

    Each value depends only on ``(seed, key, sample)`` so jitter is identical
    however rays are batched.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    x = (keys[..., None] * np.uint64(count) + np.arange(count, dtype=np.uint64)) ^ np.uint64(
        (seed * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    )
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def render_rays(
    shape: DeformableShapeModel,
    z_shape,
    color: DeformableShapeModel,
    z_color,
    origins: np.ndarray,
    directions: np.ndarray,
    box: Box3D,
    cfg: RenderConfig = RenderConfig(),
    jitter: Optional[np.ndarray] = None,
    keep_cache: bool = False,
) -> RenderBatch:
    """Render a batch of camera-frame rays through ``box``.

    ``jitter`` holds per-ray, per-sample offsets in [0, 1) and is only used
    when ``cfg.stratified_jitter`` is set; otherwise samples sit at the
    midpoints of equal intervals.
    """
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    n = origins.shape[0]
    size = box.size.as_array()
    q, d = rays_to_object(origins, directions, box)
    hit, near, far = slab_intersect(q, d, 0.5 * size)

    occupancy = np.zeros(n)
    out_color = np.zeros((n, 3))
    out_nocs = np.full((n, 3), np.nan)
    valid = np.zeros(n, dtype=bool)
    hit_idx = np.flatnonzero(hit)
    if hit_idx.size == 0:
        return RenderBatch(occupancy, out_color, out_nocs, valid, hit, None)

    s = cfg.samples_per_ray
    if cfg.stratified_jitter:
        if jitter is None:
            raise ValueError("stratified jitter requested without jitter offsets")
        frac = (np.arange(s) + np.asarray(jitter)[hit_idx]) / s
    else:
        frac = np.broadcast_to((np.arange(s) + 0.5) / s, (hit_idx.size, s))
    gn, gf = near[hit_idx], far[hit_idx]
    length = gf - gn
    gamma = gn[:, None] + frac * length[:, None]
    delta = length / s
    pts = (q[hit_idx, None, :] + gamma[..., None] * d[hit_idx, None, :]) / size
    flat = pts.reshape(-1, 3) + 0.5

    plan = interpolation_plan(shape.layout, flat)
    sigma, _, shape_cache = evaluate(shape, z_shape, plan)
    cplan = plan if color.layout == shape.layout else interpolation_plan(color.layout, flat)
    _, rgb, color_cache = evaluate(color, z_color, cplan)
    sigma = sigma.reshape(hit_idx.size, s)
    rgb = rgb.reshape(hit_idx.size, s, 3)

    a = sigma * delta[:, None]
    acc = np.cumsum(a, axis=1)
    trans = np.exp(-(acc - a))
    trans_next = np.exp(-acc)
    w = trans * -np.expm1(-a)

    m = w.sum(axis=1)
    c = np.einsum("hs,hsk->hk", w, rgb)
    num = np.einsum("hs,hsk->hk", w, pts)
    ok = m >= cfg.occupancy_epsilon
    o = np.full((hit_idx.size, 3), np.nan)
    o[ok] = num[ok] / m[ok, None]

    occupancy[hit_idx] = m
    out_color[hit_idx] = c
    out_nocs[hit_idx] = o
    valid[hit_idx] = ok
    cache = None
    if keep_cache:
        cache = _RenderCache(hit_idx, delta, trans, trans_next, w, rgb, pts, shape_cache, color_cache, m, o, ok)
    return RenderBatch(occupancy, out_color, out_nocs, valid, hit, cache)


def render_rays_backward(batch: RenderBatch, d_occupancy=None, d_color=None, d_nocs=None):
    """Gradients of a scalar loss w.r.t. both models and their coefficients.

    Cotangents are per ray; ``d_nocs`` is ignored on rays without valid NOCS.
    Returns ``(shape_grad, color_grad)``; either is ``None`` when the batch
    hit nothing.
    """
    cache = batch.cache
    if cache is None:
        if batch.hit.any():
            raise ValueError("batch was rendered without keep_cache")
        return None, None
    idx = cache.hit_idx
    h = idx.size
    dm = np.zeros(h) if d_occupancy is None else np.asarray(d_occupancy, dtype=float)[idx].copy()
    dc = np.zeros((h, 3)) if d_color is None else np.asarray(d_color, dtype=float)[idx]
    d_num = np.zeros((h, 3))
    if d_nocs is not None:
        do = np.where(cache.valid[:, None], np.nan_to_num(np.asarray(d_nocs, dtype=float)[idx]), 0.0)
        ok = cache.valid
        d_num[ok] = do[ok] / cache.occupancy[ok, None]
        dm[ok] -= np.einsum("hk,hk->h", do[ok], cache.nocs[ok]) / cache.occupancy[ok]

    g = dm[:, None] + np.einsum("hk,hsk->hs", dc, cache.sample_color) + np.einsum(
        "hk,hsk->hs", d_num, cache.sample_nocs
    )
    gw = g * cache.weights
    later = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw
    d_a = cache.trans_next * g - later
    d_sigma = (d_a * cache.delta[:, None]).ravel()
    d_rgb = (dc[:, None, :] * cache.weights[..., None]).reshape(-1, 3)

    shape_grad = evaluate_backward(cache.shape_cache, d_sigma, None)
    color_grad = evaluate_backward(cache.color_cache, None, d_rgb)
    return shape_grad, color_grad


def render_ray(shape, z_shape, color, z_color, ray: Ray, box: Box3D, cfg: RenderConfig = RenderConfig(), jitter=None) -> RenderedPixel:
    batch = render_rays(
        shape, z_shape, color, z_color, ray.origin[None], ray.direction[None], box, cfg,
        None if jitter is None else np.asarray(jitter)[None],
    )
    nocs = batch.nocs[0].copy() if batch.valid[0] else None
    return RenderedPixel(float(batch.occupancy[0]), batch.color[0].copy(), nocs, bool(batch.hit[0]))


def render_ray_grad(shape, z_shape, color, z_color, ray: Ray, box: Box3D, cfg: RenderConfig = RenderConfig(),
                    d_occupancy: float = 0.0, d_color=None, d_nocs=None, jitter=None):
    """Single-ray render plus the vector-Jacobian product for the given cotangents.

    Returns ``(pixel, shape_grad, color_grad)``. The NOCS cotangent is dropped
    when the pixel's NOCS is invalid, so no NaN ever reaches a gradient.
    """
    batch = render_rays(
        shape, z_shape, color, z_color, ray.origin[None], ray.direction[None], box, cfg,
        None if jitter is None else np.asarray(jitter)[None], keep_cache=True,
    )
    nocs = batch.nocs[0].copy() if batch.valid[0] else None
    pixel = RenderedPixel(float(batch.occupancy[0]), batch.color[0].copy(), nocs, bool(batch.hit[0]))
    if not batch.hit[0]:
        return pixel, ModelGrad.zeros_like(shape), ModelGrad.zeros_like(color)
    dc = None if d_color is None else np.asarray(d_color, dtype=float)[None]
    do = None if d_nocs is None or nocs is None else np.asarray(d_nocs, dtype=float)[None]
    gs, gc = render_rays_backward(batch, np.array([d_occupancy]), dc, do)
    return pixel, gs, gc


def pixel_jitter(seed: int, keys, cfg: RenderConfig) -> Optional[np.ndarray]:
    if not cfg.stratified_jitter:
        return None
    return hash_uniform(seed, keys, cfg.samples_per_ray)


def render_object(
    shape: DeformableShapeModel,
    color: DeformableShapeModel,
    z_shape,
    z_color,
    box: Box3D,
    camera: CameraIntrinsics,
    pixels,
    width: int,
    height: int,
    cfg: RenderConfig = RenderConfig(),
    offset=(0, 0),
    seed: int = 0,
) -> RenderedMaps:
    """Render a set of ``(col, row)`` pixels of a ``width x height`` crop.

    Pixel ``(col, row)`` is sampled at image position ``offset + (col, row)``.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.int64))
    if pixels.size == 0:
        raise ValueError("pixel list is empty")
    maps = RenderedMaps(
        width, height,
        np.zeros((height, width)), np.zeros((height, width, 3)), np.full((height, width, 3), np.nan),
        np.zeros((height, width), dtype=bool), np.zeros((height, width), dtype=bool),
        np.zeros((height, width), dtype=bool),
    )
    keys = pixels[:, 1] * width + pixels[:, 0]
    for start in range(0, pixels.shape[0], CHUNK_RAYS):
        px = pixels[start:start + CHUNK_RAYS]
        uv = px.astype(float) + np.asarray(offset, dtype=float)
        origins, dirs = camera_rays(uv, camera)
        jitter = pixel_jitter(seed, keys[start:start + CHUNK_RAYS], cfg)
        b = render_rays(shape, z_shape, color, z_color, origins, dirs, box, cfg, jitter)
        rows, cols = px[:, 1], px[:, 0]
        maps.occupancy[rows, cols] = b.occupancy
        maps.color[rows, cols] = b.color
        maps.nocs[rows, cols] = b.nocs
        maps.valid[rows, cols] = b.valid
        maps.hit[rows, cols] = b.hit
        maps.rendered[rows, cols] = True
    return maps


def all_pixels(width: int, height: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([cols.ravel(), rows.ravel()], axis=1)
