"""Fitting deformable shape and color models to masks, colors and lidar NOCS."""

from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box3D, CameraIntrinsics, camera_rays
from .grid import DeformableShapeModel, GridLayout, ModelGrad, init_model
from .losses import (
    BACKGROUND,
    FOREGROUND,
    UNKNOWN,
    loss_dense_prior,
    loss_kl,
    loss_lidar_nocs,
    loss_occupancy,
    loss_rgb,
)
from .render import RenderConfig, render_rays, render_rays_backward

logger = logging.getLogger(__name__)

LOSS_NAMES = ("occ", "rgb", "lidar", "licomp", "kl", "dense")
MIN_BASIS_HEIGHT = 40


class FitDivergedError(RuntimeError):
    def __init__(self, component: str, iteration: int, value: float):
        super().__init__(f"non-finite {component} loss ({value}) at iteration {iteration}")
        self.component = component
        self.iteration = iteration


@dataclass
class TriMask:
    labels: np.ndarray  # (H, W) uint8 with BACKGROUND / FOREGROUND / UNKNOWN

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ValueError("tri-mask must be 2D")
        if not np.isin(self.labels, (BACKGROUND, FOREGROUND, UNKNOWN)).all():
            raise ValueError("tri-mask contains labels other than background/foreground/unknown")

    def counts(self) -> Dict[str, int]:
        return {
            "background": int((self.labels == BACKGROUND).sum()),
            "foreground": int((self.labels == FOREGROUND).sum()),
            "unknown": int((self.labels == UNKNOWN).sum()),
        }


def is_basis_eligible(box_height_px: float, mask: TriMask, silhouette: Optional[np.ndarray] = None,
                      min_height: int = MIN_BASIS_HEIGHT) -> bool:
    """Tall enough and unoccluded: no unknown label on the object's silhouette."""
    region = silhouette if silhouette is not None else np.ones_like(mask.labels, dtype=bool)
    occluded = bool(np.any((mask.labels == UNKNOWN) & region))
    return box_height_px >= min_height and not occluded


@dataclass
class TrainingObject:
    colors: np.ndarray  # (H, W, 3) crop colors in [0, 1]
    mask: TriMask
    box: Box3D
    camera: CameraIntrinsics
    crop_offset: Tuple[int, int] = (0, 0)
    lidar_pixels: Optional[np.ndarray] = None  # (P, 2) image coordinates
    lidar_nocs: Optional[np.ndarray] = None  # (P, 3)
    licomp_pixels: Optional[np.ndarray] = None
    licomp_nocs: Optional[np.ndarray] = None
    basis_eligible: bool = True

    def __post_init__(self):
        if self.colors.shape[:2] != self.mask.labels.shape:
            raise ValueError("colors and mask differ in size")
        for pix, nocs in ((self.lidar_pixels, self.lidar_nocs), (self.licomp_pixels, self.licomp_nocs)):
            if (pix is None) != (nocs is None):
                raise ValueError("supervision pixels and NOCS targets must be given together")
            if nocs is not None and nocs.size and np.abs(nocs).max() > 0.5 + 1e-9:
                raise ValueError("lidar NOCS targets must lie in [-0.5, 0.5]^3")

    @property
    def height(self) -> int:
        return self.colors.shape[0]

    @property
    def width(self) -> int:
        return self.colors.shape[1]

    @property
    def has_lidar(self) -> bool:
        return self.lidar_nocs is not None and len(self.lidar_nocs) > 0

    @property
    def has_licomp(self) -> bool:
        return self.licomp_nocs is not None and len(self.licomp_nocs) > 0


@dataclass
class FitConfig:
    w_occ: float = 1.0
    w_rgb: float = 1.0
    w_lidar: float = 1.0
    w_licomp: float = 1.0
    w_kl: float = 1e-3
    w_dense: float = 0.1
    rays_per_object: int = 768
    dense_samples: int = 4096
    dense_interval: float = 0.05
    iterations: int = 2000
    lr_grid: float = 1e-2
    lr_decoder: float = 1e-3
    lr_coeff: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    samples_per_ray: int = 64
    stratified_jitter: bool = True
    objects_per_iteration: Optional[int] = None
    threads: int = 1
    num_bases: int = 0
    resolutions: Tuple[int, ...] = (2, 4, 8, 16, 32)
    feature_dim: int = 4
    hidden: Tuple[int, ...] = (64, 64, 64)
    init_log_variance: float = 0.0

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in LOSS_NAMES:
            if getattr(self, f"w_{name}") < 0:
                raise ValueError(f"loss weight w_{name} must be nonnegative")
        if self.rays_per_object < 1 or self.iterations < 0 or self.threads < 1:
            raise ValueError("rays_per_object, iterations and threads must be positive")
        if self.objects_per_iteration is not None and self.objects_per_iteration < 1:
            raise ValueError("objects_per_iteration must be positive")

    @property
    def render_config(self) -> RenderConfig:
        return RenderConfig(samples_per_ray=self.samples_per_ray, stratified_jitter=self.stratified_jitter)

    @property
    def layout(self) -> GridLayout:
        return GridLayout(self.resolutions, self.feature_dim)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolutions"] = list(self.resolutions)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known - {"schema_version"})
        if unknown:
            raise ValueError(f"unknown fit config fields: {', '.join(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class DeformationCoefficients:
    """Gaussian posterior over one object's coefficients, sampled by reparameterization."""

    mean: np.ndarray
    log_variance: np.ndarray

    def sample(self, eps: Optional[np.ndarray] = None) -> np.ndarray:
        if eps is None:
            return self.mean.copy()
        return self.mean + np.exp(0.5 * self.log_variance) * eps

    def copy(self) -> "DeformationCoefficients":
        return DeformationCoefficients(self.mean.copy(), self.log_variance.copy())


@dataclass
class ObjectCoefficients:
    shape: DeformationCoefficients
    color: DeformationCoefficients


@dataclass
class FitReport:
    rows: List[Dict[str, float]] = field(default_factory=list)
    coefficient_stats: Dict[str, float] = field(default_factory=dict)
    grid_grad_by_object: Optional[np.ndarray] = None
    dense_prior_active: bool = False
    lidar_skipped: int = 0
    wall_clock: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["total"] if self.rows else float("nan")


@dataclass
class FitResult:
    shape: DeformableShapeModel
    color: DeformableShapeModel
    coefficients: List[ObjectCoefficients]
    report: FitReport


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lrs: Sequence[float], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lrs = list(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v, lr in zip(self.params, grads, self.m, self.v, self.lrs):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _model_params(model: DeformableShapeModel):
    return [model.canonical, model.bases] + model.decoder.weights + model.decoder.biases


def _grad_params(g: ModelGrad):
    return [g.canonical, g.bases] + g.weights + g.biases


def sample_rays(mask: TriMask, count: int, rng: np.random.Generator) -> np.ndarray:
    """Ray pixels: half foreground, a quarter background, the rest uniform over the crop.

    Returns ``(count, 2)`` integer ``(col, row)`` pixels. An empty class hands
    its share to the uniform draw.
    """
    labels = mask.labels
    h, w = labels.shape
    n_fg, n_bg = count // 2, count // 4
    fg = np.flatnonzero(labels.ravel() == FOREGROUND)
    bg = np.flatnonzero(labels.ravel() == BACKGROUND)
    if fg.size == 0:
        n_fg = 0
    if bg.size == 0:
        n_bg = 0
    parts = []
    if n_fg:
        parts.append(fg[rng.integers(0, fg.size, n_fg)])
    if n_bg:
        parts.append(bg[rng.integers(0, bg.size, n_bg)])
    parts.append(rng.integers(0, h * w, count - n_fg - n_bg))
    flat = np.concatenate(parts)
    return np.stack([flat % w, flat // w], axis=1)


@dataclass
class _ObjectResult:
    components: Dict[str, float]
    shape_grad: ModelGrad
    color_grad: ModelGrad
    coeff_grads: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    lidar_skipped: int


def _supervised_nocs_term(shape, zs, color, zc, obj, pixels, targets, cfg, rng, weight):
    n = len(targets)
    if n > cfg.rays_per_object:
        pick = np.sort(rng.choice(n, cfg.rays_per_object, replace=False))
        pixels, targets = pixels[pick], targets[pick]
    origins, dirs = camera_rays(np.asarray(pixels, dtype=float), obj.camera)
    rcfg = cfg.render_config
    jitter = rng.random((len(targets), rcfg.samples_per_ray)) if rcfg.stratified_jitter else None
    batch = render_rays(shape, zs, color, zc, origins, dirs, obj.box, rcfg, jitter, keep_cache=True)
    value, d_nocs, skipped = loss_lidar_nocs(batch.nocs, targets, batch.valid)
    if value == 0.0 and skipped == len(targets):
        return value, None, None, skipped
    gs, gc = render_rays_backward(batch, None, None, weight * d_nocs)
    return value, gs, gc, skipped


def _evaluate_object(shape, color, coeffs: ObjectCoefficients, obj: TrainingObject, cfg: FitConfig,
                     rng: np.random.Generator, dense_active: bool, use_lidar: bool, use_licomp: bool) -> _ObjectResult:
    b = shape.num_bases
    eps_s = rng.standard_normal(b)
    eps_c = rng.standard_normal(color.num_bases)
    zs = coeffs.shape.sample(eps_s)
    zc = coeffs.color.sample(eps_c)
    rcfg = cfg.render_config

    pixels = sample_rays(obj.mask, cfg.rays_per_object, rng)
    labels = obj.mask.labels[pixels[:, 1], pixels[:, 0]]
    target_rgb = obj.colors[pixels[:, 1], pixels[:, 0]]
    uv = pixels.astype(float) + np.asarray(obj.crop_offset, dtype=float)
    origins, dirs = camera_rays(uv, obj.camera)
    jitter = rng.random((len(pixels), rcfg.samples_per_ray)) if rcfg.stratified_jitter else None
    batch = render_rays(shape, zs, color, zc, origins, dirs, obj.box, rcfg, jitter, keep_cache=True)

    comp = dict.fromkeys(LOSS_NAMES, 0.0)
    comp["occ"], d_m = loss_occupancy(batch.occupancy, labels)
    comp["rgb"], d_c = loss_rgb(batch.color, target_rgb, labels)
    gs, gc = render_rays_backward(batch, cfg.w_occ * d_m, cfg.w_rgb * d_c, None)
    g_shape = gs if gs is not None else ModelGrad.zeros_like(shape)
    g_color = gc if gc is not None else ModelGrad.zeros_like(color)

    skipped = 0
    for name, on, pix, tgt, weight in (
        ("lidar", use_lidar and obj.has_lidar, obj.lidar_pixels, obj.lidar_nocs, cfg.w_lidar),
        ("licomp", use_licomp and obj.has_licomp, obj.licomp_pixels, obj.licomp_nocs, cfg.w_licomp),
    ):
        if not on:
            continue
        value, s_grad, c_grad, n_skip = _supervised_nocs_term(shape, zs, color, zc, obj, pix, tgt, cfg, rng, weight)
        comp[name] = value
        skipped += n_skip
        if s_grad is not None:
            g_shape += s_grad
            g_color += c_grad

    if dense_active:
        comp["dense"], d_grad = loss_dense_prior(
            shape, zs, cfg.dense_samples, cfg.dense_interval,
            points=rng.uniform(-0.5, 0.5, size=(cfg.dense_samples, 3)),
        )
        g_shape += d_grad.scale(cfg.w_dense)

    kl_s, dmu_s, dlv_s = loss_kl(coeffs.shape.mean, coeffs.shape.log_variance)
    kl_c, dmu_c, dlv_c = loss_kl(coeffs.color.mean, coeffs.color.log_variance)
    comp["kl"] = kl_s + kl_c

    # reparameterization: z = mu + exp(lv / 2) eps
    std_s = np.exp(0.5 * coeffs.shape.log_variance)
    std_c = np.exp(0.5 * coeffs.color.log_variance)
    coeff_grads = (
        g_shape.z + cfg.w_kl * dmu_s,
        g_shape.z * eps_s * 0.5 * std_s + cfg.w_kl * dlv_s,
        g_color.z + cfg.w_kl * dmu_c,
        g_color.z * eps_c * 0.5 * std_c + cfg.w_kl * dlv_c,
    )
    if not obj.basis_eligible:
        for g in (g_shape, g_color):
            g.canonical[...] = 0.0
            g.bases[...] = 0.0
    comp["total"] = sum(getattr(cfg, f"w_{k}") * comp[k] for k in LOSS_NAMES)
    return _ObjectResult(comp, g_shape, g_color, coeff_grads, skipped)


def new_models(cfg: FitConfig) -> Tuple[DeformableShapeModel, DeformableShapeModel]:
    shape = init_model(cfg.layout, cfg.num_bases, cfg.hidden, seed=cfg.seed)
    color = init_model(cfg.layout, cfg.num_bases, cfg.hidden, seed=cfg.seed + 1)
    return shape, color


def fit(objects: Sequence[TrainingObject], models: Optional[Tuple[DeformableShapeModel, DeformableShapeModel]],
        cfg: FitConfig, coefficients: Optional[List[ObjectCoefficients]] = None) -> FitResult:
    """Adam on the weighted shape losses.

    Inputs are not modified; the returned models are fitted copies. Objects
    that are not basis-eligible only update the decoder and their own
    coefficients.
    """
    if not objects:
        raise ValueError("fit needs at least one object")
    start = time.perf_counter()
    shape, color = new_models(cfg) if models is None else (models[0].copy(), models[1].copy())
    if coefficients is None:
        coefficients = [
            ObjectCoefficients(
                DeformationCoefficients(np.zeros(shape.num_bases), np.full(shape.num_bases, cfg.init_log_variance)),
                DeformationCoefficients(np.zeros(color.num_bases), np.full(color.num_bases, cfg.init_log_variance)),
            )
            for _ in objects
        ]
    else:
        coefficients = [ObjectCoefficients(c.shape.copy(), c.color.copy()) for c in coefficients]
    if len(coefficients) != len(objects):
        raise ValueError("one coefficient set per object is required")

    any_lidar = any(o.has_lidar for o in objects)
    any_licomp = any(o.has_licomp for o in objects)
    if cfg.w_lidar > 0 and not any_lidar:
        logger.warning("lidar loss weighted but no object carries lidar points; lidar loss stays 0")
    use_lidar = cfg.w_lidar > 0 and any_lidar
    use_licomp = cfg.w_licomp > 0 and any_licomp
    dense_active = cfg.w_dense > 0 and not use_lidar and not use_licomp

    coeff_params = []
    for c in coefficients:
        coeff_params += [c.shape.mean, c.shape.log_variance, c.color.mean, c.color.log_variance]
    params = _model_params(shape) + _model_params(color)
    lrs = []
    for m in (shape, color):
        lrs += [cfg.lr_grid, cfg.lr_grid] + [cfg.lr_decoder] * (2 * len(m.decoder.weights))
    optimizer = Adam(params + coeff_params, lrs + [cfg.lr_coeff] * len(coeff_params), cfg.beta1, cfg.beta2)

    report = FitReport(grid_grad_by_object=np.zeros(len(objects)), dense_prior_active=dense_active)
    per_iter = len(objects) if cfg.objects_per_iteration is None else min(cfg.objects_per_iteration, len(objects))
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for it in range(cfg.iterations):
            first = (it * per_iter) % len(objects)
            chosen = [(first + k) % len(objects) for k in range(per_iter)]

            def work(i, it=it):
                rng = np.random.default_rng([cfg.seed, it, i])
                return _evaluate_object(shape, color, coefficients[i], objects[i], cfg, rng,
                                        dense_active, use_lidar, use_licomp)

            results = list(pool.map(work, chosen)) if pool else [work(i) for i in chosen]

            row = {"iteration": it}
            for key in LOSS_NAMES + ("total",):
                value = float(np.mean([r.components[key] for r in results]))
                if not np.isfinite(value):
                    raise FitDivergedError(key, it, value)
                row[key] = value
            report.rows.append(row)

            g_shape, g_color = ModelGrad.zeros_like(shape), ModelGrad.zeros_like(color)
            coeff_grads = [np.zeros_like(p) for p in coeff_params]
            for i, r in zip(chosen, results):
                report.grid_grad_by_object[i] += r.shape_grad.grid_norm() + r.color_grad.grid_norm()
                report.lidar_skipped += r.lidar_skipped
                g_shape += r.shape_grad
                g_color += r.color_grad
                for k in range(4):
                    coeff_grads[4 * i + k] += r.coeff_grads[k]
            scale = 1.0 / len(results)
            g_shape.scale(scale)
            g_color.scale(scale)
            for g in coeff_grads:
                g *= scale
            optimizer.step(_grad_params(g_shape) + _grad_params(g_color) + coeff_grads)
    finally:
        if pool:
            pool.shutdown()

    if coefficients and shape.num_bases:
        means = np.stack([c.shape.mean for c in coefficients])
        variances = np.exp(np.stack([c.shape.log_variance for c in coefficients]))
        report.coefficient_stats = {
            "shape_mean_abs": float(np.abs(means).mean()),
            "shape_variance_mean": float(variances.mean()),
        }
    report.wall_clock = time.perf_counter() - start
    return FitResult(shape, color, coefficients, report)
