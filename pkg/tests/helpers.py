"""Finite-difference checkers, tiny instances and independent oracles for the test suite."""

import math

import numpy as np

from nocsloc.geometry import Box3D, CameraIntrinsics, ObjectSize, Pose4DoF, Ray, camera_rays, project
from nocsloc.grid import DeformableShapeModel, GridLayout, ModelGrad, evaluate, init_model, interpolation_plan

TINY_LAYOUT = GridLayout((2, 4), 4)


def tiny_model(seed, num_bases=2, layout=TINY_LAYOUT, hidden=(8, 8), feature_scale=0.5, density_bias=0.5):
    return init_model(layout, num_bases, hidden, seed=seed, feature_scale=feature_scale, density_bias=density_bias)


def model_arrays(model: DeformableShapeModel):
    return [model.canonical, model.bases] + model.decoder.weights + model.decoder.biases


def grad_arrays(g: ModelGrad):
    return [g.canonical, g.bases] + g.weights + g.biases


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(f, params, grads, rng, h=1e-4, trials=3, floor=1e-8, kink_tol=1e-4, redraws=8):
    """Worst relative error between central differences of ``f`` along random
    directions over ``params`` (a list of arrays mutated in place) and the
    analytic directional derivative ``<grads, v>``.

    ReLU networks are piecewise smooth. A direction whose difference quotient
    changes by more than ``kink_tol`` when the step is halved straddles a kink
    and is redrawn; if every redraw straddles one (a unit sits within ``h`` of
    its kink) the step shrinks tenfold, down to ``h * 1e-3``. A wrong gradient
    still fails because its quotients agree with each other but not with the
    analytic value.
    """
    def quotient(dirs, step):
        for p, d in zip(params, dirs):
            p += step * d
        fp = f()
        for p, d in zip(params, dirs):
            p -= 2 * step * d
        fm = f()
        for p, d in zip(params, dirs):
            p += step * d
        return (fp - fm) / (2 * step)

    worst = 0.0
    for _ in range(trials):
        step, smooth = h, False
        while not smooth and step >= h * 1e-3:
            for _ in range(redraws):
                dirs = [rng.standard_normal(p.shape) for p in params]
                norm = math.sqrt(sum(float(np.sum(d * d)) for d in dirs)) or 1.0
                dirs = [d / norm for d in dirs]
                fd = quotient(dirs, step)
                if rel_err(fd, quotient(dirs, step / 2), floor) <= kink_tol:
                    smooth = True
                    break
            step /= 10
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        worst = max(worst, rel_err(fd, analytic, floor))
    return worst


def entry_check(f, array, grad, index, h=1e-4, floor=1e-8):
    old = array[index]
    array[index] = old + h
    fp = f()
    array[index] = old - h
    fm = f()
    array[index] = old
    return rel_err((fp - fm) / (2 * h), float(grad[index]), floor)


def naive_query(data, layout: GridLayout, u):
    """Per-point trilinear lookup written with explicit loops."""
    out = []
    offsets = np.concatenate([[0], np.cumsum([r ** 3 for r in layout.resolutions])])
    for level, r in enumerate(layout.resolutions):
        x = np.clip(np.asarray(u, dtype=float), 0, 1) * (r - 1)
        i0 = np.minimum(np.floor(x).astype(int), r - 2)
        f = x - i0
        acc = np.zeros(layout.feature_dim)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    wgt = (f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2])
                    ix, iy, iz = i0[0] + dx, i0[1] + dy, i0[2] + dz
                    acc += wgt * data[offsets[level] + (ix * r + iy) * r + iz]
        out.append(acc)
    return np.concatenate(out)


def quadrature_oracle(model, z, q, d, near, far, size, samples=16384):
    """Fine quadrature of the continuous emission-absorption integrals along one
    object-frame ray, weighting ``sigma`` by the transmittance at the sample
    (not the discrete ``1 - exp(-sigma delta)`` factor the renderer uses).

    Returns ``(occupancy, nocs)``.
    """
    delta = (far - near) / samples
    gamma = near + (np.arange(samples) + 0.5) * delta
    pts = (q + gamma[:, None] * d) / size
    sigma, _, _ = evaluate(model, z, interpolation_plan(model.layout, pts + 0.5))
    tau = np.cumsum(sigma * delta) - 0.5 * sigma * delta
    w = np.exp(-tau) * sigma * delta
    m = w.sum()
    return m, (w[:, None] * pts).sum(axis=0) / m


def mc_iou_3d(a: Box3D, b: Box3D, n, rng):
    """Monte-Carlo 3D IoU from uniform points in the joint axis-aligned bound."""
    ca, cb = a.corners(), b.corners()
    lo = np.minimum(ca.min(0), cb.min(0))
    hi = np.maximum(ca.max(0), cb.max(0))
    pts = rng.uniform(lo, hi, size=(n, 3))

    def inside(box):
        q = (pts - box.pose.translation) @ box.pose.rotation
        return np.all(np.abs(q) <= 0.5 * box.size.as_array(), axis=1)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def analytic_silhouette(box: Box3D, camera: CameraIntrinsics, width, height, offset=(0, 0)):
    """Pixels of a ``width x height`` crop at ``offset`` inside the convex hull of the projected corners."""
    from scipy.spatial import ConvexHull

    hull = ConvexHull(project(box.corners(), camera))
    rows, cols = np.mgrid[0:height, 0:width]
    pts = np.stack([cols.ravel() + offset[0], rows.ravel() + offset[1]], axis=1).astype(float)
    inside = np.all(pts @ hull.equations[:, :2].T + hull.equations[:, 2] <= 0, axis=1)
    return inside.reshape(height, width)


def small_camera():
    return CameraIntrinsics(300.0, 300.0, 80.0, 60.0)


def box_rays(box: Box3D, camera: CameraIntrinsics, count: int, rng, spread=1.2):
    """Rays through random pixels around the projected box center."""
    uv = project(box.corners(), camera)
    center = uv.mean(axis=0)
    half = spread * 0.5 * (uv.max(axis=0) - uv.min(axis=0))
    pix = center + rng.uniform(-1, 1, size=(count, 2)) * half
    return camera_rays(pix, camera)


def unit_box(yaw=0.3, t=(0.2, -0.1, 4.0), size=(1.2, 0.8, 1.0)):
    return Box3D(Pose4DoF(yaw, t), ObjectSize(*size))


def constant_density_model(layout=TINY_LAYOUT, density_raw=0.0, seed=0, hidden=(8, 8)):
    """Decoder whose density logit ignores its input; color stays input-dependent."""
    model = init_model(layout, 0, hidden, seed=seed, feature_scale=0.5)
    model.decoder.weights[-1][:, 0] = 0.0
    model.decoder.biases[-1][0] = density_raw
    return model


def smooth_field(seed):
    """Full-size random field with occupancies spread over (0, 1) on box-crossing rays."""
    bias = float(np.random.default_rng(seed).uniform(-1.0, 2.0))
    return init_model(GridLayout(), 0, (64, 64, 64), seed=seed, feature_scale=1.0, density_bias=bias)


def quadrature_errors(seed, sample_counts, rays=30):
    """Mean |occupancy error| and mean max-component |NOCS error| of the renderer
    against :func:`quadrature_oracle` for each sample count.
    """
    from nocsloc.geometry import rays_to_object, slab_intersect
    from nocsloc.render import RenderConfig, render_rays

    shape = smooth_field(seed)
    color = init_model(GridLayout(), 0, (64, 64, 64), seed=seed + 100)
    box = unit_box()
    origins, dirs = box_rays(box, small_camera(), rays, np.random.default_rng(seed), spread=0.8)
    q, d = rays_to_object(origins, dirs, box)
    size = box.size.as_array()
    hit, near, far = slab_intersect(q, d, 0.5 * size)
    idx = np.flatnonzero(hit)
    z = np.zeros(0)
    ref = [quadrature_oracle(shape, z, q[i], d[i], near[i], far[i], size) for i in idx]
    out = []
    for s in sample_counts:
        b = render_rays(shape, z, color, z, origins, dirs, box, RenderConfig(samples_per_ray=s))
        em = np.mean([abs(b.occupancy[i] - m) for i, (m, _) in zip(idx, ref)])
        eo = np.mean([np.abs(b.nocs[i] - o).max() for i, (_, o) in zip(idx, ref)])
        out.append((float(em), float(eo)))
    return out


def tiny_training_object(seed, lidar=True, eligible=True, crop=(14, 10)):
    """Random tri-mask and colors on a small crop around :func:`unit_box`."""
    from nocsloc.fit import TrainingObject, TriMask

    rng = np.random.default_rng(seed)
    box = unit_box(yaw=float(rng.uniform(-np.pi, np.pi)))
    cam = small_camera()
    w, h = crop
    center = project(np.array([box.pose.t]), cam)[0]
    offset = (int(center[0]) - w // 2, int(center[1]) - h // 2)
    labels = rng.choice([0, 1, 2], size=(h, w), p=[0.35, 0.5, 0.15]).astype(np.uint8)
    kw = {}
    if lidar:
        n = 6
        pix = np.stack([rng.integers(0, w, n), rng.integers(0, h, n)], axis=1) + np.asarray(offset)
        kw = dict(lidar_pixels=pix.astype(float), lidar_nocs=rng.uniform(-0.4, 0.4, (n, 3)),
                  licomp_pixels=pix.astype(float)[::-1].copy(), licomp_nocs=rng.uniform(-0.4, 0.4, (n, 3)))
    return TrainingObject(rng.random((h, w, 3)), TriMask(labels), box, cam, offset, basis_eligible=eligible, **kw)


def tiny_fit_config(**overrides):
    from nocsloc.fit import FitConfig

    base = dict(rays_per_object=8, resolutions=(2, 4), hidden=(8, 8), num_bases=2, samples_per_ray=8,
                dense_samples=16, w_kl=0.3, init_log_variance=-0.5)
    base.update(overrides)
    return FitConfig(**base)


LOSS_ONLY = {
    "occ": dict(w_rgb=0, w_lidar=0, w_licomp=0, w_kl=0, w_dense=0),
    "rgb": dict(w_occ=0, w_lidar=0, w_licomp=0, w_kl=0, w_dense=0),
    "lidar": dict(w_occ=0, w_rgb=0, w_licomp=0, w_kl=0, w_dense=0),
    "licomp": dict(w_occ=0, w_rgb=0, w_lidar=0, w_kl=0, w_dense=0),
    "kl": dict(w_occ=0, w_rgb=0, w_lidar=0, w_licomp=0, w_dense=0),
    "dense": dict(w_occ=0, w_rgb=0, w_lidar=0, w_licomp=0, w_kl=0, w_dense=0.7),
}


def total_loss_check(seed, dense, h=1e-4, only=None):
    """Worst relative finite-difference error of the weighted per-object loss
    over every parameter class: both models, coefficient means and log-variances.

    ``only`` names a single loss term (a key of ``LOSS_ONLY``) to check alone.
    """
    from nocsloc.fit import DeformationCoefficients, ObjectCoefficients, _evaluate_object, new_models

    if only is not None:
        dense = only == "dense"
    weights = {"w_dense": 0.7 if dense else 0.0, **LOSS_ONLY.get(only, {})}
    cfg = tiny_fit_config(seed=seed, **weights)
    shape, color = new_models(cfg)
    rng = np.random.default_rng(seed + 1000)
    for m in (shape, color):
        m.canonical[...] = rng.uniform(-0.5, 0.5, m.canonical.shape)
        m.bases[...] = rng.uniform(-0.5, 0.5, m.bases.shape)
        for b in m.decoder.biases:
            b += rng.uniform(-0.2, 0.2, b.shape)
        m.decoder.biases[-1][0] = 0.5
    coeffs = ObjectCoefficients(DeformationCoefficients(rng.standard_normal(2), rng.uniform(-1, 0, 2)),
                                DeformationCoefficients(rng.standard_normal(2), rng.uniform(-1, 0, 2)))
    obj = tiny_training_object(seed, lidar=not dense)
    flags = (dense, not dense, not dense)

    def run():
        return _evaluate_object(shape, color, coeffs, obj, cfg, np.random.default_rng([seed, 7]), *flags)

    res = run()
    params = model_arrays(shape) + model_arrays(color) + [coeffs.shape.mean, coeffs.shape.log_variance,
                                                          coeffs.color.mean, coeffs.color.log_variance]
    grads = grad_arrays(res.shape_grad) + grad_arrays(res.color_grad) + list(res.coeff_grads)
    f = lambda: run().components["total"]  # noqa: E731
    worst = directional_check(f, params, grads, rng, h=h)
    # each class on its own so a small class is not hidden by a large one
    for p, g in zip(params, grads):
        if np.any(g):
            worst = max(worst, directional_check(f, [p], [g], rng, h=h, trials=1))
    return worst


def render_grad_check(seed, samples=16):
    """Finite-difference check of a random linear functional of one pixel's
    ``(occupancy, color, nocs)`` over both models and both coefficient vectors.
    """
    from nocsloc.render import RenderConfig, render_ray, render_ray_grad

    rng = np.random.default_rng([seed, 31])
    shape = tiny_model(seed, num_bases=2, density_bias=float(rng.uniform(0.0, 1.0)))
    color = tiny_model(seed + 50, num_bases=2)
    # zero-initialized hidden biases put all-dead samples exactly on a ReLU kink
    for m in (shape, color):
        for bias in m.decoder.biases[:-1]:
            bias += rng.uniform(-0.2, 0.2, bias.shape)
    zs, zc = rng.standard_normal(2), rng.standard_normal(2)
    box = unit_box()
    target = box.pose.translation + box.pose.rotation @ (np.array([*rng.uniform(-0.3, 0.3, 2), 0.0]) *
                                                          box.size.as_array())
    ray = Ray(np.zeros(3), target / np.linalg.norm(target))
    cfg = RenderConfig(samples_per_ray=samples)
    a, b, c = rng.standard_normal(), rng.standard_normal(3), rng.standard_normal(3)
    _, gs, gc = render_ray_grad(shape, zs, color, zc, ray, box, cfg, d_occupancy=a, d_color=b, d_nocs=c)

    def f():
        px = render_ray(shape, zs, color, zc, ray, box, cfg)
        return a * px.occupancy + float(b @ px.color) + float(c @ px.nocs)

    params = model_arrays(shape) + model_arrays(color) + [zs, zc]
    grads = grad_arrays(gs) + grad_arrays(gc) + [gs.z, gc.z]
    worst = directional_check(f, params, grads, rng)
    for p, g in zip(params, grads):
        if np.any(g):
            worst = max(worst, directional_check(f, [p], [g], rng, trials=1))
    return worst


def exact_problem(seed, count=200, depth_range=(8.0, 30.0)):
    """Car-sized box and exact visible-surface correspondences."""
    from nocsloc.synth import box_surface_correspondences, default_camera, random_box

    rng = np.random.default_rng([seed, 1])
    box = random_box(rng, depth_range=depth_range)
    corr, _ = box_surface_correspondences(box, default_camera(), count, rng)
    return box, corr


def noisy_problem(seed, count=1000, sigma=0.01, outliers=0.2, depth_range=(8.0, 30.0)):
    from nocsloc.pnp import Correspondences
    from nocsloc.synth import NoiseSpec, box_surface_correspondences, corrupt_nocs, default_camera, random_box

    rng = np.random.default_rng([seed, 2])
    box = random_box(rng, depth_range=depth_range)
    corr, _ = box_surface_correspondences(box, default_camera(), count, rng)
    o, _ = corrupt_nocs(corr.o, NoiseSpec(nocs_sigma=sigma, outlier_fraction=outliers), rng)
    return box, Correspondences(corr.p, o, corr.w)


def grid_oracle(corr, size, center, delta, half=0.6, steps=13, yaw_steps=360):
    """Lowest Huber cost over a yaw x translation lattice around ``center``."""
    x = corr.o * size.as_array()
    off = np.linspace(-half, half, steps)
    lattice = np.stack(np.meshgrid(off, off, off, indexing="ij"), -1).reshape(-1, 3) + center
    best = math.inf
    for yaw in np.arange(yaw_steps) * 2 * math.pi / yaw_steps:
        c, s = math.cos(yaw), math.sin(yaw)
        rx = np.stack([c * x[:, 0] + s * x[:, 2], x[:, 1], -s * x[:, 0] + c * x[:, 2]], 1)
        y = rx[None] + lattice[:, None]
        z = y[..., 2]
        r = (y[..., :2] / np.where(z > 0, z, 1)[..., None] - corr.p) * corr.w
        n = np.where(z > 0, np.hypot(r[..., 0], r[..., 1]), 1e3)
        cost = np.where(n <= delta, 0.5 * n * n, delta * (n - 0.5 * delta)).sum(1)
        best = min(best, float(cost.min()))
    return best
