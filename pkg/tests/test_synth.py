import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import small_camera
from nocsloc.geometry import Box3D, ObjectSize, Pose4DoF, Ray, pixel_to_normalized, ray_box_intersect
from nocsloc.losses import FOREGROUND, UNKNOWN
from nocsloc.pnp import residuals
from nocsloc.synth import (
    SIGMA_MAX,
    LidarSpec,
    NoiseSpec,
    ObjectSpec,
    Primitive,
    SceneError,
    SceneSpec,
    analytic_density,
    corrupt_nocs,
    generate,
)

CAR = Box3D(Pose4DoF(0.5, (0.0, 0.8, 10.0)), ObjectSize(4.0, 1.5, 1.8))


def scene(objects=None, width=160, height=120, **kw):
    objects = objects or (ObjectSpec(CAR),)
    kw.setdefault("march_samples", 256)
    return SceneSpec(small_camera(), width, height, tuple(objects), **kw)


def _fields(g):
    return [g.gt_occupancy, g.gt_nocs, g.silhouette, g.clean.p, g.clean.o, g.noisy.o, g.noisy.w, g.outliers,
            g.training.colors, g.training.mask.labels, g.training.lidar_nocs, np.array([g.d_pred])]


def same(a, b):
    for x, y in zip(_fields(a), _fields(b)):
        if x is None or y is None:
            if x is not y:
                return False
        elif not np.array_equal(x, y, equal_nan=True):
            return False
    return True


def test_density_examples():
    box = Primitive("box")
    assert analytic_density(box, np.zeros(3)) == SIGMA_MAX
    assert analytic_density(box, np.array([0.6, 0, 0])) == 0.0
    ell = Primitive("ellipsoid", radii=(0.5, 0.25, 0.25))
    assert analytic_density(ell, np.array([0, 0.25, 0])) == SIGMA_MAX
    assert analytic_density(ell, np.array([0, 0.26, 0])) == 0.0
    union = Primitive("union", parts=(Primitive("box", extent=(0.2, 0.2, 0.2), center=(0.3, 0, 0)), ell))
    assert analytic_density(union, np.array([[0.35, 0, 0], [0, 0.2, 0], [-0.45, 0.3, 0]])).tolist() == [
        SIGMA_MAX, SIGMA_MAX, 0.0]


@given(st.tuples(*[st.floats(-1, 1)] * 3))
def test_big_box_is_clipped_to_cube(o):
    v = analytic_density(Primitive("box", extent=(3, 3, 3)), np.array(o))
    assert (v == SIGMA_MAX) == bool(np.all(np.abs(o) <= 0.5))


def test_zero_noise_reprojects_exactly():
    (g,) = generate(scene())
    r, ok = residuals(CAR.pose.yaw, CAR.pose.t, g.clean, CAR.size)
    assert ok.all() and len(g.clean) > 500
    assert np.abs(r).max() < 1e-6
    assert np.array_equal(g.noisy.o, g.clean.o) and not g.outliers.any()


def test_same_seed_bit_identical():
    spec = scene(noise=NoiseSpec(nocs_sigma=0.02, outlier_fraction=0.1, weight_noise=0.1),
                 lidar=LidarSpec(samples=40, dropout=0.2), seed=4)
    a, b = generate(spec)[0], generate(spec)[0]
    assert same(a, b)
    c = generate(SceneSpec(**{**spec.__dict__, "seed": 5}))[0]
    assert not np.array_equal(a.noisy.o, c.noisy.o)


def test_objects_generated_independently():
    other = Box3D(Pose4DoF(-0.3, (-2.0, 1.0, 14.0)), ObjectSize(3.8, 1.5, 1.7))
    spec = scene([ObjectSpec(CAR), ObjectSpec(other)], noise=NoiseSpec(nocs_sigma=0.01), seed=2)
    both = generate(spec)
    alone = generate(spec, only=[1])
    assert len(alone) == 1 and alone[0].index == 1
    assert same(both[1], alone[0])


def test_tri_mask_matches_occupancy_and_occluders():
    (g,) = generate(scene())
    labels = g.training.mask.labels
    assert np.array_equal(labels == FOREGROUND, g.gt_occupancy >= 0.5)


def test_occluder_fraction():
    (clean,) = generate(scene())
    x0, y0 = clean.training.crop_offset
    sil = clean.silhouette
    # pick the column band from the left edge closest to 30% of the silhouette
    cum = np.cumsum(sil.sum(axis=0)) / sil.sum()
    cols = int(np.argmin(np.abs(cum - 0.3))) + 1
    rect = (0, 0, x0 + cols, 120)
    (g,) = generate(scene(occluders=(rect,)))
    unknown = (g.training.mask.labels == UNKNOWN) & g.silhouette
    assert unknown.sum() / g.silhouette.sum() == pytest.approx(0.3, abs=0.02)
    assert not g.training.basis_eligible


def test_silhouette_matches_analytic_count():
    box = Box3D(Pose4DoF(0.4, (0.0, 0.5, 8.0)), ObjectSize(4.0, 1.5, 1.8))
    cam = small_camera().__class__(300, 300, 128, 128)
    spec = SceneSpec(cam, 256, 256, (ObjectSpec(box),), march_samples=128)
    (g,) = generate(spec)
    x0, y0 = g.training.crop_offset
    h, w = g.silhouette.shape
    count = 0
    for r in range(h):
        for c in range(w):
            d = pixel_to_normalized(c + x0, r + y0, cam)
            if ray_box_intersect(Ray(np.zeros(3), d / np.linalg.norm(d)), box) is not None:
                count += 1
    fg = int((g.training.mask.labels == FOREGROUND).sum())
    assert abs(fg - count) / count < 0.01


def test_nocs_inside_primitive():
    ell = Primitive("ellipsoid", radii=(0.45, 0.3, 0.4))
    spec = scene([ObjectSpec(CAR, ell)], march_samples=512)
    (g,) = generate(spec)
    o = g.gt_nocs[np.isfinite(g.gt_nocs[..., 0])]
    spacing = math.sqrt(3) / spec.march_samples
    lhs = np.sqrt(np.sum((o / np.array(ell.radii)) ** 2, axis=1))
    assert lhs.max() <= 1 + spacing / min(ell.radii)
    assert np.abs(o).max() <= 0.5


def test_noise_standard_deviation():
    rng = np.random.default_rng(0)
    o = np.zeros((20000, 3))
    noisy, outliers = corrupt_nocs(o, NoiseSpec(nocs_sigma=0.02), rng)
    assert np.std(noisy) == pytest.approx(0.02, rel=0.05)
    noisy, outliers = corrupt_nocs(o, NoiseSpec(outlier_fraction=0.25), rng)
    assert outliers.sum() == 5000
    assert np.abs(noisy[outliers]).max() <= 0.5 and not noisy[~outliers].any()


def test_lidar_points():
    spec = scene(lidar=LidarSpec(samples=50, dropout=0.0, depth_noise=0.0))
    (g,) = generate(spec)
    t = g.training
    assert 40 <= len(t.lidar_nocs) <= 50
    assert np.abs(t.lidar_nocs).max() <= 0.5
    # noiseless points sit on the surface marched for the same pixel
    pix = (t.lidar_pixels - np.asarray(t.crop_offset)).astype(int)
    assert np.allclose(t.lidar_nocs, g.gt_nocs[pix[:, 1], pix[:, 0]], atol=1e-9)
    (none,) = generate(scene(lidar=LidarSpec(samples=50, dropout=1.0)))
    assert none.training.lidar_nocs is None


def test_depth_prior_is_multiplicative():
    (g,) = generate(scene(noise=NoiseSpec(depth_sigma=0.0)))
    assert g.d_pred == CAR.pose.t[2] and g.size_pred == CAR.size
    (g,) = generate(scene(noise=NoiseSpec(depth_sigma=0.05, size_sigma=0.05), seed=3))
    assert 0.7 < g.d_pred / CAR.pose.t[2] < 1.3
    assert g.size_pred.l / CAR.size.l == pytest.approx(g.size_pred.w / CAR.size.w)


def test_behind_camera():
    behind = Box3D(Pose4DoF(0.0, (0.0, 0.0, -10.0)), CAR.size)
    with pytest.raises(SceneError, match="behind"):
        generate(scene([ObjectSpec(behind)]))
    out = generate(scene([ObjectSpec(behind, allow_behind=True), ObjectSpec(CAR)]))
    assert [g.index for g in out] == [1]


def test_spec_round_trip_and_errors():
    spec = scene(occluders=((1, 2, 3, 4),), noise=NoiseSpec(nocs_sigma=0.1), seed=9)
    assert SceneSpec.from_dict(spec.to_dict()) == spec
    d = spec.to_dict()
    for mutate, field in [
        (lambda d: d.pop("camera"), "camera"),
        (lambda d: d.update(objects=[]), "objects"),
        (lambda d: d["objects"][0]["box"].pop("size"), "objects[0].box.size"),
        (lambda d: d["objects"][0].update(primitive={"type": "torus"}), "objects[0].primitive.type"),
        (lambda d: d["objects"][0]["box"].update(size=[1, -1, 1]), "objects[0].box.size"),
        (lambda d: d.update(schema_version=7), "schema_version"),
    ]:
        bad = SceneSpec.from_dict(spec.to_dict()).to_dict()
        mutate(bad)
        with pytest.raises(SceneError) as err:
            SceneSpec.from_dict(bad)
        assert str(err.value).startswith(field)
    assert d["seed"] == 9
