import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nocsloc.geometry import (
    Box3D,
    CameraIntrinsics,
    ObjectSize,
    Pose4DoF,
    Ray,
    nocs_of,
    normalized_to_pixel,
    object_to_world,
    pixel_to_normalized,
    ray_box_intersect,
    world_to_object,
    wrap_angle,
    yaw_rotation,
)

angles = st.floats(-10.0, 10.0, allow_nan=False)
coords = st.floats(-20.0, 20.0, allow_nan=False)
sizes = st.floats(0.2, 6.0, allow_nan=False)


@st.composite
def poses(draw):
    return Pose4DoF(draw(angles), (draw(coords), draw(coords), draw(st.floats(1.0, 40.0))))


@st.composite
def boxes(draw):
    return Box3D(draw(poses()), ObjectSize(draw(sizes), draw(sizes), draw(sizes)))


def test_yaw_rotation_examples():
    assert np.array_equal(yaw_rotation(0.0), np.eye(3))
    r = yaw_rotation(math.pi)
    assert r[0, 0] == pytest.approx(-1) and r[2, 2] == pytest.approx(-1) and r[1, 1] == 1
    r = yaw_rotation(0.3)
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_yaw_rotates_about_vertical_axis():
    r = yaw_rotation(0.8)
    assert np.allclose(r @ [0, 1, 0], [0, 1, 0])
    # positive yaw turns +x towards -z
    assert r @ np.array([1.0, 0, 0]) == pytest.approx([math.cos(0.8), 0, -math.sin(0.8)])


@given(angles, angles)
def test_yaw_composition(a, b):
    assert np.allclose(yaw_rotation(a) @ yaw_rotation(b), yaw_rotation(a + b), atol=1e-12)


@given(angles)
def test_wrap_angle_interval(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)
    assert math.sin(w) == pytest.approx(math.sin(a), abs=1e-9)


def test_wrap_angle_boundaries():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert Pose4DoF(3 * math.pi, (0, 0, 1)).yaw == pytest.approx(math.pi)


def test_pixel_to_normalized_examples():
    k = CameraIntrinsics(720, 710, 620, 190)
    assert np.allclose(pixel_to_normalized(620, 190, k), [0, 0, 1])
    k = CameraIntrinsics(100, 100, 0, 0)
    assert np.allclose(pixel_to_normalized(50, -25, k), [0.5, -0.25, 1])


@given(st.floats(-2, 2), st.floats(-2, 2))
def test_normalized_round_trip(u, v):
    k = CameraIntrinsics(721.5, 700.1, 609.6, 172.9)
    px = normalized_to_pixel(np.array([u, v, 1.0]), k)
    back = pixel_to_normalized(px[0], px[1], k)
    assert np.allclose(back, [u, v, 1.0], atol=1e-12)


def test_camera_rejects_bad_focal():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0)


def test_world_to_object_examples():
    pose = Pose4DoF(0.4, (1.0, 2.0, 9.0))
    assert np.allclose(world_to_object(np.array(pose.t), pose), 0)
    ident = Pose4DoF(0.0, (0, 0, 0))
    x = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(world_to_object(x, ident), x)


@given(poses(), coords, coords, coords)
def test_world_object_round_trip(pose, x, y, z):
    p = np.array([x, y, z])
    assert np.allclose(object_to_world(world_to_object(p, pose), pose), p, atol=1e-12)


def test_nocs_of_examples():
    s = ObjectSize(4, 2, 2)
    assert np.array_equal(nocs_of(np.zeros(3), s), np.zeros(3))
    assert np.allclose(nocs_of(np.array([2, 1, -1.0]), s), [0.5, 0.5, -0.5])
    x = np.array([0.7, -0.3, 0.1])
    assert np.allclose(nocs_of(x, s) * s.as_array(), x, atol=1e-12)


@given(boxes(), st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5)))
def test_interior_points_have_cube_nocs(box, frac):
    x_cam = object_to_world(np.array(frac) * box.size.as_array(), box.pose)
    o = nocs_of(world_to_object(x_cam, box.pose), box.size)
    assert np.all(np.abs(o) <= 0.5 + 1e-9)


def test_size_must_be_positive():
    with pytest.raises(ValueError):
        ObjectSize(1, 0, 1)


def test_ray_requires_unit_direction():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0, 0, 2.0]))


def test_box_corners_follow_pose():
    box = Box3D(Pose4DoF(0.5, (1, 2, 10)), ObjectSize(4, 1.5, 2))
    c = box.corners()
    assert c.shape == (8, 3)
    assert np.allclose(c.mean(axis=0), [1, 2, 10])
    local = world_to_object(c, box.pose)
    assert np.allclose(np.abs(local), [2, 0.75, 1])
    assert box.volume == pytest.approx(12.0)


def test_ray_box_axis_aligned():
    box = Box3D(Pose4DoF(0.0, (0, 0, 5)), ObjectSize(1, 1, 1))
    hit = ray_box_intersect(Ray(np.zeros(3), np.array([0, 0, 1.0])), box)
    assert hit == pytest.approx((4.5, 5.5), abs=1e-12)
    assert ray_box_intersect(Ray(np.zeros(3), np.array([1.0, 0, 0])), box) is None


def test_ray_box_rotated_matches_membership_oracle():
    # Interval from 1e4 membership samples along the ray (spacing 1e-3): [4.106, 5.990].
    box = Box3D(Pose4DoF(0.7, (0.3, 0.2, 5.0)), ObjectSize(2.0, 1.0, 1.5))
    d = np.array([0.05, 0.02, 1.0])
    near, far = ray_box_intersect(Ray(np.zeros(3), d / np.linalg.norm(d)), box)
    assert near == pytest.approx(4.106, abs=1e-3)
    assert far == pytest.approx(5.990, abs=1e-3)


def test_ray_box_endpoints_on_surface():
    box = Box3D(Pose4DoF(-0.4, (0.5, 0.1, 7.0)), ObjectSize(3.0, 1.2, 1.6))
    rng = np.random.default_rng(0)
    for _ in range(50):
        d = np.array([rng.uniform(-0.1, 0.15), rng.uniform(-0.05, 0.05), 1.0])
        ray = Ray(np.zeros(3), d / np.linalg.norm(d))
        hit = ray_box_intersect(ray, box)
        if hit is None:
            continue
        assert 0 <= hit[0] < hit[1]
        for g in hit:
            local = world_to_object(ray.origin + g * ray.direction, box.pose)
            gap = np.max(np.abs(local) / (0.5 * box.size.as_array()))
            assert gap == pytest.approx(1.0, abs=1e-9)


def test_ray_box_clips_origin_inside():
    box = Box3D(Pose4DoF(0.2, (0, 0, 0.2)), ObjectSize(2, 2, 2))
    near, far = ray_box_intersect(Ray(np.zeros(3), np.array([0, 0, 1.0])), box)
    assert near == 0.0 and far > 0


def test_ray_box_ignores_box_behind():
    box = Box3D(Pose4DoF(0.0, (0, 0, -5)), ObjectSize(1, 1, 1))
    assert ray_box_intersect(Ray(np.zeros(3), np.array([0, 0, 1.0])), box) is None


@settings(max_examples=60)
@given(boxes(), angles, coords, coords, coords)
def test_ray_box_rigid_invariance(box, yaw, tx, ty, tz):
    rng = np.random.default_rng(1)
    target = np.array(box.pose.t) + rng.uniform(-0.3, 0.3, 3) * box.size.as_array()
    d = target / np.linalg.norm(target)
    ray = Ray(np.zeros(3), d)
    base = ray_box_intersect(ray, box)
    if base is None or base[0] == 0.0:
        return
    motion = Pose4DoF(yaw, (tx, ty, tz))
    moved_box = Box3D(Pose4DoF(box.pose.yaw + yaw, tuple(object_to_world(np.array(box.pose.t), motion))), box.size)
    moved_ray = Ray(object_to_world(ray.origin, motion), yaw_rotation(yaw) @ ray.direction)
    moved = ray_box_intersect(moved_ray, moved_box)
    assert moved is not None
    assert moved == pytest.approx(base, abs=1e-9)


def test_box_dict_round_trip():
    box = Box3D(Pose4DoF(1.1, (1, 2, 3)), ObjectSize(4, 1.5, 1.7))
    assert Box3D.from_dict(box.to_dict()) == box
