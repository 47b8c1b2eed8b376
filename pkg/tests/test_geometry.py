import numpy as np
import pytest
from hypothesis import given, strategies as st

from photosplat.errors import BehindCamera
from photosplat.geometry import (CameraModel, SplatFrame, axis_angle_to_rotmat, look_at,
                                 pixel_ray, project, project_points, quat_normalize,
                                 quat_to_rotmat, quat_to_rotmat_vjp, rotmat_to_quat,
                                 world_from_splat)

quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3).map(np.array)
unit = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(
    lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: np.array(v) / np.linalg.norm(v))


def identity_camera(f=100.0, c=64.0, size=129):
    return CameraModel(f, f, c, c, np.eye(3), np.zeros(3), size, size)


def random_camera(rng, size=64):
    R = axis_angle_to_rotmat(rng.normal(size=3), rng.uniform(0, np.pi))
    return CameraModel(rng.uniform(50, 200), rng.uniform(50, 200), rng.uniform(20, 40),
                       rng.uniform(20, 40), R, rng.normal(size=3), size, size)


# ---------------------------------------------------------------- quaternions

@given(quats)
def test_rotation_is_proper(q):
    R = quat_to_rotmat(q)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


@given(quats)
def test_double_cover(q):
    assert np.allclose(quat_to_rotmat(q), quat_to_rotmat(-q), atol=1e-12)


@given(quats)
def test_rotmat_round_trip(q):
    q = quat_normalize(q)
    q = q if q[0] >= 0 else -q
    back = rotmat_to_quat(quat_to_rotmat(q))
    assert np.allclose(quat_to_rotmat(back), quat_to_rotmat(q), atol=1e-9)


@given(unit, st.floats(-3, 3))
def test_passive_convention_against_axis_angle(axis, angle):
    # passive matrix of q = (cos a/2, sin a/2 axis) is the transpose of the active rotation
    q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
    assert np.allclose(quat_to_rotmat(q), axis_angle_to_rotmat(axis, angle).T, atol=1e-12)


def test_quaternion_vjp_matches_finite_differences(rng):
    q = rng.normal(size=4)
    G = rng.normal(size=(3, 3))
    g = quat_to_rotmat_vjp(q, G)
    h = 1e-6
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd = (np.sum(G * quat_to_rotmat(q + e)) - np.sum(G * quat_to_rotmat(q - e))) / (2 * h)
        assert abs(fd - g[i]) < 1e-7


# ---------------------------------------------------------------- splat frames

def test_world_from_splat_identity_frame():
    f = SplatFrame(np.zeros(3), (1.0, 1.0), np.array([1.0, 0, 0, 0]))
    assert np.allclose(world_from_splat(f, [0.3, -0.2]), [0.3, -0.2, 0.0])


@given(quats, st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_world_from_splat_centre(q, p):
    f = SplatFrame(np.array(p), (0.7, 1.3), q)
    assert np.allclose(world_from_splat(f, [0.0, 0.0]), p)


def test_world_from_splat_quarter_turn():
    # a frame whose u axis points along world +y; under the passive convention
    # that is the quaternion of a -90 degree rotation about z
    q = np.array([np.cos(np.pi / 4), 0.0, 0.0, -np.sin(np.pi / 4)])
    f = SplatFrame(np.zeros(3), (2.0, 1.0), q)
    x = world_from_splat(f, [1.0, 0.0])
    assert np.allclose(x, [0.0, 2.0, 0.0], atol=1e-12)
    assert np.allclose(f.matrix() @ [1.0, 0.0, 0.0, 1.0], np.append(x, 1.0), atol=1e-12)


def test_splat_frame_normal_is_cross_product(rng):
    R = quat_to_rotmat(rng.normal(size=4))
    assert np.allclose(np.cross(R[:, 0], R[:, 1]), R[:, 2], atol=1e-12)


def test_splat_frame_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        SplatFrame(np.zeros(3), (0.0, 1.0), np.array([1.0, 0, 0, 0]))


# ---------------------------------------------------------------- projection

def test_boresight_projects_to_principal_point():
    cam = CameraModel(80.0, 120.0, 30.0, 20.0, np.eye(3), np.zeros(3), 64, 48)
    px, z = project(cam, np.array([0.0, 0.0, 5.0]))
    assert np.allclose(px, [30.0, 20.0]) and z == 5.0


def test_similar_triangles():
    px, z = project(identity_camera(), np.array([0.1, 0.0, 1.0]))
    assert np.allclose(px, [74.0, 64.0]) and z == 1.0


def test_behind_camera_raises():
    with pytest.raises(BehindCamera):
        project(identity_camera(), np.array([0.0, 0.0, -1.0]))
    with pytest.raises(BehindCamera):
        project(identity_camera(), np.array([0.0, 0.0, 1e-7]))


def test_projection_matches_matrix_chain(rng):
    for _ in range(20):
        cam = random_camera(rng)
        x = cam.center + 3 * cam.R[2] + rng.normal(size=3) * 0.5
        px, z = project(cam, x)
        h = cam.K @ np.hstack([np.eye(3), np.zeros((3, 1))]) @ cam.matrix() @ np.append(x, 1.0)
        assert np.allclose(px, h[:2] / h[2], rtol=1e-12, atol=1e-9)
        assert np.isclose(z, h[2])


def test_splat_to_pixel_chain(rng):
    # world_from_splat then project equals the composed homogeneous chain
    for _ in range(20):
        cam = random_camera(rng)
        f = SplatFrame(cam.center + 4 * cam.R[2], (0.3, 0.5), rng.normal(size=4))
        uv = rng.normal(size=2)
        px, _ = project(cam, world_from_splat(f, uv))
        P = cam.K @ np.hstack([np.eye(3), np.zeros((3, 1))]) @ cam.matrix() @ f.matrix()
        h = P @ np.array([uv[0], uv[1], 0.0, 1.0])
        assert np.allclose(px, h[:2] / h[2], rtol=1e-9)


def test_projection_is_rotation_invariant(rng):
    cam = random_camera(rng)
    pts = cam.center + 4 * cam.R[2] + rng.normal(size=(50, 3))
    Rg = axis_angle_to_rotmat(rng.normal(size=3), 1.1)
    a, za, _ = project_points(cam, pts)
    b, zb, _ = project_points(cam.rotated(Rg), pts @ Rg.T)
    assert np.allclose(a, b, atol=1e-9) and np.allclose(za, zb, atol=1e-12)


def test_camera_rejects_improper_rotation():
    with pytest.raises(ValueError):
        CameraModel(1, 1, 0, 0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 2, 2)


def test_look_at_boresight():
    cam = look_at([1.0, 2.0, 10.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 50, 50, 33, 33)
    z = np.array([-1.0, -2.0, -10.0]) / np.linalg.norm([1.0, 2.0, 10.0])
    assert np.allclose(cam.R[2], z)
    px, _ = project(cam, np.zeros(3))
    assert np.allclose(px, [16.0, 16.0])


# ---------------------------------------------------------------- rays

def test_ray_through_principal_point_is_boresight(rng):
    cam = random_camera(rng)
    o, d = pixel_ray(cam, [cam.cx, cam.cy])
    assert np.allclose(o, cam.center) and np.allclose(d, cam.R[2])


def test_ray_at_45_degrees():
    cam = identity_camera()
    _, d = pixel_ray(cam, [64.0 + 100.0, 64.0])
    assert np.allclose(d, np.array([1.0, 0.0, 1.0]) / np.sqrt(2))


def test_ray_projection_round_trip(rng):
    cam = random_camera(rng)
    pix = rng.uniform(0, 63, size=(1000, 2))
    o, d = pixel_ray(cam, pix)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
    for t in (0.5, 3.0, 40.0):
        back, _ = project(cam, o + t * d)
        assert np.abs(back - pix).max() < 1e-6


def test_camera_rays_match_pixel_ray(rng):
    cam = random_camera(rng, size=16)
    ys, xs = np.mgrid[0:16, 0:16]
    _, d = pixel_ray(cam, np.stack([xs, ys], axis=-1).astype(float))
    assert np.allclose(cam.rays(), d, atol=1e-14)
