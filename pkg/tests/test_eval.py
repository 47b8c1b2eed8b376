import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from photosplat.errors import DegenerateFit, DegenerateGeometry, EmptyMask, EmptySet, EmptyVolume
from photosplat.eval import (MetricReport, SplitMetrics, affine_fit, albedo_error, align_icp,
                             extract_mesh, hausdorff, hausdorff_normalized, normal_error, psnr)
from photosplat.geometry import axis_angle_to_rotmat, look_at
from photosplat.io import ViewContext
from photosplat.splats import make_splats
from photosplat.synthscene import sphere_cap_splats, sphere_cap_views


# ---------------------------------------------------------------- image metrics

def test_psnr_examples():
    a = np.zeros((10, 10))
    assert psnr(a, a) == math.inf
    assert psnr(a, np.full((10, 10), 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, np.full((10, 10), 0.01)) == pytest.approx(40.0, abs=1e-12)


@given(st.floats(1e-8, 10), st.floats(1.0001, 10))
def test_psnr_decreases_with_mse(mse, factor):
    a = np.zeros(4)
    b1 = np.full(4, math.sqrt(mse))
    b2 = np.full(4, math.sqrt(mse * factor))
    assert psnr(a, b2) < psnr(a, b1)


def unit(rng, shape):
    v = rng.normal(size=shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_normal_error_examples(rng):
    n = unit(rng, (6, 6))
    mask = np.ones((6, 6), bool)
    assert normal_error(n, n, mask) == pytest.approx(0.0, abs=1e-5)
    ortho = np.cross(n, unit(rng, (6, 6)))
    ortho /= np.linalg.norm(ortho, axis=-1, keepdims=True)
    assert normal_error(n, ortho, mask) == pytest.approx(90.0, abs=1e-9)
    half = n.copy()
    half[:3] *= -1
    assert normal_error(n, half, mask) == pytest.approx(90.0, abs=1e-5)
    with pytest.raises(EmptyMask):
        normal_error(n, n, np.zeros((6, 6), bool))


def test_albedo_error_examples(rng):
    a = rng.uniform(0.1, 0.9, (8, 8))
    mask = np.ones((8, 8), bool)
    assert albedo_error(a, a, mask) == pytest.approx(0.0, abs=1e-12)
    assert albedo_error(3 * a + 0.2, a, mask) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(EmptyMask):
        albedo_error(a, a, ~mask)


def test_albedo_error_normal_equations_oracle(rng):
    x, y = rng.random(50), rng.uniform(0.2, 1, 50)
    A = np.stack([x, np.ones(50)], 1)
    s, o = np.linalg.solve(A.T @ A, A.T @ y)
    expected = np.mean(np.abs(y - (s * x + o)) / y)
    assert albedo_error(x[:, None], y[:, None], np.ones((50, 1), bool)) == \
        pytest.approx(expected, abs=1e-12)


def test_constant_prediction_falls_back_to_offset():
    with pytest.warns(DegenerateFit):
        s, o = affine_fit(np.full(5, 0.3), np.arange(5.0))
    assert s == 0 and o == 2.0


def test_out_of_mask_values_are_never_read(rng):
    n = unit(rng, (8, 8))
    m = unit(rng, (8, 8))
    a, b = rng.uniform(0.2, 1, (8, 8)), rng.uniform(0.2, 1, (8, 8))
    mask = rng.random((8, 8)) > 0.5
    ref = normal_error(n, m, mask), albedo_error(a, b, mask)
    for arr in (n, m, a, b):
        arr[~mask] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert (normal_error(n, m, mask), albedo_error(a, b, mask)) == ref


def test_report_serialises_infinite_psnr_and_missing_albedo():
    rep = MetricReport("sh", SplitMetrics(psnr=math.inf, psnr_infinite=True, ssim=1.0),
                       SplitMetrics(psnr=31.0, ssim=0.9, normal_error_deg=4.0))
    d = json.loads(rep.to_json())
    assert d["train"]["psnr"] is None and d["train"]["psnr_infinite"] is True
    assert d["test"]["albedo_error"] is None
    assert "--/--" in rep.format().splitlines()[4]


# ---------------------------------------------------------------- point sets

def test_hausdorff_examples():
    cube = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], float)
    assert hausdorff_normalized(cube, cube) == 0
    moved = cube.copy()
    moved[3] += [0.1, 0, 0]
    assert hausdorff_normalized(moved, cube) == pytest.approx(0.1 / math.sqrt(3), abs=1e-15)
    with pytest.raises(EmptySet):
        hausdorff(np.zeros((0, 3)), cube)


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_hausdorff_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rng.integers(1, 200), 3))
    b = rng.normal(size=(rng.integers(1, 200), 3))
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    expected = max(d.min(axis=1).max(), d.min(axis=0).max())
    assert hausdorff(a, b) == pytest.approx(expected, abs=1e-12)
    assert hausdorff(b, a) == hausdorff(a, b)


def test_icp_recovers_rigid_motion(rng):
    src = rng.normal(size=(300, 3)) * [1.0, 0.7, 0.4]
    R = axis_angle_to_rotmat([0.2, 1.0, 0.3], 0.25)
    t = np.array([0.3, -0.2, 0.1])
    al = align_icp(src, src @ R.T + t)
    assert al.rms < 1e-6
    assert np.allclose(al.R, R, atol=1e-6) and np.allclose(al.t, t, atol=1e-6)


def test_icp_identity_and_degenerate(rng):
    src = rng.normal(size=(50, 3))
    al = align_icp(src, src)
    assert np.allclose(al.R, np.eye(3)) and np.allclose(al.t, 0)
    with pytest.raises(DegenerateGeometry):
        align_icp(src[:2], src)
    line = np.outer(np.arange(10.0), [1, 2, 3])
    with pytest.raises(DegenerateGeometry):
        align_icp(line, src)


# ---------------------------------------------------------------- mesh extraction

def plane_scene():
    xs = np.arange(-1.5, 1.51, 0.1)
    X, Y = np.meshgrid(xs, xs)
    means = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], 1)
    s = make_splats("lambert", means, 0.08, [1.0, 0, 0, 0], 0.99, 0.5)
    views = []
    for k, eye in enumerate([[0.3, 0, 4], [-0.3, 0, 4], [0, 0.3, 4], [0, -0.3, 4]]):
        cam = look_at(eye, [0, 0, 0], [0, 1, 0], 40, 40, 48, 48)
        views.append(ViewContext(f"p{k}", cam, np.array([0.0, 0, 1])))
    return s, views


def test_plane_mesh_lies_on_plane():
    s, views = plane_scene()
    mesh = extract_mesh(s, views, resolution=64)
    voxel = np.linalg.norm(np.ptp(mesh.vertices, axis=0)) / 64
    assert len(mesh.faces) > 0
    assert np.max(np.abs(mesh.vertices[:, 2])) <= voxel


def test_sphere_mesh_radius():
    s = sphere_cap_splats(spacing=0.04)
    views = sphere_cap_views(size=64, focal=128)
    mesh = extract_mesh(s, views, resolution=96)
    voxel = np.linalg.norm(np.ptp(mesh.vertices, axis=0)) / 96
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.median(np.abs(r - 1)) < voxel
    assert np.max(np.abs(r - 1)) < 2 * voxel


def test_empty_volume():
    s, views = plane_scene()
    s.opacity_logits[:] = -30
    with pytest.raises(EmptyVolume):
        extract_mesh(s, views)
    with pytest.raises(EmptyVolume):
        extract_mesh(s, [])
