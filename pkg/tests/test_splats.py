import numpy as np
import pytest
from hypothesis import given, strategies as st

from photosplat.errors import EmptyInit, ValidationError
from photosplat.io import read_ply
from photosplat.reflectance import SH_C0
from photosplat.splats import (INIT_OPACITY, SPLIT_FACTOR, SplatSet, densify_and_prune,
                               export_ply, init_from_points, load_checkpoint, make_splats,
                               reset_opacity, save_checkpoint)


def tetrahedron():
    return np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)


def scene(rng, n=10, variant="lambert"):
    app = rng.normal(size=(n, 16)) if variant == "sh" else rng.uniform(0.1, 1, n)
    return make_splats(variant, rng.normal(size=(n, 3)), rng.uniform(0.01, 0.5, (n, 2)),
                       rng.normal(size=(n, 4)), rng.uniform(0.05, 0.95, n), app)


# ---------------------------------------------------------------- initialisation

def test_tetrahedron_scales_equal_edge_length():
    s = init_from_points(tetrahedron(), "lambert", seed=0)
    assert len(s) == 4
    assert np.allclose(s.scales, np.sqrt(8.0), atol=1e-9, rtol=0)


def test_knn_scale_against_brute_force(rng):
    pts = rng.normal(size=(40, 3))
    s = init_from_points(pts, "lambert", seed=0)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    expected = np.sort(d, axis=1)[:, :3].mean(axis=1)
    assert np.allclose(s.scales[:, 0], expected) and np.allclose(s.scales[:, 1], expected)


def test_single_point_default_scale():
    s = init_from_points(np.array([[1.0, 2.0, 3.0]]), "lambert", seed=0)
    assert len(s) == 1 and np.all(s.scales > 0)


def test_initial_values():
    s = init_from_points(tetrahedron(), "lommel_seeliger", seed=3)
    assert np.allclose(s.opacities, INIT_OPACITY)
    assert np.allclose(s.albedo, 0.5)
    sh = init_from_points(tetrahedron(), "sh", seed=3, mean_intensity=0.3)
    assert sh.features.shape == (4, 16)
    assert np.allclose(SH_C0 * sh.features[:, 0] + 0.5, 0.3)
    assert np.all(sh.features[:, 1:] == 0)


def test_same_seed_is_bit_identical(rng):
    pts = rng.normal(size=(30, 3))
    a = init_from_points(pts, "sh", seed=7)
    b = init_from_points(pts, "sh", seed=7)
    for k, v in a.params().items():
        assert np.array_equal(v, b.params()[k])


def test_random_init():
    s = init_from_points(None, "lambert", seed=1, random_count=25)
    assert len(s) == 25 and np.all(np.abs(s.means) <= 1)


def test_empty_init():
    with pytest.raises(EmptyInit):
        init_from_points(np.zeros((0, 3)), "lambert", seed=0)


def test_shape_validation():
    with pytest.raises(ValidationError):
        SplatSet("lambert", np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((3, 4)), np.zeros(2),
                 np.zeros((2, 1)))
    with pytest.raises(ValidationError):
        SplatSet("sh", np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 4)), np.zeros(2),
                 np.zeros((2, 1)))


# ---------------------------------------------------------------- densification

def test_no_gradients_is_identity(rng):
    s = scene(rng)
    out = densify_and_prune(s, 2e-4, 5e-3, 10.0)
    for k, v in s.params().items():
        assert np.array_equal(v, out.params()[k])


def test_prune_one():
    s = make_splats("lambert", np.zeros((3, 3)), 0.1, [1.0, 0, 0, 0], [0.5, 0.001, 0.7], 0.5)
    out = densify_and_prune(s, 2e-4, 5e-3, 10.0)
    assert len(out) == 2 and np.all(out.opacities >= 5e-3)


def test_split_large_splat():
    s = make_splats("lambert", np.zeros((2, 3)), [[1.0, 0.5], [0.01, 0.01]], [1.0, 0, 0, 0],
                    0.5, 0.5)
    s.grad_accum[:] = [1.0, 0.0]
    s.grad_count[:] = 1
    out, parents, fresh = densify_and_prune(s, 2e-4, 5e-3, 10.0, return_parents=True)
    assert len(out) == 3
    kids = out.scales[parents == 0]
    assert len(kids) == 2 and np.allclose(kids, np.array([1.0, 0.5]) / SPLIT_FACTOR)
    assert fresh.sum() == 2 and np.all(parents[fresh] == 0)
    assert np.all(out.grad_accum == 0) and np.all(out.grad_count == 0)


def test_split_children_stay_in_plane(rng):
    s = make_splats("lambert", np.zeros((1, 3)), [[1.0, 0.5]], rng.normal(size=4), 0.5, 0.5)
    s.grad_accum[:] = 1.0
    s.grad_count[:] = 1
    out = densify_and_prune(s, 2e-4, 5e-3, 10.0, rng=rng)
    n = s.normals[0]
    assert np.allclose(out.means @ n, 0.0, atol=1e-12)


def test_clone_small_splat():
    s = make_splats("lambert", np.zeros((1, 3)), 0.01, [1.0, 0, 0, 0], 0.5, 0.5)
    s.grad_accum[:] = 1.0
    s.grad_count[:] = 1
    out = densify_and_prune(s, 2e-4, 5e-3, 10.0)
    assert len(out) == 2 and np.allclose(out.means, 0) and np.allclose(out.scales, 0.01)


ops = st.lists(st.sampled_from(["densify", "prune", "reset", "perturb"]), min_size=1, max_size=8)


@given(ops, st.integers(0, 2**31))
def test_invariants_under_random_operations(sequence, seed):
    rng = np.random.default_rng(seed)
    s = scene(rng, n=int(rng.integers(1, 12)), variant=["sh", "lambert"][seed % 2])
    floor = 5e-3
    for op in sequence:
        if op == "densify":
            s.grad_accum[:] = rng.uniform(0, 4e-4, len(s))
            s.grad_count[:] = 1
            before = s.opacities
            out = densify_and_prune(s, 2e-4, floor, 5.0, rng=rng)
            assert len(out) >= int(np.sum(before >= floor))
            s = out
        elif op == "prune":
            s = densify_and_prune(s, np.inf, floor, 5.0)
        elif op == "reset":
            reset_opacity(s, 0.01)
        else:
            s.means += rng.normal(size=s.means.shape) * 0.1
            s.opacity_logits += rng.normal(size=len(s))
        s.check()
        assert np.all(s.scales > 0)
        assert np.all((s.opacities > 0) & (s.opacities < 1))


def test_reset_opacity_caps():
    s = make_splats("lambert", np.zeros((2, 3)), 0.1, [1.0, 0, 0, 0], [0.9, 0.005], 0.5)
    reset_opacity(s, 0.01)
    assert np.allclose(s.opacities, [0.01, 0.005])


# ---------------------------------------------------------------- files

@pytest.mark.parametrize("variant", ["sh", "lunar_lambert"])
def test_checkpoint_round_trip(tmp_path, rng, variant):
    s = scene(rng, variant=variant)
    cal = np.array([[1.2, 0.01], [0.9, -0.02]])
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, s, cal, iteration=42)
    t, cal2, it = load_checkpoint(path)
    assert it == 42 and t.variant == variant
    for k, v in s.params().items():
        assert np.array_equal(v.astype(np.float32), t.params()[k].astype(np.float32))
    assert np.allclose(cal, cal2, rtol=1e-7)
    raw = path.read_bytes()
    assert raw[:4] == b"PSPL"
    # column-major: the first n floats are the x coordinates
    xs = np.frombuffer(raw, dtype="<f4", count=len(s), offset=28)
    assert np.array_equal(xs, s.means[:, 0].astype(np.float32))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"nope" + bytes(40))
    with pytest.raises(ValidationError):
        load_checkpoint(p)


def test_point_cloud_export(tmp_path, rng):
    s = scene(rng)
    export_ply(tmp_path / "s.ply", s)
    v = read_ply(tmp_path / "s.ply")
    assert np.allclose(v["x"], s.means[:, 0], rtol=1e-6)
    assert np.allclose(np.stack([v["nx"], v["ny"], v["nz"]], 1), s.normals, atol=1e-6)
    assert np.allclose(v["opacity"], s.opacities, rtol=1e-6)
    assert np.allclose(v["albedo"], s.albedo, rtol=1e-6)


def test_rotated_scene(rng):
    from photosplat.geometry import axis_angle_to_rotmat
    s = scene(rng)
    R = axis_angle_to_rotmat([1.0, 2.0, 0.5], 0.7)
    r = s.rotated(R)
    assert np.allclose(r.means, s.means @ R.T)
    assert np.allclose(r.rotations, R @ s.rotations, atol=1e-12)
