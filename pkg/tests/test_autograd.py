import numpy as np
import pytest

from photosplat.autograd import GradientSet, MapGrads, backward, fd_check, rel_error
from photosplat.errors import MissingContributors, NonFiniteLoss
from photosplat.geometry import look_at
from photosplat.io import ViewContext
from photosplat.losses import LossConfig, loss_intensity
from photosplat.rasterizer import render
from photosplat.reflectance import ImageCalibration
from photosplat.splats import make_splats
from photosplat.synthscene import random_scene
from photosplat.trainer import loss_function

VARIANTS = ["sh", "lambert", "lommel_seeliger", "lunar_lambert"]


def test_zero_map_grads_give_zero(rng):
    s, v = random_scene("lunar_lambert", 4, 8, seed=3)
    g = backward(s, v, render(s, v), MapGrads())
    for arr in list(g.params().values()) + [g.calibration, g.screen]:
        assert np.all(arr == 0)


def test_transparent_splat_has_no_gradient(rng):
    s, v = random_scene("lambert", 3, 8, seed=5)
    s.opacity_logits[1] = -40.0
    b = render(s, v)
    g = backward(s, v, b, MapGrads(intensity=rng.normal(size=(8, 8)),
                                   accumulation=rng.normal(size=(8, 8))))
    for name, arr in g.params().items():
        assert np.all(np.abs(arr[1]) < 1e-12), name


def test_calibration_partials_closed_form(rng):
    s, v = random_scene("sh", 3, 8, seed=2)
    b = render(s, v)
    gi = rng.normal(size=(8, 8))
    g = backward(s, v, b, MapGrads(intensity=gi))
    assert g.calibration[1] == pytest.approx(gi.sum(), rel=1e-12)
    assert g.calibration[0] == pytest.approx(np.sum(gi * b.raw_intensity), rel=1e-12)


def test_missing_tape():
    s, v = random_scene("lambert", 3, 8, seed=0)
    b = render(s, v, keep_tape=False)
    with pytest.raises(MissingContributors):
        backward(s, v, b, MapGrads(intensity=np.ones((8, 8))))


def test_l1_gradient_bound_and_scale_doubling(rng):
    x, y = rng.random((8, 8)), rng.random((8, 8))
    _, g = loss_intensity(x, y, LossConfig(ssim_weight=0.0))
    assert np.all(np.abs(g) <= 1.0 / 64 + 1e-18)
    s, v = random_scene("lambert", 3, 8, seed=4)
    truth = 5 + rng.random((8, 8))  # keeps the sign pattern fixed

    def raw_grad(scale):
        v.calibration = ImageCalibration(scale, 0.0)
        b = render(s, v)
        _, gi = loss_intensity(b.intensity, truth, LossConfig(ssim_weight=0.0))
        return scale * gi, np.sign(b.intensity - truth)
    a, sa = raw_grad(0.5)
    b, sb = raw_grad(1.0)
    assert np.array_equal(sa, sb)
    assert np.allclose(b, 2 * a, rtol=0, atol=1e-15)


def test_deterministic_reduction():
    s, v = random_scene("sh", 6, 24, seed=8)
    gi = np.random.default_rng(0).normal(size=(24, 24))
    g1 = backward(s, v, render(s, v), MapGrads(intensity=gi))
    g2 = backward(s, v, render(s, v), MapGrads(intensity=gi))
    for k in g1.params():
        assert np.array_equal(g1.params()[k], g2.params()[k])


@pytest.mark.parametrize("variant", VARIANTS)
def test_finite_differences_match(variant):
    s, v = random_scene(variant, 3, 8, seed=1)
    truth = np.random.default_rng(2).random((8, 8)) * 0.5
    rep = fd_check(s, v, loss_function(truth, LossConfig(normal_weight=0.3,
                                                         normal_accum_min=0.05)))
    assert rep.passed(), rep.format()
    assert all(rep.checked[c] > 0 for c in rep.checked)


def test_quadratic_loss_is_exact(rng):
    s, v = random_scene("sh", 3, 8, seed=0)
    coef = {k: rng.uniform(0.5, 2, a.shape) for k, a in s.params().items()}
    ccal = rng.uniform(0.5, 2, 2)

    def fn(splats, view):
        p = splats.params()
        cal = np.array([view.calibration.scale, view.calibration.bias])
        loss = sum(np.sum(coef[k] * p[k] ** 2) for k in p) + np.sum(ccal * cal**2)
        g = {k: 2 * coef[k] * p[k] for k in p}
        gs = GradientSet(g["means"], g["log_scales"], g["quats"], g["opacity_logits"],
                         g["features"], 2 * ccal * cal, np.zeros(len(splats)))
        return float(loss), gs, {}
    rep = fd_check(s, v, fn, step=1e-3)
    assert max(rep.max_rel_error.values()) < 1e-8


def test_max_rule_tie_is_excluded():
    # fronto-parallel splat whose 3-D footprint equals the screen filter exactly:
    # u = sqrt(2) * pixel offset, so both branches agree at every pixel
    f, z = 8.0, 4.0
    cam = look_at([0, 0, z], [0, 0, 0], [0, 1, 0], f, f, 9, 9)
    v = ViewContext("tie", cam, np.array([0.0, 0, 1]), calibration=ImageCalibration())
    s = make_splats("lambert", [0, 0, 0], z / (f * np.sqrt(2)), [1.0, 0, 0, 0], 0.8, 0.6)
    truth = np.zeros((9, 9))
    rep = fd_check(s, v, loss_function(truth, LossConfig(), beta=0.0))
    assert rep.excluded["scale"] > 0


def test_non_finite_loss():
    s, v = random_scene("lambert", 3, 8, seed=0)
    with pytest.raises(NonFiniteLoss):
        fd_check(s, v, lambda sp, vw: (np.nan, None, {}))


def test_rel_error_floor():
    assert rel_error(1e-9, 0.0) < 1e-3
    assert rel_error(1.0, 1.0005) < 1e-3
    assert rel_error(1.0, 1.01) > 1e-3
