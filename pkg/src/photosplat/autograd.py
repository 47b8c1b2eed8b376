"""Reverse-mode gradients of the training loss and a finite-difference harness."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import MissingContributors, NonFiniteLoss
from .geometry import quat_to_rotmat_vjp
from .reflectance import ImageCalibration, shade_vjp


@dataclass
class MapGrads:
    """dL/d(render outputs).  Any field may be ``None`` (treated as zero).

    ``intensity`` is w.r.t. the calibrated intensity map, ``depth`` w.r.t. the
    normalised depth map.
    """

    intensity: np.ndarray | None = None
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None
    albedo: np.ndarray | None = None
    accumulation: np.ndarray | None = None


@dataclass
class GradientSet:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray
    calibration: np.ndarray
    screen: np.ndarray

    def params(self):
        return {"means": self.means, "log_scales": self.log_scales, "quats": self.quats,
                "opacity_logits": self.opacity_logits, "features": self.features}


def backward(splats, view, bundle, grads: MapGrads) -> GradientSet:
    """Exact gradients of a scalar loss through one render.

    ``grads`` holds the loss partials w.r.t. the maps in ``bundle``.  Returns
    partials w.r.t. the raw (unconstrained) splat parameters, the view's
    ``(scale, bias)`` and the per-splat screen-space gradient magnitude used
    for densification.
    """
    n = len(splats)
    cam = view.camera
    H, W = cam.height, cam.width
    cal = view.calibration if view.calibration is not None else ImageCalibration()
    zero = np.zeros((H, W))
    g_int = zero if grads.intensity is None else np.asarray(grads.intensity, dtype=np.float64)
    g_acc = zero.copy() if grads.accumulation is None else np.array(grads.accumulation, dtype=np.float64)
    g_dep = zero if grads.depth is None else np.asarray(grads.depth, dtype=np.float64)
    g_nrm = np.zeros((H, W, 3)) if grads.normal is None else np.asarray(grads.normal, dtype=np.float64)
    g_alb = zero if grads.albedo is None else np.asarray(grads.albedo, dtype=np.float64)

    d_cal = np.array([np.sum(g_int * bundle.raw_intensity), np.sum(g_int)])
    out = GradientSet(np.zeros((n, 3)), np.zeros((n, 2)), np.zeros((n, 4)), np.zeros(n),
                      np.zeros_like(splats.features), d_cal, np.zeros(n))
    if n == 0:
        return out
    if bundle.tape is None:
        raise MissingContributors("render was run without keeping the backward tape")
    tp = bundle.tape
    prep = tp["prep"]

    # depth = depth_sum / accum
    acc = bundle.accumulation
    valid = acc > 0
    safe = np.where(valid, acc, 1.0)
    g_dsum = np.where(valid, g_dep / safe, 0.0)
    g_acc = g_acc - np.where(valid, g_dep * tp["depth_sum"] / safe**2, 0.0)

    pair = _kernels.backward(tp["starts"], tp["ends"], tp["pair_splat"], tp["geo"], tp["val"],
                             prep.boxes, tp["origin"], tp["dirs"], tp["dzs"], W, H,
                             16, tp["tiles_x"], tp["last"], np.ascontiguousarray(cal.scale * g_int),
                             np.ascontiguousarray(g_acc), np.ascontiguousarray(g_dsum),
                             np.ascontiguousarray(g_nrm), np.ascontiguousarray(g_alb))
    ps = tp["pair_splat"]
    G = np.zeros((n, pair.shape[1]))
    for c in range(pair.shape[1]):
        G[:, c] = np.bincount(ps, weights=pair[:, c], minlength=n)

    d_p = G[:, 0:3].copy()
    d_tu, d_tv, d_tw = G[:, 3:6], G[:, 6:9].copy(), G[:, 9:12].copy()
    d_scale = G[:, 12:14]
    d_pix = G[:, 14:16]
    d_alpha = G[:, 16]
    d_color = G[:, 17]
    d_albedo = G[:, 18]
    d_normal = G[:, 19:22]
    d_zc = G[:, 22]

    feats = splats.appearance()
    d_feat, d_nrm_shade, d_p_shade = shade_vjp(splats.variant, feats, prep.normal,
                                               np.asarray(view.sun, float), prep.shade_cache,
                                               d_color)
    d_p += d_p_shade
    d_tw += (d_normal + d_nrm_shade) * prep.flip[:, None]

    # projected centre and centre depth
    pc = cam.to_camera(prep.p)
    zc = np.where(np.abs(pc[:, 2]) > 1e-12, pc[:, 2], 1e-12)
    d_pc = np.stack([cam.fx * d_pix[:, 0] / zc, cam.fy * d_pix[:, 1] / zc,
                     -(cam.fx * pc[:, 0] * d_pix[:, 0] + cam.fy * pc[:, 1] * d_pix[:, 1]) / zc**2
                     + d_zc], axis=1)
    d_p += d_pc @ cam.R

    d_R = np.stack([d_tu, d_tv, d_tw], axis=-1)
    out.means = d_p
    out.quats = quat_to_rotmat_vjp(splats.quats, d_R)
    out.log_scales = d_scale * prep.scales
    out.opacity_logits = d_alpha * prep.opacity * (1.0 - prep.opacity)
    if splats.variant == "sh":
        out.features = d_feat
    else:
        out.features = ((d_feat + d_albedo) * feats)[:, None]

    g_cam = d_p @ cam.R.T
    out.screen = np.hypot(g_cam[:, 0], g_cam[:, 1]) * np.abs(zc) / cam.fx * 0.5 * W
    return out


PARAM_CLASSES = ("position", "scale", "rotation", "opacity", "appearance", "calibration")
_CLASS_OF = {"means": "position", "log_scales": "scale", "quats": "rotation",
             "opacity_logits": "opacity", "features": "appearance"}


@dataclass
class FDReport:
    max_rel_error: dict
    checked: dict
    excluded: dict
    tolerance: float
    floor: float

    def passed(self):
        return all(v <= self.tolerance for v in self.max_rel_error.values())

    def format(self):
        lines = [f"{'class':<12} {'checked':>8} {'excluded':>9} {'max rel err':>12}"]
        for c in PARAM_CLASSES:
            lines.append(f"{c:<12} {self.checked.get(c, 0):>8d} {self.excluded.get(c, 0):>9d} "
                         f"{self.max_rel_error.get(c, 0.0):>12.3e}")
        lines.append("PASS" if self.passed() else "FAIL")
        return "\n".join(lines)


def rel_error(a, b, tol=1e-3, floor=1e-6):
    """Relative error with an absolute floor: below ``tol`` iff the pair agrees."""
    return abs(a - b) / max(abs(a), abs(b), floor / tol)


def fd_check(splats, view, loss_fn, step=1e-4, tol=1e-3, floor=1e-6, max_per_class=None,
             rng=None):
    """Compare :func:`backward` against central differences of the full loss.

    ``loss_fn(splats, view) -> (loss, GradientSet, signature)`` must evaluate
    the loss and its analytic gradient; ``signature`` captures the discrete
    choices of the evaluation (sort order, contributor sets, max-rule branches,
    clamps).  Perturbations that change the signature straddle a
    non-differentiable point and are reported as excluded rather than compared.
    """
    loss0, grad, sig0 = loss_fn(splats, view)
    if not np.isfinite(loss0):
        raise NonFiniteLoss("loss is not finite at the evaluation point")
    errors = {c: 0.0 for c in PARAM_CLASSES}
    checked = {c: 0 for c in PARAM_CLASSES}
    excluded = {c: 0 for c in PARAM_CLASSES}

    def probe(set_value, analytic, cls):
        lp, _, sp = loss_fn(*set_value(+step))
        lm, _, sm = loss_fn(*set_value(-step))
        set_value(0.0)
        if not (_same(sig0, sp) and _same(sig0, sm)):
            excluded[cls] += 1
            return
        fd = (lp - lm) / (2 * step)
        errors[cls] = max(errors[cls], rel_error(analytic, fd, tol, floor))
        checked[cls] += 1

    gparams = grad.params()
    for name, arr in splats.params().items():
        cls = _CLASS_OF[name]
        flat = arr.reshape(-1)
        gflat = gparams[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_per_class is not None and idx.size > max_per_class:
            idx = (rng or np.random.default_rng(0)).choice(idx, max_per_class, replace=False)
        for i in idx:
            base = flat[i]

            def setter(h, flat=flat, i=i, base=base):
                flat[i] = base + h
                return splats, view
            probe(setter, gflat[i], cls)

    cal = view.calibration
    for j, attr in enumerate(("scale", "bias")):
        base = getattr(cal, attr)

        def setter(h, attr=attr, base=base):
            setattr(cal, attr, base + h)
            return splats, view
        probe(setter, grad.calibration[j], "calibration")
    return FDReport(errors, checked, excluded, tol, floor)


def _same(a, b):
    if a.keys() != b.keys():
        return False
    for k in a:
        x, y = a[k], b[k]
        if np.shape(x) != np.shape(y) or not np.array_equal(x, y):
            return False
    return True
