"""Image losses with analytic gradients: L1, windowed SSIM and depth/normal consistency."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeMismatch, ValidationError


@dataclass
class LossConfig:
    ssim_weight: float = 0.2          # lambda
    normal_weight: float = 0.05       # beta (final value of the ramp)
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    normal_accum_min: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValidationError("ssim_weight must lie in [0, 1]")
        if self.normal_weight < 0:
            raise ValidationError("normal_weight must be non-negative")
        if self.window < 3 or self.window % 2 == 0:
            raise ValidationError("SSIM window must be odd and >= 3")


@lru_cache(maxsize=32)
def window_matrix(n, window=11, sigma=1.5):
    """Dense ``(n, n)`` operator applying the 1-D Gaussian window with symmetric padding."""
    half = window // 2
    x = np.arange(window) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    M = np.zeros((n, n))
    for i in range(n):
        for k, wk in enumerate(g):
            j = i + k - half
            # symmetric padding: ... b a | a b c ... c b | b a ...
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            M[i, j] += wk
    M.setflags(write=False)
    return M


def _filters(shape, window, sigma):
    return window_matrix(shape[0], window, sigma), window_matrix(shape[1], window, sigma)


def ssim_map(x, y, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    Mh, Mw = _filters(x.shape, window, sigma)

    def f(a):
        return Mh @ a @ Mw.T

    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    return (a1 * a2) / (b1 * b2), (mx, my, a1, a2, b1, b2)


def ssim(x, y, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    return float(np.mean(ssim_map(x, y, window, sigma, c1, c2)[0]))


def ssim_grad(x, y, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Mean SSIM and its gradient w.r.t. ``x``."""
    S, (mx, my, a1, a2, b1, b2) = ssim_map(x, y, window, sigma, c1, c2)
    Mh, Mw = _filters(x.shape, window, sigma)
    gS = np.full(x.shape, 1.0 / x.size)
    inv = 1.0 / (b1 * b2)
    # grouped so that every term vanishes exactly (not just to roundoff) when x == y
    d_mx = gS * 2 * (my * (a2 - a1) - mx * S * (b2 - b1)) * inv
    k = gS * a1 * inv
    d_fxx = -k * (a2 / b2)
    d_fxy = 2 * k

    def ft(a):
        return Mh.T @ a @ Mw

    grad = ft(d_mx) + 2 * x * ft(d_fxx) + y * ft(d_fxy)
    return float(np.mean(S)), grad


def loss_intensity(render, truth, cfg: LossConfig):
    """``(1 - lambda) L1 + lambda (1 - SSIM)`` and its gradient w.r.t. ``render``."""
    render = np.asarray(render, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if render.shape != truth.shape:
        raise ShapeMismatch(f"render {render.shape} vs truth {truth.shape}")
    diff = render - truth
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - cfg.ssim_weight) * np.sign(diff) / diff.size
    loss = (1.0 - cfg.ssim_weight) * l1
    if cfg.ssim_weight > 0:
        s, gs = ssim_grad(render, truth, cfg.window, cfg.sigma, cfg.c1, cfg.c2)
        loss += cfg.ssim_weight * (1.0 - s)
        grad -= cfg.ssim_weight * gs
    return loss, grad


def depth_normals(depth, cam, valid):
    """World normals from central differences of back-projected depth.

    Returns ``(normals (H, W, 3), mask, cache)``; normals face the camera.
    """
    H, W = depth.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    ray = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1)
    P = depth[..., None] * ray
    mask = np.zeros((H, W), dtype=bool)
    if H >= 3 and W >= 3:
        mask[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                            & valid[2:, 1:-1] & valid[:-2, 1:-1])
    dx = np.zeros((H, W, 3))
    dy = np.zeros((H, W, 3))
    dx[1:-1, 1:-1] = P[1:-1, 2:] - P[1:-1, :-2]
    dy[1:-1, 1:-1] = P[2:, 1:-1] - P[:-2, 1:-1]
    c = np.cross(dy, dx)
    norm = np.linalg.norm(c, axis=-1)
    mask &= norm > 1e-20
    safe = np.where(mask, norm, 1.0)[..., None]
    n_cam = np.where(mask[..., None], c / safe, 0.0)
    n_world = n_cam @ cam.R
    return n_world, mask, dict(ray=ray, dx=dx, dy=dy, n_cam=n_cam, norm=safe)


def loss_normal(bundle, cam, cfg: LossConfig | None = None):
    """Mean over valid pixels of ``sum_i w_i (1 - n_i . n_d)``.

    Per pixel that sum equals ``accumulation - normal_map . n_d``.  Returns
    ``(loss, dL/d accumulation, dL/d normal, dL/d depth, mask)``.
    """
    cfg = cfg or LossConfig()
    H, W = bundle.depth.shape
    valid = bundle.accumulation > cfg.normal_accum_min
    n_d, mask, cache = depth_normals(bundle.depth, cam, valid)
    count = int(mask.sum())
    g_acc = np.zeros((H, W))
    g_nrm = np.zeros((H, W, 3))
    g_dep = np.zeros((H, W))
    if count == 0:
        return 0.0, g_acc, g_nrm, g_dep, mask
    per_pixel = bundle.accumulation - np.sum(bundle.normal * n_d, axis=-1)
    loss = float(np.sum(per_pixel[mask]) / count)
    w = mask / count
    g_acc = w.astype(np.float64)
    g_nrm = -n_d * w[..., None]
    g_nw = -bundle.normal * w[..., None]
    g_nc = g_nw @ cam.R.T
    n_c = cache["n_cam"]
    g_c = (g_nc - n_c * np.sum(n_c * g_nc, axis=-1, keepdims=True)) / cache["norm"]
    g_c = np.where(mask[..., None], g_c, 0.0)
    g_dy = np.cross(cache["dx"], g_c)
    g_dx = np.cross(g_c, cache["dy"])
    gP = np.zeros((H, W, 3))
    gP[1:-1, 2:] += g_dx[1:-1, 1:-1]
    gP[1:-1, :-2] -= g_dx[1:-1, 1:-1]
    gP[2:, 1:-1] += g_dy[1:-1, 1:-1]
    gP[:-2, 1:-1] -= g_dy[1:-1, 1:-1]
    g_dep = np.sum(gP * cache["ray"], axis=-1)
    return loss, g_acc, g_nrm, g_dep, mask
