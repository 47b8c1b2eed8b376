"""Photometric angles, disk functions, spherical harmonics and per-splat shading.

All angles are radians except inside :func:`phase_weight`, where the
Lunar-Lambert weighting is defined on degrees.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

VARIANTS = ("sh", "lambert", "lommel_seeliger", "lunar_lambert")
PHYSICS_VARIANTS = VARIANTS[1:]

LS_DENOM_FLOOR = 1e-4
PHASE_SCALE_DEG = 60.0

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)
SH_DEGREE = 3
SH_COEFFS = (SH_DEGREE + 1) ** 2


def check_variant(variant):
    if variant not in VARIANTS:
        raise ValidationError(f"unknown appearance variant {variant!r}; expected one of {VARIANTS}")
    return variant


class PhotometricAngles(NamedTuple):
    incidence: np.ndarray
    emission: np.ndarray
    phase: np.ndarray


@dataclass
class ImageCalibration:
    """Affine exposure correction ``I = scale * render + bias``."""

    scale: float = 1.0
    bias: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("calibration scale must be positive")


def _clamped_dot(a, b):
    return np.clip(np.sum(np.asarray(a, float) * np.asarray(b, float), axis=-1), -1.0, 1.0)


def angles(n, s, e):
    """Incidence, emission and phase angles from unit normal, sun and view vectors."""
    return PhotometricAngles(np.arccos(_clamped_dot(n, s)), np.arccos(_clamped_dot(n, e)),
                             np.arccos(_clamped_dot(s, e)))


def phase_weight(phase):
    """Lunar-Lambert weight exp(-phase/60deg) for a phase angle in radians."""
    return np.exp(-np.degrees(phase) / PHASE_SCALE_DEG)


def disk_lambert(a: PhotometricAngles):
    return np.maximum(np.cos(a.incidence), 0.0)


def _lommel_seeliger_cos(mu0, mu):
    mu0 = np.maximum(mu0, 0.0)
    den = np.maximum(mu0 + np.maximum(mu, 0.0), LS_DENOM_FLOOR)
    return np.where(mu0 > 0, 2.0 * mu0 / den, 0.0)


def disk_lommel_seeliger(a: PhotometricAngles):
    return _lommel_seeliger_cos(np.cos(a.incidence), np.cos(a.emission))


def disk_lunar_lambert(a: PhotometricAngles):
    g = phase_weight(a.phase)
    return (1.0 - g) * disk_lambert(a) + g * disk_lommel_seeliger(a)


DISK_FUNCTIONS = {
    "lambert": disk_lambert,
    "lommel_seeliger": disk_lommel_seeliger,
    "lunar_lambert": disk_lunar_lambert,
}


def disk_from_cosines(variant, mu0, mu, cos_phase, need_grad=False):
    """Disk function on raw (unclamped) cosines, optionally with partials.

    Returns ``d`` or ``(d, dd/dmu0, dd/dmu, dd/dcos_phase)``.  Partials are
    taken on the clamped branch that is active; the arccos in the phase
    weight has its derivative zeroed at the +-1 endpoints.
    """
    mu0 = np.asarray(mu0, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    lit = mu0 > 0
    d_l = np.where(lit, mu0, 0.0)
    if variant == "lambert":
        if not need_grad:
            return d_l
        z = np.zeros_like(mu0)
        return d_l, lit.astype(np.float64), z, z

    mup = np.maximum(mu, 0.0)
    raw_den = np.where(lit, mu0, 0.0) + mup
    floored = raw_den < LS_DENOM_FLOOR
    den = np.where(floored, LS_DENOM_FLOOR, raw_den)
    d_ls = np.where(lit, 2.0 * d_l / den, 0.0)
    if variant == "lommel_seeliger":
        if not need_grad:
            return d_ls
        g0 = np.where(lit, np.where(floored, 2.0 / den, 2.0 * mup / den**2), 0.0)
        g1 = np.where(lit & ~floored & (mu > 0), -2.0 * d_l / den**2, 0.0)
        return d_ls, g0, g1, np.zeros_like(mu0)

    if variant != "lunar_lambert":
        raise ValueError(f"no disk function for variant {variant!r}")
    c = np.clip(np.asarray(cos_phase, dtype=np.float64), -1.0, 1.0)
    phi = np.arccos(c)
    g = phase_weight(phi)
    d = (1.0 - g) * d_l + g * d_ls
    if not need_grad:
        return d
    _, l0, _, _ = disk_from_cosines("lambert", mu0, mu, c, True)
    _, s0, s1, _ = disk_from_cosines("lommel_seeliger", mu0, mu, c, True)
    interior = np.abs(cos_phase) < 1.0
    dphi_dc = np.where(interior, -1.0 / np.sqrt(np.where(interior, 1.0 - c * c, 1.0)), 0.0)
    dg_dc = g * (-np.degrees(1.0) / PHASE_SCALE_DEG) * dphi_dc
    return d, (1.0 - g) * l0 + g * s0, g * s1, (d_ls - d_l) * dg_dc


def sh_basis(dirs):
    """Real SH basis up to degree 3 at unit directions ``(..., 3)`` -> ``(..., 16)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    return np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
        SH_C2[3] * x * z, SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z, SH_C3[2] * y * (4 * zz - xx - yy),
        SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy),
    ], axis=-1)


def sh_basis_jacobian(dirs):
    """d sh_basis / d(x, y, z), shape ``(..., 16, 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    o = np.zeros_like(x)
    rows = [
        (o, o, o),
        (o, -SH_C1 + o, o), (o, o, SH_C1 + o), (-SH_C1 + o, o, o),
        (SH_C2[0] * y, SH_C2[0] * x, o), (o, SH_C2[1] * z, SH_C2[1] * y),
        (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
        (SH_C2[3] * z, o, SH_C2[3] * x), (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, o),
        (6 * SH_C3[0] * x * y, SH_C3[0] * (3 * xx - 3 * yy), o),
        (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
        (-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), 8 * SH_C3[2] * y * z),
        (-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
        (SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z),
        (2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
        (SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, o),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh(coeffs, view_dir):
    """Degree-3 SH intensity with the +0.5 offset, clamped at zero."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != SH_COEFFS:
        raise ValueError(f"expected {SH_COEFFS} SH coefficients, got {coeffs.shape[-1]}")
    return np.maximum(np.sum(sh_basis(view_dir) * coeffs, axis=-1) + 0.5, 0.0)


def splat_intensity(variant, appearance, n, s, e, cal: ImageCalibration | None = None):
    """Intensity of one splat (or a batch) before blending.

    ``appearance`` is the SH coefficient vector for ``"sh"`` and the relative
    albedo otherwise.  ``e`` points from the splat towards the camera.  The
    image calibration is applied after blending, so ``cal`` is accepted for
    interface symmetry but not used here.
    """
    check_variant(variant)
    if variant == "sh":
        return eval_sh(appearance, -np.asarray(e, dtype=np.float64))
    mu0 = np.sum(np.asarray(n, float) * np.asarray(s, float), axis=-1)
    mu = np.sum(np.asarray(n, float) * np.asarray(e, float), axis=-1)
    cph = _clamped_dot(s, e)
    albedo = np.asarray(appearance, dtype=np.float64)
    if albedo.ndim and albedo.shape[-1] == 1:
        albedo = albedo[..., 0]
    return albedo * disk_from_cosines(variant, mu0, mu, cph)


def shade(variant, features, normals, positions, sun, cam_center):
    """Per-splat colours for one view, with everything backward needs.

    ``normals`` are already flipped towards the camera.  ``features`` is the
    *activated* appearance: SH coefficients ``(n, 16)`` or albedo ``(n,)``.
    """
    diff = cam_center - positions
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    e = diff / dist
    cache = {"e": e, "dist": dist}
    if variant == "sh":
        view = -e
        basis = sh_basis(view)
        raw = np.sum(basis * features, axis=-1) + 0.5
        cache.update(basis=basis, view=view, active=raw > 0)
        return np.maximum(raw, 0.0), cache
    mu0 = normals @ sun
    mu = np.sum(normals * e, axis=-1)
    cph = e @ sun
    d, dmu0, dmu, dcph = disk_from_cosines(variant, mu0, mu, cph, need_grad=True)
    cache.update(disk=d, dmu0=dmu0, dmu=dmu, dcph=dcph)
    return features * d, cache


def shade_vjp(variant, features, normals, sun, cache, dcolor):
    """Gradients of the colours w.r.t. features, normals and positions."""
    e, dist = cache["e"], cache["dist"]
    if variant == "sh":
        g = np.where(cache["active"], dcolor, 0.0)
        dfeat = cache["basis"] * g[:, None]
        jac = sh_basis_jacobian(cache["view"])
        dview = np.einsum("nk,nkj->nj", features, jac) * g[:, None]
        de = -dview
        dnormal = np.zeros_like(normals)
    else:
        dfeat = cache["disk"] * dcolor
        gd = features * dcolor
        dnormal = (gd * cache["dmu0"])[:, None] * sun + (gd * cache["dmu"])[:, None] * e
        de = (gd * cache["dmu"])[:, None] * normals + (gd * cache["dcph"])[:, None] * sun
    # e = (c - p)/|c - p|  =>  de/dp = -(I - e e^T)/|c - p|
    dpos = -(de - e * np.sum(de * e, axis=-1, keepdims=True)) / dist
    return dfeat, dnormal, dpos
