"""Learned splat scene: storage, initialisation, densification and checkpoints.

Parameters are stored unconstrained: scales and albedos as logarithms,
opacities as logits, quaternions un-normalised (normalised on use).

Checkpoint layout (little-endian)::

    magic   4 bytes  b"PSPL"
    uint32  format version (1)
    uint32  variant code (index into reflectance.VARIANTS)
    uint32  splat count n
    uint32  appearance width f (16 for SH, 1 otherwise)
    uint32  number of per-image calibrations m
    uint32  iteration counter
    float32 arrays, each written column-major (all of column 0, then column 1, ...):
        means (n, 3), log_scales (n, 2), quats (n, 4), opacity_logits (n,),
        features (n, f), calibration (m, 2) as (scale, bias)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInit, ValidationError
from .geometry import SplatFrame, quat_normalize, quat_to_rotmat
from .reflectance import SH_C0, SH_COEFFS, VARIANTS, check_variant

INIT_OPACITY = 0.1
INIT_ALBEDO = 0.5
SPLIT_FACTOR = 1.6
PERCENT_DENSE = 0.01

CHECKPOINT_MAGIC = b"PSPL"
CHECKPOINT_VERSION = 1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def feature_width(variant):
    return SH_COEFFS if variant == "sh" else 1


@dataclass(eq=False)
class SplatSet:
    variant: str
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray
    grad_accum: np.ndarray = field(default=None)
    grad_count: np.ndarray = field(default=None)

    def __post_init__(self):
        check_variant(self.variant)
        n = len(self.means)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)
        self.check()

    def check(self):
        n = len(self.means)
        shapes = {
            "means": (self.means, (n, 3)),
            "log_scales": (self.log_scales, (n, 2)),
            "quats": (self.quats, (n, 4)),
            "opacity_logits": (self.opacity_logits, (n,)),
            "features": (self.features, (n, feature_width(self.variant))),
            "grad_accum": (self.grad_accum, (n,)),
            "grad_count": (self.grad_count, (n,)),
        }
        for name, (arr, shape) in shapes.items():
            if np.shape(arr) != shape:
                raise ValidationError(f"{name} has shape {np.shape(arr)}, expected {shape}")

    def __len__(self):
        return len(self.means)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def rotations(self):
        return quat_to_rotmat(self.quats)

    @property
    def normals(self):
        return self.rotations[:, :, 2]

    @property
    def albedo(self):
        if self.variant == "sh":
            return None
        return np.exp(self.features[:, 0])

    def appearance(self):
        """Activated appearance: SH coefficients ``(n, 16)`` or albedo ``(n,)``."""
        return self.features if self.variant == "sh" else np.exp(self.features[:, 0])

    def frame(self, k):
        return SplatFrame(self.means[k].copy(), tuple(self.scales[k]), self.quats[k].copy())

    def params(self):
        """Name -> array view of the optimisable parameters."""
        return {"means": self.means, "log_scales": self.log_scales, "quats": self.quats,
                "opacity_logits": self.opacity_logits, "features": self.features}

    def copy(self):
        return SplatSet(self.variant, self.means.copy(), self.log_scales.copy(), self.quats.copy(),
                        self.opacity_logits.copy(), self.features.copy(), self.grad_accum.copy(),
                        self.grad_count.copy())

    def take(self, idx):
        idx = np.asarray(idx)
        return SplatSet(self.variant, self.means[idx], self.log_scales[idx], self.quats[idx],
                        self.opacity_logits[idx], self.features[idx], self.grad_accum[idx],
                        self.grad_count[idx])

    def normalize_quats(self):
        self.quats[:] = quat_normalize(self.quats)

    def rotated(self, Rg):
        """Copy of the scene after a rigid world rotation ``x -> Rg x``."""
        from .geometry import rotmat_to_quat
        out = self.copy()
        out.means = self.means @ Rg.T
        out.quats = rotmat_to_quat(Rg @ self.rotations)
        return out


def make_splats(variant, means, scales, quats, opacities, appearance):
    """Build a scene from activated values (tests and oracle scenes)."""
    check_variant(variant)
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    n = len(means)
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 2))
    opacities = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
    with np.errstate(divide="ignore"):
        logits = logit(opacities)
    if variant == "sh":
        feats = np.broadcast_to(np.asarray(appearance, dtype=np.float64), (n, SH_COEFFS)).copy()
    else:
        a = np.broadcast_to(np.asarray(appearance, dtype=np.float64), (n,))
        feats = np.log(a)[:, None].copy()
    return SplatSet(variant, means.copy(), np.log(scales).copy(),
                    quat_normalize(np.broadcast_to(quats, (n, 4))).copy(), logits.copy(), feats)


def _knn_scales(points):
    n = len(points)
    if n == 1:
        diag = 0.0
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(points).query(points, k=k + 1)
        return np.mean(dist[:, 1:], axis=1)
    diag = np.linalg.norm(points.max(axis=0) - points.min(axis=0))
    return np.full(n, 0.01 * (diag if diag > 0 else 1.0))


def init_from_points(points, variant, seed, random_count=None, bounds=None, mean_intensity=None):
    """One isotropic splat per point with randomly oriented frames.

    ``random_count`` points are drawn uniformly inside ``bounds`` (a pair of
    corner 3-vectors, default the cube ``[-1, 1]^3``) when ``points`` is empty.
    """
    check_variant(variant)
    rng = np.random.default_rng(seed)
    pts = np.zeros((0, 3)) if points is None else np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        if not random_count:
            raise EmptyInit("no initial points and no random splat count given")
        lo, hi = (np.full(3, -1.0), np.full(3, 1.0)) if bounds is None else map(np.asarray, bounds)
        pts = lo + (hi - lo) * rng.random((int(random_count), 3))
    n = len(pts)
    scale = _knn_scales(pts)
    quats = quat_normalize(rng.normal(size=(n, 4)))
    if variant == "sh":
        feats = np.zeros((n, SH_COEFFS))
        if mean_intensity is not None:
            feats[:, 0] = (mean_intensity - 0.5) / SH_C0
    else:
        feats = np.full((n, 1), np.log(INIT_ALBEDO))
    return SplatSet(variant, pts.copy(), np.log(np.stack([scale, scale], axis=1)), quats,
                    np.full(n, logit(INIT_OPACITY)), feats)


def densify_and_prune(s: SplatSet, grad_threshold, opacity_floor, scene_extent, rng=None,
                      return_parents=False):
    """Clone small / split large high-gradient splats, then drop faint ones.

    Returns the new scene.  With ``return_parents`` also returns the source
    index of every output splat and a mask of the newly created ones, so
    optimiser state can follow the survivors and start fresh for the rest.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(s)
    mean_grad = s.grad_accum / np.maximum(s.grad_count, 1)
    hot = mean_grad > grad_threshold
    big = s.scales.max(axis=1) > PERCENT_DENSE * scene_extent
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)
    keep = np.setdiff1d(np.arange(n), split)

    parents = np.concatenate([keep, clone, split, split])
    fresh = np.arange(len(parents)) >= len(keep)
    out = s.take(parents)
    if len(split):
        m = len(split)
        R = s.rotations[split]
        sc = s.scales[split]
        for block in (slice(n - m + len(clone), n + len(clone)),
                      slice(n + len(clone), n + len(clone) + m)):
            offs = rng.normal(size=(m, 2)) * sc
            out.means[block] = s.means[split] + offs[:, :1] * R[:, :, 0] + offs[:, 1:] * R[:, :, 1]
            out.log_scales[block] = s.log_scales[split] - np.log(SPLIT_FACTOR)

    alive = out.opacities >= opacity_floor
    out = out.take(np.flatnonzero(alive))
    parents = parents[alive]
    fresh = fresh[alive]
    out.grad_accum[:] = 0.0
    out.grad_count[:] = 0.0
    return (out, parents, fresh) if return_parents else out


def reset_opacity(s: SplatSet, value=0.01):
    s.opacity_logits[:] = np.minimum(s.opacity_logits, logit(value))


def save_checkpoint(path, s: SplatSet, calibration=None, iteration=0):
    cal = np.zeros((0, 2)) if calibration is None else np.asarray(calibration, dtype=np.float64)
    header = CHECKPOINT_MAGIC + struct.pack("<6I", CHECKPOINT_VERSION, VARIANTS.index(s.variant),
                                            len(s), s.features.shape[1], len(cal), int(iteration))
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (s.means, s.log_scales, s.quats, s.opacity_logits[:, None], s.features, cal):
            fh.write(np.asarray(arr, dtype="<f4").tobytes(order="F"))


def load_checkpoint(path):
    """Returns ``(splats, calibration (m, 2), iteration)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a splat checkpoint")
    version, vcode, n, f, m, it = struct.unpack("<6I", data[4:28])
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    off = 28
    arrays = []
    for shape in ((n, 3), (n, 2), (n, 4), (n, 1), (n, f), (m, 2)):
        count = shape[0] * shape[1]
        flat = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        arrays.append(flat.reshape(shape, order="F").astype(np.float64))
        off += 4 * count
    means, log_scales, quats, op, feats, cal = arrays
    splats = SplatSet(VARIANTS[vcode], means, log_scales, quats, op[:, 0].copy(), feats)
    return splats, cal, it


def export_ply(path, s: SplatSet):
    """Point cloud of splat centres with normal ``t_w``, opacity and albedo (SH: DC intensity)."""
    from .io import write_ply

    if s.variant == "sh":
        albedo = SH_C0 * s.features[:, 0] + 0.5
    else:
        albedo = s.albedo
    write_ply(path, s.means, normal=s.normals, opacity=s.opacities, albedo=albedo)
