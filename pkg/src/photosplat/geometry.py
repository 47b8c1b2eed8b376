"""Frames, quaternions and the pinhole camera.

Quaternions are stored scalar-first ``(w, x, y, z)`` and use the *passive*
attitude convention: the matrix returned by :func:`quat_to_rotmat` is the
transpose of the usual Hamilton (active) rotation matrix of the same
quaternion.  ``quat_to_rotmat`` is the only place that convention lives.

Pixel coordinates put ``x`` along image columns (width) and ``y`` along rows
(height); pixel centres sit on integer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera

EPS_DEPTH = 1e-6


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrix R_WS for (batched) quaternions ``(..., 4)``.

    The input is normalised first so raw optimiser parameters can be passed.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = w * w + x * x - y * y - z * z
    R[..., 0, 1] = 2 * (x * y + w * z)
    R[..., 0, 2] = 2 * (x * z - w * y)
    R[..., 1, 0] = 2 * (x * y - w * z)
    R[..., 1, 1] = w * w - x * x + y * y - z * z
    R[..., 1, 2] = 2 * (y * z + w * x)
    R[..., 2, 0] = 2 * (x * z + w * y)
    R[..., 2, 1] = 2 * (y * z - w * x)
    R[..., 2, 2] = w * w - x * x - y * y + z * z
    return R


def quat_to_rotmat_vjp(q, dR):
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back to the raw quaternion.

    Includes the normalisation, so the result is tangent to the sphere at
    ``q / |q|`` (scaled by ``1/|q|``).
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / norm
    w, x, y, z = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]
    G = dR
    g00, g01, g02 = G[..., 0, 0], G[..., 0, 1], G[..., 0, 2]
    g10, g11, g12 = G[..., 1, 0], G[..., 1, 1], G[..., 1, 2]
    g20, g21, g22 = G[..., 2, 0], G[..., 2, 1], G[..., 2, 2]
    dqh = np.empty_like(qh)
    dqh[..., 0] = 2 * (w * (g00 + g11 + g22) + z * (g01 - g10) - y * (g02 - g20) + x * (g12 - g21))
    dqh[..., 1] = 2 * (x * (g00 - g11 - g22) + y * (g01 + g10) + z * (g02 + g20) + w * (g12 - g21))
    dqh[..., 2] = 2 * (-y * g00 + x * (g01 + g10) - w * (g02 - g20) + y * g11 + z * (g12 + g21) - y * g22)
    dqh[..., 3] = 2 * (-z * g00 + w * (g01 - g10) + x * (g02 + g20) - z * g11 + y * (g12 + g21) + z * g22)
    radial = np.sum(dqh * qh, axis=-1, keepdims=True)
    return (dqh - qh * radial) / norm


def rotmat_to_quat(R):
    """Inverse of :func:`quat_to_rotmat` (returns the ``w >= 0`` representative)."""
    R = np.asarray(R, dtype=np.float64)
    # passive matrix is the transpose of the Hamilton one
    M = np.swapaxes(R, -1, -2)
    batch = M.shape[:-2]
    M = M.reshape(-1, 3, 3)
    out = np.empty((M.shape[0], 4))
    for i, m in enumerate(M):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    return quat_normalize(out).reshape(batch + (4,))


def axis_angle_to_rotmat(axis, angle):
    """Active rotation matrix (Rodrigues) -- used to build fixtures and scene rotations."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


@dataclass(frozen=True, eq=False)
class SplatFrame:
    """One splat's local frame: centre, in-plane scales and orientation."""

    position: np.ndarray
    scales: tuple
    quat: np.ndarray

    def __post_init__(self):
        if min(self.scales) <= 0:
            raise ValueError("splat scales must be positive")

    @property
    def rotation(self):
        return quat_to_rotmat(self.quat)

    def matrix(self):
        """Homogeneous 4x4 T_WS (third column zero)."""
        R = self.rotation
        T = np.zeros((4, 4))
        T[:3, 0] = self.scales[0] * R[:, 0]
        T[:3, 1] = self.scales[1] * R[:, 1]
        T[:3, 3] = self.position
        T[3, 3] = 1.0
        return T


def world_from_splat(frame: SplatFrame, uv):
    R = frame.rotation
    uv = np.asarray(uv, dtype=np.float64)
    return (np.asarray(frame.position, dtype=np.float64)
            + frame.scales[0] * uv[..., 0:1] * R[:, 0]
            + frame.scales[1] * uv[..., 1:2] * R[:, 1])


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera; ``x_C = R @ x_W + t`` with ``R = R_CW``."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    _rays: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = np.asarray(self.R, dtype=np.float64)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def to_camera(self, x):
        return np.asarray(x, dtype=np.float64) @ self.R.T + self.t

    def rotated(self, Rg):
        """The same camera after a rigid world rotation ``x -> Rg x``."""
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.R @ Rg.T, self.t,
                           self.width, self.height)

    def rays(self):
        """Unit ray directions (world) through every pixel centre, shape (H, W, 3)."""
        if "dirs" not in self._rays:
            ys, xs = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
            d_cam = np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy,
                              np.ones_like(xs)], axis=-1)
            d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
            self._rays["dirs"] = d_cam @ self.R
        return self._rays["dirs"]


def look_at(eye, target, up, fx, fy, width, height, cx=None, cy=None):
    """Camera at ``eye`` with its boresight (+z) towards ``target``.

    Image rows grow along the camera +y axis, which points away from ``up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-12:
        raise ValueError("up vector parallel to viewing direction")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    cx = (width - 1) / 2.0 if cx is None else cx
    cy = (height - 1) / 2.0 if cy is None else cy
    return CameraModel(fx, fy, cx, cy, R, -R @ eye, width, height)


def project_points(cam: CameraModel, x):
    """Vectorised projection; returns ``(pixels, depth, valid)`` without raising."""
    xc = cam.to_camera(x)
    z = xc[..., 2]
    valid = z > EPS_DEPTH
    zs = np.where(valid, z, 1.0)
    px = np.stack([cam.fx * xc[..., 0] / zs + cam.cx, cam.fy * xc[..., 1] / zs + cam.cy], axis=-1)
    return px, z, valid


def project(cam: CameraModel, x):
    """Pixel coordinates and camera depth of world point(s) ``x``.

    Raises :class:`BehindCamera` when any point has ``z_C <= EPS_DEPTH``.
    """
    px, z, valid = project_points(cam, x)
    if not np.all(valid):
        raise BehindCamera("point at or behind the camera near plane")
    return px, z


def pixel_ray(cam: CameraModel, pixel):
    """World-frame ray ``(origin, unit direction)`` through a (sub)pixel position."""
    pixel = np.asarray(pixel, dtype=np.float64)
    d_cam = np.stack([(pixel[..., 0] - cam.cx) / cam.fx, (pixel[..., 1] - cam.cy) / cam.fy,
                      np.ones(pixel.shape[:-1])], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    return cam.center, d_cam @ cam.R
