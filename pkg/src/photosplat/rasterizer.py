"""Forward rendering of a splat scene into intensity, depth, normal and albedo maps.

Two paths produce the same maps:

* :func:`render` -- screen-space bounding, 16x16 tile binning, compiled
  per-tile blending.  Keeps the tape needed by :func:`photosplat.autograd.backward`.
* :func:`render_reference` -- every splat tested against every pixel in
  numpy, no bounding boxes.  Kept as the correctness oracle.

Contributors are ordered by the camera depth of the splat centre, ties by
splat index.  Normals are the splat ``t_w`` axes flipped to face the camera.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import EPS_DEPTH, CameraModel, SplatFrame, project_points
from .reflectance import ImageCalibration, shade

TILE = 16
ALPHA_MIN = _kernels.ALPHA_MIN
T_MIN = _kernels.T_MIN
INVALID_DEPTH = -1.0
SIGMA_CUTOFF = 3.0
FILTER_RADIUS = 2.0


@dataclass
class RenderBundle:
    intensity: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray | None
    accumulation: np.ndarray
    raw_intensity: np.ndarray
    tape: dict | None = field(default=None, repr=False)

    @property
    def valid_depth(self):
        return self.depth != INVALID_DEPTH


def gaussian_value(uv):
    uv = np.asarray(uv, dtype=np.float64)
    return np.exp(-0.5 * np.sum(uv * uv, axis=-1))


def intersect(frame: SplatFrame, origin, direction, cam: CameraModel | None = None):
    """Ray/splat-plane intersection -> ``(uv, depth)`` or ``None`` for a miss.

    ``depth`` is the camera-frame z of the hit when ``cam`` is given, else the
    ray parameter.
    """
    R = frame.rotation
    tu, tv, tw = R[:, 0], R[:, 1], R[:, 2]
    d = np.asarray(direction, dtype=np.float64)
    q = np.asarray(frame.position, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    den = tw @ d
    if abs(den) < _kernels.PARALLEL_EPS:
        return None
    t = (tw @ q) / den
    if t <= EPS_DEPTH:
        return None
    w = t * d - q
    uv = np.array([tu @ w / frame.scales[0], tv @ w / frame.scales[1]])
    X = np.asarray(origin, dtype=np.float64) + t * d
    depth = cam.to_camera(X)[2] if cam is not None else t
    return uv, depth


def _homography(cam, p, tu, tv, su, sv):
    # (u, v, 1) -> homogeneous pixel, batched (n, 3, 3)
    cols = np.stack([(su[:, None] * tu) @ cam.R.T, (sv[:, None] * tv) @ cam.R.T,
                     p @ cam.R.T + cam.t], axis=-1)
    return cam.K[None] @ cols


def bound_arrays(cam: CameraModel, p, R, scales, opacity):
    """Integer pixel boxes ``(n, 4)`` as ``x0 x1 y0 y1`` plus a visibility mask.

    A box contains every pixel where ``opacity * G_hat >= 1/255``: the
    projected ellipse at ``max(3, sqrt(2 ln(255 a)))`` sigma united with the
    screen-space filter disc.  Ellipses crossing the camera plane get the
    whole image.
    """
    n = len(p)
    boxes = np.zeros((n, 4), dtype=np.int64)
    if cam.width <= 0 or cam.height <= 0 or n == 0:
        return boxes, np.zeros(n, dtype=bool)
    pix, zc, in_front = project_points(cam, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        strength = np.log(255.0 * opacity)
    can_show = strength > 0
    k = np.sqrt(np.maximum(2.0 * np.maximum(strength, 0.0), SIGMA_CUTOFF**2))
    r_lp = np.maximum(np.sqrt(np.maximum(strength, 0.0)), FILTER_RADIUS)

    H = _homography(cam, p, R[:, :, 0], R[:, :, 1], scales[:, 0], scales[:, 1])
    h2 = H[:, 2]
    in_plane = np.hypot(h2[:, 0], h2[:, 1])
    safe = h2[:, 2] - k * in_plane > EPS_DEPTH
    D = H @ np.diag([1.0, 1.0, 0.0])[None] @ np.swapaxes(H, 1, 2) * (k**2)[:, None, None]
    D -= H[:, :, 2:3] * H[:, None, :, 2]
    ext = np.empty((n, 4))
    for axis in (0, 1):
        a, b, c = D[:, axis, axis], D[:, axis, 2], D[:, 2, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.sqrt(np.maximum(b * b - a * c, 0.0))
            lo = (b + root) / c
            hi = (b - root) / c
        ext[:, 2 * axis] = np.minimum(lo, hi)
        ext[:, 2 * axis + 1] = np.maximum(lo, hi)
    ext[:, 0] = np.minimum(ext[:, 0], pix[:, 0] - r_lp)
    ext[:, 1] = np.maximum(ext[:, 1], pix[:, 0] + r_lp)
    ext[:, 2] = np.minimum(ext[:, 2], pix[:, 1] - r_lp)
    ext[:, 3] = np.maximum(ext[:, 3], pix[:, 1] + r_lp)
    full = np.array([0, cam.width - 1, 0, cam.height - 1], dtype=np.float64)
    ext = np.where(safe[:, None], ext, full)
    ext = np.where(np.isfinite(ext), ext, full)
    margin = 1e-7
    boxes[:, 0] = np.clip(np.ceil(ext[:, 0] - margin), 0, cam.width)
    boxes[:, 1] = np.clip(np.floor(ext[:, 1] + margin), -1, cam.width - 1)
    boxes[:, 2] = np.clip(np.ceil(ext[:, 2] - margin), 0, cam.height)
    boxes[:, 3] = np.clip(np.floor(ext[:, 3] + margin), -1, cam.height - 1)
    nonempty = (boxes[:, 0] <= boxes[:, 1]) & (boxes[:, 2] <= boxes[:, 3])
    visible = in_front & (zc > EPS_DEPTH) & can_show & nonempty
    return boxes, visible


def bound(frame: SplatFrame, cam: CameraModel, opacity=1.0):
    """Pixel rectangle ``(x0, x1, y0, y1)`` (inclusive) or ``None`` when culled."""
    boxes, vis = bound_arrays(cam, np.asarray(frame.position, float)[None], frame.rotation[None],
                              np.asarray(frame.scales, float)[None], np.array([opacity], float))
    return tuple(int(v) for v in boxes[0]) if vis[0] else None


@dataclass
class Prepared:
    """Activated, view-specific splat data shared by the forward and backward passes."""

    p: np.ndarray
    R: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    albedo: np.ndarray | None
    normal: np.ndarray
    flip: np.ndarray
    pix: np.ndarray
    depth: np.ndarray
    boxes: np.ndarray
    visible: np.ndarray
    shade_cache: dict


def prepare(splats, cam: CameraModel, sun):
    p = splats.means
    R = splats.rotations
    scales = splats.scales
    opacity = splats.opacities
    feats = splats.appearance()
    center = cam.center
    tw = R[:, :, 2]
    flip = np.where(np.sum(tw * (center - p), axis=1) >= 0, 1.0, -1.0)
    normal = tw * flip[:, None]
    color, cache = shade(splats.variant, feats, normal, p, np.asarray(sun, float), center)
    pix, depth, _ = project_points(cam, p)
    boxes, visible = bound_arrays(cam, p, R, scales, opacity)
    albedo = None if splats.variant == "sh" else feats
    return Prepared(p, R, scales, opacity, color, albedo, normal, flip, pix, depth, boxes,
                    visible, cache)


def _pack(prep: Prepared):
    n = len(prep.p)
    geo = np.empty((n, 17))
    geo[:, 0:3] = prep.p
    geo[:, 3:6] = prep.R[:, :, 0]
    geo[:, 6:9] = prep.R[:, :, 1]
    geo[:, 9:12] = prep.R[:, :, 2]
    geo[:, 12:14] = prep.scales
    geo[:, 14] = prep.opacity
    geo[:, 15:17] = prep.pix
    val = np.zeros((n, 6))
    val[:, 0] = prep.color
    if prep.albedo is not None:
        val[:, 1] = prep.albedo
    val[:, 2:5] = prep.normal
    val[:, 5] = prep.depth
    return geo, val


def _bin(prep: Prepared, cam: CameraModel):
    tiles_x = -(-cam.width // TILE)
    tiles_y = -(-cam.height // TILE)
    idx = np.flatnonzero(prep.visible)
    b = prep.boxes[idx]
    tx0, tx1 = b[:, 0] // TILE, b[:, 1] // TILE
    ty0, ty1 = b[:, 2] // TILE, b[:, 3] // TILE
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = tx0[owner] + local % nx[owner]
    tile_y = ty0[owner] + local // nx[owner]
    tile_id = tile_y * tiles_x + tile_x
    splat = idx[owner]
    order = np.lexsort((splat, prep.depth[splat], tile_id))
    tile_id, splat = tile_id[order], splat[order]
    n_tiles = tiles_x * tiles_y
    starts = np.searchsorted(tile_id, np.arange(n_tiles), side="left")
    ends = np.searchsorted(tile_id, np.arange(n_tiles), side="right")
    return starts.astype(np.int64), ends.astype(np.int64), splat.astype(np.int64), tiles_x


def _finish(cam, calibration, intensity, accum, depth_sum, normal, albedo, tape):
    cal = calibration if calibration is not None else ImageCalibration()
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(accum > 0, depth_sum / accum, INVALID_DEPTH)
    return RenderBundle(cal.scale * intensity + cal.bias, depth, normal, albedo, accum, intensity,
                        tape)


def render(splats, view, keep_tape=True):
    """Render ``splats`` as seen by ``view`` (anything with ``camera``, ``sun``, ``calibration``)."""
    cam = view.camera
    if len(splats) == 0 or cam.width == 0 or cam.height == 0:
        H, W = cam.height, cam.width
        z = np.zeros((H, W))
        return _finish(cam, view.calibration, z, z.copy(), z.copy(), np.zeros((H, W, 3)),
                       None if splats.variant == "sh" else z.copy(), None)
    prep = prepare(splats, cam, view.sun)
    geo, val = _pack(prep)
    starts, ends, pair_splat, tiles_x = _bin(prep, cam)
    dirs = np.ascontiguousarray(cam.rays())
    dzs = np.ascontiguousarray(dirs @ cam.R[2])
    origin = cam.center
    intensity, accum, depth_sum, normal, albedo, last, checksum = _kernels.forward(
        starts, ends, pair_splat, geo, val, prep.boxes, origin, dirs, dzs,
        cam.width, cam.height, TILE, tiles_x)
    tape = None
    if keep_tape:
        tape = dict(prep=prep, geo=geo, val=val, starts=starts, ends=ends,
                    pair_splat=pair_splat, tiles_x=tiles_x, dirs=dirs, dzs=dzs, origin=origin,
                    last=last, checksum=checksum, depth_sum=depth_sum)
    return _finish(cam, view.calibration, intensity, accum, depth_sum, normal,
                   None if splats.variant == "sh" else albedo, tape)


def render_reference(splats, view):
    """Exhaustive full-scan renderer: no boxes, no tiles, one numpy pass per splat."""
    cam = view.camera
    H, W = cam.height, cam.width
    intensity = np.zeros((H, W))
    accum = np.zeros((H, W))
    depth_sum = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    albedo = np.zeros((H, W))
    if len(splats) and H and W:
        prep = prepare(splats, cam, view.sun)
        dirs = cam.rays()
        dz = dirs @ cam.R[2]
        o = cam.center
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        T = np.ones((H, W))
        active = np.ones((H, W), dtype=bool)
        in_front = prep.depth > EPS_DEPTH
        order = np.lexsort((np.arange(len(splats)), prep.depth))
        for k in order:
            if not in_front[k]:
                continue
            tu, tv, tw = prep.R[k, :, 0], prep.R[k, :, 1], prep.R[k, :, 2]
            q = prep.p[k] - o
            den = dirs @ tw
            ok = np.abs(den) >= _kernels.PARALLEL_EPS
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(ok, (tw @ q) / np.where(ok, den, 1.0), 0.0)
            hit = ok & (t > EPS_DEPTH)
            w = t[..., None] * dirs - q
            u = (w @ tu) / prep.scales[k, 0]
            v = (w @ tv) / prep.scales[k, 1]
            g3 = np.where(hit, np.exp(-0.5 * (u * u + v * v)), 0.0)
            g2 = np.exp(-((xs - prep.pix[k, 0]) ** 2 + (ys - prep.pix[k, 1]) ** 2))
            use3 = g3 >= g2
            g = np.where(use3, g3, g2)
            z = np.where(use3, t * dz, prep.depth[k])
            a = prep.opacity[k] * g
            take = active & (a >= ALPHA_MIN)
            wgt = np.where(take, a * T, 0.0)
            intensity += wgt * prep.color[k]
            if prep.albedo is not None:
                albedo += wgt * prep.albedo[k]
            normal += wgt[..., None] * prep.normal[k]
            depth_sum += wgt * z
            accum += wgt
            T = np.where(take, T * (1.0 - a), T)
            active &= ~(take & (T < T_MIN))
    return _finish(cam, view.calibration, intensity, accum, depth_sum, normal,
                   None if splats.variant == "sh" else albedo, None)
