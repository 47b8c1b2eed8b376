"""Procedural cratered terrain with an independent ray-traced renderer.

The terrain is a bilinear heightfield ``z = h(x, y)`` over a square patch
centred on the world origin (world z is up).  Rendering intersects each pixel
ray with the bilinear surface by marching followed by bisection and shades
the hit point with a disk function, so nothing here shares code with the
splat rasterizer beyond the disk functions themselves.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import CameraModel, look_at, rotmat_to_quat
from .io import SceneDataset, ViewContext, quantize16, quantize_normals
from .reflectance import ImageCalibration, PHYSICS_VARIANTS, disk_from_cosines
from .splats import make_splats


@dataclass(frozen=True)
class Crater:
    x: float
    y: float
    radius: float
    depth: float
    rim: float


@dataclass(eq=False)
class Heightfield:
    """Elevations and albedo sampled on an ``(N, N)`` grid; row index runs along y."""

    size: float
    heights: np.ndarray
    albedo: np.ndarray
    craters: list = field(default_factory=list)
    base_albedo: float = 0.3

    def __post_init__(self):
        if self.heights.ndim != 2 or min(self.heights.shape) < 2:
            raise ValidationError("heightfield grid must be at least 2x2")
        if self.heights.shape != self.albedo.shape:
            raise ValidationError("albedo grid must match the height grid")
        if not np.all(np.isfinite(self.heights)):
            raise ValidationError("elevations must be finite")
        if np.any(self.albedo <= 0) or np.any(self.albedo > 1):
            raise ValidationError("albedo must lie in (0, 1]")

    @property
    def n(self):
        return self.heights.shape[0]

    @property
    def spacing(self):
        return self.size / (self.n - 1)

    def coords(self):
        return np.linspace(-self.size / 2, self.size / 2, self.n)

    def _cell(self, x, y):
        gx = (np.asarray(x) + self.size / 2) / self.spacing
        gy = (np.asarray(y) + self.size / 2) / self.spacing
        j = np.clip(np.floor(gx).astype(np.int64), 0, self.n - 2)
        i = np.clip(np.floor(gy).astype(np.int64), 0, self.n - 2)
        return i, j, gx - j, gy - i

    def _bilinear(self, grid, x, y):
        i, j, fx, fy = self._cell(x, y)
        a, b = grid[i, j], grid[i, j + 1]
        c, d = grid[i + 1, j], grid[i + 1, j + 1]
        val = a * (1 - fx) * (1 - fy) + b * fx * (1 - fy) + c * (1 - fx) * fy + d * fx * fy
        gx = ((b - a) * (1 - fy) + (d - c) * fy) / self.spacing
        gy = ((c - a) * (1 - fx) + (d - b) * fx) / self.spacing
        return val, gx, gy

    def height(self, x, y):
        return self._bilinear(self.heights, x, y)[0]

    def normal(self, x, y):
        """Analytic unit normal ``(-h_x, -h_y, 1) / norm`` of the bilinear surface."""
        _, hx, hy = self._bilinear(self.heights, x, y)
        n = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def albedo_at(self, x, y):
        return self._bilinear(self.albedo, x, y)[0]

    def inside(self, x, y):
        h = self.size / 2
        return (np.abs(x) <= h) & (np.abs(y) <= h)


def crater_profile(rho, depth, rim, rim_width=0.35):
    """Bowl inside ``rho < 1`` meeting a Gaussian rim wall with matching slope at ``rho = 1``."""
    rho = np.asarray(rho, dtype=np.float64)
    inner = -depth + (depth + rim) * (1.0 - (1.0 - rho**2) ** 2)
    outer = rim * np.exp(-(((rho - 1.0) / rim_width) ** 2))
    return np.where(rho < 1.0, inner, outer)


def make_terrain(n_craters=6, radius_range=(4.0, 10.0), depth_ratio=(0.15, 0.25),
                 rim_ratio=(0.04, 0.08), n_spots=8, spot_radius=(3.0, 9.0),
                 spot_strength=(-0.35, 0.35), base_albedo=0.3, size=64.0, resolution=129,
                 seed=0) -> Heightfield:
    """Flat base plane with crater bowls and multiplicative albedo spots."""
    for lo, hi in (radius_range, depth_ratio, spot_radius):
        if lo <= 0 or hi < lo:
            raise ValidationError("terrain ranges must be positive and ordered")
    rng = np.random.default_rng(seed)
    xs = np.linspace(-size / 2, size / 2, resolution)
    X, Y = np.meshgrid(xs, xs)
    Z = np.zeros_like(X)
    craters = []
    for _ in range(n_craters):
        r = rng.uniform(*radius_range)
        cx, cy = rng.uniform(-size / 2 + r, size / 2 - r, size=2)
        c = Crater(cx, cy, r, r * rng.uniform(*depth_ratio), r * rng.uniform(*rim_ratio))
        craters.append(c)
        Z += crater_profile(np.hypot(X - cx, Y - cy) / r, c.depth, c.rim)
    A = np.full_like(X, base_albedo)
    for _ in range(n_spots):
        r = rng.uniform(*spot_radius)
        cx, cy = rng.uniform(-size / 2, size / 2, size=2)
        A *= 1.0 + rng.uniform(*spot_strength) * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / r**2)
    return Heightfield(size, Z, np.clip(A, 1e-3, 1.0), craters, base_albedo)


# ---------------------------------------------------------------- ray casting

def intersect_rays(h: Heightfield, origin, dirs, step_fraction=0.25, tol=None):
    """First intersection of rays with the surface.

    ``origin`` is (3,) or (..., 3), ``dirs`` (..., 3) unit vectors.  Returns
    ``(t, hit)``; ``t`` is ``inf`` where the ray misses the patch.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    shape = dirs.shape[:-1]
    d = dirs.reshape(-1, 3)
    o = np.broadcast_to(np.asarray(origin, dtype=np.float64), dirs.shape).reshape(-1, 3)
    tol = 1e-6 * h.size if tol is None else tol
    zlo, zhi = h.heights.min() - 1e-9, h.heights.max() + 1e-9
    half = h.size / 2

    # clip each ray to the bounding box of the patch
    lo = np.array([-half, -half, zlo])
    hi = np.array([half, half, zhi])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_a = (lo - o) * inv
        t_b = (hi - o) * inv
    t_near = np.where(np.isnan(t_a), -np.inf, np.minimum(t_a, t_b))
    t_far = np.where(np.isnan(t_b), np.inf, np.maximum(t_a, t_b))
    # a ray parallel to a slab lies inside it only if its origin does
    par = d == 0
    inside_slab = (o >= lo) & (o <= hi)
    t_near = np.where(par, np.where(inside_slab, -np.inf, np.inf), t_near)
    t_far = np.where(par, np.where(inside_slab, np.inf, -np.inf), t_far)
    t0 = np.maximum(t_near.max(axis=1), 0.0)
    t1 = t_far.min(axis=1)

    t_hit = np.full(len(d), np.inf)
    active = np.flatnonzero(t1 > t0)
    ds = step_fraction * h.spacing
    t_prev = t0[active]

    def f(idx, t):
        p = o[idx] + t[:, None] * d[idx]
        return p[:, 2] - h.height(p[:, 0], p[:, 1])

    f_prev = f(active, t_prev)
    done = f_prev <= 0  # origin already under the surface at the entry point
    t_hit[active[done]] = t_prev[done]
    active, t_prev, f_prev = active[~done], t_prev[~done], f_prev[~done]
    lo_t = np.empty(0)
    hi_t = np.empty(0)
    found = []
    while len(active):
        t_next = np.minimum(t_prev + ds, t1[active])
        f_next = f(active, t_next)
        crossed = f_next <= 0
        if np.any(crossed):
            found.append((active[crossed], t_prev[crossed], t_next[crossed]))
        alive = ~crossed & (t_next < t1[active])
        active, t_prev, f_prev = active[alive], t_next[alive], f_next[alive]
    if found:
        idx = np.concatenate([a for a, _, _ in found])
        lo_t = np.concatenate([b for _, b, _ in found])
        hi_t = np.concatenate([c for _, _, c in found])
        while np.max(hi_t - lo_t) > tol:
            mid = 0.5 * (lo_t + hi_t)
            below = f(idx, mid) <= 0
            hi_t = np.where(below, mid, hi_t)
            lo_t = np.where(below, lo_t, mid)
        t_hit[idx] = hi_t
    t_hit = t_hit.reshape(shape)
    return t_hit, np.isfinite(t_hit)


@dataclass
class OracleImage:
    intensity: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    points: np.ndarray
    hit: np.ndarray


def oracle_render(h: Heightfield, cam: CameraModel, sun, variant="lambert", scale=1.0,
                  bias=0.0, shadows=False) -> OracleImage:
    """Ray-trace the terrain: ``intensity = scale * albedo * disk + bias`` on hits, 0 elsewhere.

    ``depth`` is the camera-frame z of the hit (-1 on misses); ``normal`` and
    ``albedo`` are zero on misses.
    """
    if variant not in PHYSICS_VARIANTS:
        raise ValidationError(f"oracle renders physical variants only, not {variant!r}")
    sun = np.asarray(sun, dtype=np.float64)
    sun = sun / np.linalg.norm(sun)
    dirs = cam.rays()
    origin = cam.center
    t, hit = intersect_rays(h, origin, dirs)
    H, W = hit.shape
    pts = np.zeros((H, W, 3))
    pts[hit] = origin + t[hit][:, None] * dirs[hit]
    normal = np.zeros((H, W, 3))
    albedo = np.zeros((H, W))
    intensity = np.zeros((H, W))
    depth = np.full((H, W), -1.0)
    if np.any(hit):
        P = pts[hit]
        n = h.normal(P[:, 0], P[:, 1])
        e = -dirs[hit]
        mu0 = n @ sun
        mu = np.sum(n * e, axis=-1)
        d = disk_from_cosines(variant, mu0, mu, e @ sun)
        if shadows:
            lit = ~intersect_rays(h, P + n * (1e-4 * h.size), np.broadcast_to(sun, P.shape))[1]
            d = d * lit
        a = h.albedo_at(P[:, 0], P[:, 1])
        normal[hit] = n
        albedo[hit] = a
        intensity[hit] = scale * a * d + bias
        depth[hit] = cam.to_camera(P)[:, 2]
    return OracleImage(intensity, depth, normal, albedo, pts, hit)


# ---------------------------------------------------------------- datasets

def _sun_for(rng, view_dir, min_elevation, phase_range, tries=10000):
    """Random unit sun vector above ``min_elevation`` with phase angle in ``phase_range``."""
    for _ in range(tries):
        el = np.radians(rng.uniform(min_elevation, 89.0))
        az = rng.uniform(0, 2 * np.pi)
        s = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        ph = np.degrees(np.arccos(np.clip(s @ view_dir, -1, 1)))
        if phase_range[0] <= ph <= phase_range[1]:
            return s
    raise ValidationError("no sun direction satisfies the elevation and phase constraints")


def make_dataset(h: Heightfield, n_views=22, n_test=2, variant="lambert", seed=0, width=128,
                 height=128, focal=384.0, altitude=120.0, off_nadir=(15.0, 35.0),
                 target_jitter=6.0, min_sun_elevation=30.0, phase_range=(20.0, 50.0),
                 scale_range=(0.85, 1.15), bias_range=(0.0, 0.02), init_spacing=1.0,
                 init_jitter=0.05, gt_stride=2, name="synthetic") -> SceneDataset:
    """Views on a ring above the patch, last ``n_test`` held out.

    Every view gets its own sun vector and exposure (scale, bias).  Images and
    ground-truth maps are quantised to 16 bits so a saved dataset reloads
    exactly.  The initial point cloud is a jittered grid on the surface
    restricted to the observed area; the ground-truth cloud holds ray hits.
    """
    if n_views < 3:
        raise ValidationError("need at least 3 views")
    if not 1 <= n_test < n_views:
        raise ValidationError("n_test must leave at least one training view")
    rng = np.random.default_rng(seed)
    views = []
    hits = []
    for k in range(n_views):
        az = 2 * np.pi * k / n_views + rng.uniform(-0.1, 0.1)
        tilt = np.radians(rng.uniform(*off_nadir))
        target = np.append(rng.uniform(-target_jitter, target_jitter, size=2), 0.0)
        offset = altitude * np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az),
                                      np.cos(tilt)])
        cam = look_at(target + offset, target, np.array([0.0, 0.0, 1.0]), focal, focal,
                      width, height)
        sun = _sun_for(rng, offset / np.linalg.norm(offset), min_sun_elevation, phase_range)
        scale = rng.uniform(*scale_range)
        bias = rng.uniform(*bias_range)
        img = oracle_render(h, cam, sun, variant, scale, bias)
        split = "test" if k >= n_views - n_test else "train"
        views.append(ViewContext(f"{k:05d}", cam, sun, quantize16(img.intensity), split,
                                 ImageCalibration(), quantize_normals(img.normal),
                                 quantize16(img.albedo)))
        views[-1].true_calibration = ImageCalibration(scale, bias)
        hits.append(img.points[::gt_stride, ::gt_stride][img.hit[::gt_stride, ::gt_stride]])
    gt_points = np.concatenate(hits)
    lo, hi = gt_points[:, :2].min(axis=0), gt_points[:, :2].max(axis=0)
    gx = np.arange(lo[0], hi[0] + 1e-9, init_spacing)
    gy = np.arange(lo[1], hi[1] + 1e-9, init_spacing)
    X, Y = np.meshgrid(gx, gy)
    X = X.ravel() + rng.uniform(-0.25, 0.25, X.size) * init_spacing
    Y = Y.ravel() + rng.uniform(-0.25, 0.25, Y.size) * init_spacing
    keep = h.inside(X, Y) & _observed(views, np.stack([X, Y, h.height(X, Y)], axis=1))
    X, Y = X[keep], Y[keep]
    Z = h.height(X, Y) + rng.normal(0.0, init_jitter, X.size)
    init = np.stack([X, Y, Z], axis=1)
    return SceneDataset(views, init, gt_points, name=name, units="m")


def _observed(views, pts):
    seen = np.zeros(len(pts), dtype=bool)
    for v in views:
        c = v.camera
        xc = c.to_camera(pts)
        z = np.where(xc[:, 2] > 0, xc[:, 2], 1.0)
        u = c.fx * xc[:, 0] / z + c.cx
        w = c.fy * xc[:, 1] / z + c.cy
        seen |= (xc[:, 2] > 0) & (u >= -0.5) & (u <= c.width - 0.5) & (w >= -0.5) & (w <= c.height - 0.5)
    return seen


def default_scene(variant="lambert", seed=0):
    """The 128x128 px, 64 m patch, 6 crater, 20 + 2 view acceptance scene."""
    terrain = make_terrain(seed=seed)
    return terrain, make_dataset(terrain, n_views=22, n_test=2, variant=variant, seed=seed)


# ---------------------------------------------------------------- sphere cap

def sphere_cap_points(radius=1.0, half_angle=np.radians(60.0), count=20000, seed=0):
    """Area-uniform samples of the cap ``|x| = radius, z >= radius cos(half_angle)``."""
    rng = np.random.default_rng(seed)
    cz = rng.uniform(np.cos(half_angle), 1.0, count)
    phi = rng.uniform(0, 2 * np.pi, count)
    sz = np.sqrt(1.0 - cz**2)
    return radius * np.stack([sz * np.cos(phi), sz * np.sin(phi), cz], axis=1)


def sphere_cap_splats(radius=1.0, half_angle=np.radians(60.0), spacing=0.02, variant="lambert",
                      opacity=0.99, inset=None):
    """Tangent disks on a Fibonacci lattice covering the cap, ``sigma = spacing``.

    Centres stop ``inset`` (default one spacing) short of the rim so that the
    opaque part of the outermost disks ends near the true boundary.
    """
    inset = spacing if inset is None else inset
    inner = half_angle - inset / radius
    area = 2 * np.pi * radius**2 * (1 - np.cos(inner))
    count = int(np.ceil(area / spacing**2))
    k = np.arange(count) + 0.5
    cz = 1.0 - (1.0 - np.cos(inner)) * k / count
    phi = np.pi * (1 + 5**0.5) * k
    sz = np.sqrt(1.0 - cz**2)
    n = np.stack([sz * np.cos(phi), sz * np.sin(phi), cz], axis=1)
    # passive quaternion of the frame whose third column is n
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0, 0, 1.0]], [[1.0, 0, 0]])
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(n, tu)
    quats = np.array([rotmat_to_quat(np.stack([a, b, c], axis=1)) for a, b, c in zip(tu, tv, n)])
    scales = np.full((count, 2), spacing)
    appearance = np.full(count, 0.5) if variant != "sh" else np.zeros((count, 16))
    return make_splats(variant, radius * n, scales, quats, np.full(count, opacity), appearance)


def sphere_cap_views(radius=1.0, n_views=8, distance=4.0, elevation=55.0, focal=256.0, size=128,
                     sun=(0.0, 0.0, 1.0)):
    """Cameras on a ring looking at the cap centre, plus one at the zenith."""
    target = np.array([0.0, 0.0, 0.7 * radius])
    views = []
    for k in range(n_views):
        az = 2 * np.pi * k / n_views
        el = np.radians(elevation)
        eye = target + distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                                            np.sin(el)])
        cam = look_at(eye, target, np.array([0.0, 0.0, 1.0]), focal, focal, size, size)
        views.append(ViewContext(f"{k:05d}", cam, np.asarray(sun, float)))
    eye = target + np.array([0.0, 0.0, distance])
    cam = look_at(eye, target, np.array([0.0, 1.0, 0.0]), focal, focal, size, size)
    views.append(ViewContext(f"{n_views:05d}", cam, np.asarray(sun, float)))
    return views


# ---------------------------------------------------------------- random splat scenes

def random_scene(variant="lambert", n_splats=3, size=8, seed=0, focal=None):
    """A few random splats in front of a ``size x size`` camera, for gradient and blending checks.

    Returns ``(splats, view)``; the view carries a non-trivial calibration.
    """
    rng = np.random.default_rng(seed)
    focal = 1.5 * size if focal is None else focal
    cam = look_at([0.3, 0.2, 5.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], focal, focal, size, size)
    sun = np.array([0.3, 0.2, 1.0])
    sun /= np.linalg.norm(sun)
    if variant == "sh":
        app = rng.random((n_splats, 16)) - 0.5
    else:
        app = rng.uniform(0.2, 1.0, n_splats)
    splats = make_splats(variant, rng.uniform(-0.5, 0.5, (n_splats, 3)) * [1.0, 1.0, 0.5],
                         rng.uniform(0.3, 0.8, (n_splats, 2)), rng.normal(size=(n_splats, 4)),
                         rng.uniform(0.3, 0.9, n_splats), app)
    view = ViewContext("random", cam, sun, calibration=ImageCalibration(1.1, 0.05))
    return splats, view
