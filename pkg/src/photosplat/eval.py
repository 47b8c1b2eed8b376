"""Image and geometry metrics, TSDF mesh extraction and ICP alignment."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateFit, DegenerateGeometry, EmptyMask, EmptySet, EmptyVolume, ShapeMismatch
from .losses import ssim as _ssim
from .rasterizer import render

BRUTE_FORCE_LIMIT = 10_000
GRAZING_COS = 0.3  # depth samples seen more obliquely than ~72.5 deg are not fused


# ---------------------------------------------------------------- image metrics

def psnr(a, b, peak=1.0):
    """``10 log10(peak^2 / MSE)``; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak**2 / mse)


def ssim(a, b):
    return _ssim(a, b)


def _check_mask(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeMismatch(f"mask {mask.shape} vs map {shape}")
    if not mask.any():
        raise EmptyMask("no valid pixels")
    return mask


def normal_error(n_pred, n_true, mask):
    """Mean angle in degrees between two unit normal maps over ``mask``."""
    n_pred = np.asarray(n_pred, dtype=np.float64)
    n_true = np.asarray(n_true, dtype=np.float64)
    if n_pred.shape != n_true.shape:
        raise ShapeMismatch(f"{n_pred.shape} vs {n_true.shape}")
    mask = _check_mask(mask, n_pred.shape[:-1])
    c = np.clip(np.sum(n_pred[mask] * n_true[mask], axis=-1), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(c))))


def affine_fit(x, y):
    """Least-squares ``(scale, offset)`` with ``scale x + offset ~ y``.

    Falls back to offset only (with a :class:`DegenerateFit` warning) when ``x``
    is constant.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    xm, ym = x.mean(), y.mean()
    var = np.sum((x - xm) ** 2)
    if var <= 1e-24 * max(1.0, np.sum(x**2)):
        warnings.warn("prediction is constant; fitting an offset only", DegenerateFit)
        return 0.0, float(ym)
    s = float(np.sum((x - xm) * (y - ym)) / var)
    return s, float(ym - s * xm)


def albedo_error(a_pred, a_true, mask):
    """Mean ``|a - fit(a_pred)| / a`` after an affine least-squares fit over ``mask``."""
    a_pred = np.asarray(a_pred, dtype=np.float64)
    a_true = np.asarray(a_true, dtype=np.float64)
    if a_pred.shape != a_true.shape:
        raise ShapeMismatch(f"{a_pred.shape} vs {a_true.shape}")
    mask = _check_mask(mask, a_pred.shape)
    x, y = a_pred[mask], a_true[mask]
    s, o = affine_fit(x, y)
    return float(np.mean(np.abs(y - (s * x + o)) / y))


# ---------------------------------------------------------------- per-view evaluation

@dataclass
class SplitMetrics:
    psnr: float | None = None
    psnr_infinite: bool = False
    ssim: float | None = None
    normal_error_deg: float | None = None
    albedo_error: float | None = None
    views: int = 0
    valid_pixels: int = 0


@dataclass
class MetricReport:
    variant: str
    train: SplitMetrics = field(default_factory=SplitMetrics)
    test: SplitMetrics = field(default_factory=SplitMetrics)
    hausdorff: float | None = None
    per_view: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        for split in ("train", "test"):
            if d[split]["psnr_infinite"]:
                d[split]["psnr"] = None
        for row in d["per_view"]:
            if "psnr" in row and not np.isfinite(row["psnr"]):
                row["psnr"] = None
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, allow_nan=False)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path):
        cols = ["psnr", "ssim", "normal_error_deg", "albedo_error", "views", "valid_pixels"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split"] + cols + ["hausdorff"])
            for split in ("train", "test"):
                m = getattr(self, split)
                vals = ["inf" if c == "psnr" and m.psnr_infinite else
                        ("--" if getattr(m, c) is None else getattr(m, c)) for c in cols]
                w.writerow([split] + vals + ["--" if self.hausdorff is None else self.hausdorff])

    def format(self):
        def cell(c, fmt):
            a, b = getattr(self.train, c), getattr(self.test, c)
            return "/".join("--" if v is None else fmt % v for v in (a, b))
        lines = [f"variant     {self.variant}",
                 f"PSNR        {cell('psnr', '%.2f')}",
                 f"SSIM        {cell('ssim', '%.3f')}",
                 f"normal err  {cell('normal_error_deg', '%.2f')}",
                 f"albedo err  {cell('albedo_error', '%.4f')}"]
        if self.hausdorff is not None:
            lines.append(f"Hausdorff   {self.hausdorff:.5f}")
        return "\n".join(lines)


def fit_calibration(raw, image, mask=None):
    """Least-squares per-image ``(scale, bias)`` mapping ``raw`` to ``image``."""
    mask = np.ones(raw.shape, bool) if mask is None else mask
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateFit)
        s, b = affine_fit(raw[mask], image[mask])
    return (s if s > 0 else 1.0), b


def evaluate_view(splats, view, fit=False, accum_min=0.5):
    """Metrics of one view.  With ``fit`` the view's calibration is refitted first."""
    bundle = render(splats, view, keep_tape=False)
    out = {"name": view.name, "split": view.split}
    if view.image is not None:
        pred = bundle.intensity
        if fit:
            s, b = fit_calibration(bundle.raw_intensity, view.image)
            pred = s * bundle.raw_intensity + b
            out["fitted_scale"], out["fitted_bias"] = s, b
        out["psnr"] = psnr(pred, view.image)
        out["ssim"] = ssim(pred, view.image)
    if view.gt_mask is not None:
        mask = (bundle.accumulation > accum_min) & view.gt_mask
        out["valid_pixels"] = int(mask.sum())
        if mask.any():
            if view.gt_normal is not None:
                n = bundle.normal / np.maximum(np.linalg.norm(bundle.normal, axis=-1, keepdims=True),
                                               1e-12)
                out["normal_error_deg"] = normal_error(n, view.gt_normal, mask)
                out["normal_weight"] = int(mask.sum())
            if bundle.albedo is not None:
                # the blended map itself, not divided by accumulation: a model may carry
                # albedo contrast in opacity as well as in its per-splat albedo
                out["albedo_error"] = albedo_error(bundle.albedo, view.gt_albedo, mask)
    return out


def evaluate(splats, dataset, calibration=None, hausdorff=None) -> MetricReport:
    """Metrics over both splits.

    Train views use the learned calibration ``(m, 2)`` when given; test views
    always get a least-squares fitted scale and bias since the model never saw
    them.  PSNR and SSIM are per-view means; normal and albedo errors average
    over views weighted by valid pixel count.
    """
    rep = MetricReport(splats.variant, hausdorff=hausdorff)
    for split in ("train", "test"):
        rows = []
        for i, v in enumerate(dataset.views):
            if v.split != split:
                continue
            if split == "train" and calibration is not None:
                v = v.with_calibration(*calibration[i])
            rows.append(evaluate_view(splats, v, fit=(split == "test")))
        rep.per_view.extend(rows)
        m = getattr(rep, split)
        m.views = len(rows)
        if not rows:
            continue
        if "psnr" in rows[0]:
            m.psnr = float(np.mean([r["psnr"] for r in rows]))
            m.psnr_infinite = not np.isfinite(m.psnr)
            m.ssim = float(np.mean([r["ssim"] for r in rows]))
        m.valid_pixels = int(sum(r.get("valid_pixels", 0) for r in rows))
        for key in ("normal_error_deg", "albedo_error"):
            pairs = [(r[key], r["valid_pixels"]) for r in rows if key in r]
            if pairs:
                vals, wts = zip(*pairs)
                setattr(m, key, float(np.average(vals, weights=wts)))
    return rep


# ---------------------------------------------------------------- geometry

def hausdorff(a, b):
    """Symmetric Hausdorff distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("Hausdorff distance of an empty set")
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


def hausdorff_normalized(points, truth):
    """Hausdorff distance divided by the bounding-box diagonal of ``truth``."""
    truth = np.asarray(truth, dtype=np.float64)
    if len(truth) == 0:
        raise EmptySet("empty ground-truth set")
    diag = float(np.linalg.norm(truth.max(axis=0) - truth.min(axis=0)))
    if diag == 0.0:
        raise DegenerateGeometry("ground-truth set has zero extent")
    return hausdorff(points, truth) / diag


def _check_spread(p, name):
    if len(p) < 3:
        raise DegenerateGeometry(f"{name}: need at least 3 points")
    sv = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-10 * max(sv[0], 1e-300):
        raise DegenerateGeometry(f"{name}: points are collinear")


def kabsch(src, dst):
    """Rigid ``(R, t)`` minimising ``sum |R src + t - dst|^2``."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    U, _, Vt = np.linalg.svd((src - cs).T @ (dst - cd))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def _nearest(src, dst, tree):
    if tree is not None:
        return tree.query(src)[1]
    idx = np.empty(len(src), dtype=np.int64)
    for k in range(0, len(src), 2048):
        block = src[k:k + 2048]
        d2 = np.sum(block**2, axis=1)[:, None] - 2 * block @ dst.T + np.sum(dst**2, axis=1)[None]
        idx[k:k + 2048] = np.argmin(d2, axis=1)
    return idx


@dataclass
class Alignment:
    R: np.ndarray
    t: np.ndarray
    rms: float
    iterations: int

    def apply(self, x):
        return np.asarray(x) @ self.R.T + self.t


def align_icp(source, target, max_iters=50, tol=1e-10, init="centroid"):
    """Point-to-point ICP moving ``source`` onto ``target``.

    Starts from centroid alignment with identity rotation.  Stops when the RMS
    residual changes by less than ``tol`` or after ``max_iters`` iterations.
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    _check_spread(src, "source")
    _check_spread(dst, "target")
    R = np.eye(3)
    t = dst.mean(axis=0) - src.mean(axis=0) if init == "centroid" else np.zeros(3)
    big = len(src) * len(dst) > BRUTE_FORCE_LIMIT**2 or max(len(src), len(dst)) > BRUTE_FORCE_LIMIT
    tree = cKDTree(dst) if big else None
    prev = np.inf
    rms = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        moved = src @ R.T + t
        match = dst[_nearest(moved, dst, tree)]
        dR, dt = kabsch(moved, match)
        R, t = dR @ R, dR @ t + dt
        rms = float(np.sqrt(np.mean(np.sum((src @ R.T + t - match) ** 2, axis=1))))
        if abs(prev - rms) < tol:
            break
        prev = rms
    return Alignment(R, t, rms, it)


# ---------------------------------------------------------------- mesh extraction

@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray


def extract_mesh(splats, views, voxel=None, trunc=None, accum_min=0.5, bounds=None,
                 resolution=256) -> Mesh:
    """TSDF fusion of rendered depth maps followed by marching cubes.

    The volume spans the back-projected depth samples padded by the
    truncation distance; ``voxel`` defaults to its diagonal / ``resolution``
    and ``trunc`` to four voxels.  Samples are weighted by accumulation times
    the cosine of incidence; those steeper than ``GRAZING_COS`` are dropped,
    since a pixel-sized error in where a ray lands becomes a large depth error
    there.  Only fully observed voxel cubes take part in the isosurface.
    """
    from skimage.measure import marching_cubes

    if not views:
        raise EmptyVolume("no views to fuse")
    maps = []
    samples = []
    for v in views:
        b = render(splats, v, keep_tape=False)
        ok = (b.accumulation >= accum_min) & (b.depth > 0)
        # confidence: accumulation times the cosine between ray and blended normal
        n = b.normal / np.maximum(np.linalg.norm(b.normal, axis=-1, keepdims=True), 1e-12)
        cos = np.abs(np.sum(n * v.camera.rays(), axis=-1))
        ok &= cos >= GRAZING_COS
        maps.append((v.camera, b.depth, b.accumulation * cos, ok))
        if ok.any():
            rays = v.camera.rays()[ok]
            # depth is camera z, rays are unit: scale by z / (ray . boresight)
            dz = rays @ v.camera.R[2]
            samples.append(v.camera.center + rays * (b.depth[ok] / dz)[:, None])
    if not samples:
        raise EmptyVolume("no depth samples to integrate")
    pts = np.concatenate(samples)
    if bounds is None:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
    else:
        lo, hi = (np.asarray(x, dtype=np.float64) for x in bounds)
    diag = float(np.linalg.norm(hi - lo))
    voxel = diag / resolution if voxel is None else float(voxel)
    trunc = 4.0 * voxel if trunc is None else float(trunc)
    if voxel <= 0 or trunc < 2 * voxel:
        raise EmptyVolume("voxel must be positive and trunc at least two voxels")
    lo = lo - trunc
    hi = hi + trunc
    dims = np.maximum(np.ceil((hi - lo) / voxel).astype(int) + 1, 2)
    axes = [lo[k] + voxel * np.arange(dims[k]) for k in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    centres = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    tsdf = np.zeros(len(centres))
    weight = np.zeros(len(centres))
    for cam, depth, acc, ok in maps:
        xc = cam.to_camera(centres)
        z = xc[:, 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        u = np.rint(cam.fx * xc[:, 0] / zs + cam.cx).astype(np.int64)
        w = np.rint(cam.fy * xc[:, 1] / zs + cam.cy).astype(np.int64)
        inside = front & (u >= 0) & (u < cam.width) & (w >= 0) & (w < cam.height)
        idx = np.flatnonzero(inside)
        uu, ww = u[idx], w[idx]
        good = ok[ww, uu]
        idx, uu, ww = idx[good], uu[good], ww[good]
        sdf = depth[ww, uu] - z[idx]
        keep = sdf > -trunc
        idx, uu, ww, sdf = idx[keep], uu[keep], ww[keep], sdf[keep]
        wt = acc[ww, uu]
        val = np.minimum(sdf / trunc, 1.0)
        tsdf[idx] = (tsdf[idx] * weight[idx] + val * wt) / (weight[idx] + wt)
        weight[idx] += wt
    if not np.any(weight > 0):
        raise EmptyVolume("no voxel received a depth sample")
    vol = tsdf.reshape(dims)
    observed = weight.reshape(dims) > 0
    if vol[observed].min() > 0 or vol[observed].max() < 0:
        raise EmptyVolume("fused volume has no zero crossing")
    # keep triangles whose generating cube has all eight corners observed
    cubes = np.zeros_like(observed)
    cubes[:-1, :-1, :-1] = True
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                cubes[:-1, :-1, :-1] &= observed[dx:dims[0] - 1 + dx, dy:dims[1] - 1 + dy,
                                                 dz:dims[2] - 1 + dz]
    if not cubes.any():
        raise EmptyVolume("no fully observed voxel cube")
    verts, faces, normals, _ = marching_cubes(vol, level=0.0, spacing=(voxel,) * 3)
    cell = np.floor(verts[faces].mean(axis=1) / voxel).astype(np.int64)
    cell = np.clip(cell, 0, dims - 1)
    faces = faces[cubes[cell[:, 0], cell[:, 1], cell[:, 2]]]
    if len(faces) == 0:
        raise EmptyVolume("isosurface lies outside the observed region")
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts, normals, faces = verts[used], normals[used], remap[faces]
    return Mesh(verts + lo, faces.astype(np.int64), normals)
