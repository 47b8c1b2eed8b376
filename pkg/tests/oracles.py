"""Independent reference implementations shared by the unit and acceptance tests.

These are deliberately slow and literal: per-pixel loops, scipy filters and
dense distance matrices, so they share as little code as possible with the
package itself.
"""
import math

import numpy as np
from scipy.ndimage import gaussian_filter

from photosplat.geometry import look_at, pixel_ray, project_points
from photosplat.io import ViewContext
from photosplat.rasterizer import INVALID_DEPTH
from photosplat.reflectance import ImageCalibration, splat_intensity
from photosplat.splats import make_splats

SUN = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])
VARIANTS = ["sh", "lambert", "lommel_seeliger", "lunar_lambert"]


def view(size=16, f=None, cal=(1.0, 0.0), eye=(0.2, -0.1, 5.0)):
    cam = look_at(eye, [0, 0, 0], [0, 1, 0], f or 1.5 * size, f or 1.5 * size, size, size)
    return ViewContext("v", cam, SUN, calibration=ImageCalibration(*cal))


def random_splats(rng, n, variant="lambert", spread=1.0):
    app = rng.normal(size=(n, 16)) * 0.3 if variant == "sh" else rng.uniform(0.2, 1, n)
    means = rng.uniform(-spread, spread, (n, 3)) * [1, 1, 0.5]
    return make_splats(variant, means, rng.uniform(0.1, 0.5, (n, 2)), rng.normal(size=(n, 4)),
                       rng.uniform(0.05, 0.99, n), app)


def brute_force(splats, v):
    """Per-pixel loop over every splat; no boxes, tiles or vectorisation.

    Ray/plane hits are worked out here in scalar arithmetic rather than through
    the package's ``intersect``; only per-splat quantities (frames, shading) are
    computed once up front.
    """
    cam = v.camera
    H, W = cam.height, cam.width
    out = {k: np.zeros((H, W)) for k in ("intensity", "accumulation", "depth", "albedo")}
    out["normal"] = np.zeros((H, W, 3))
    out["product"] = np.ones((H, W))
    albedo = None if splats.variant == "sh" else splats.albedo
    feats = splats.appearance()
    centre_pix, centre_z, _ = project_points(cam, splats.means)
    order = [k for k in sorted(range(len(splats)), key=lambda k: (centre_z[k], k))
             if centre_z[k] > 1e-6]
    per = {}
    for k in order:
        R = splats.frame(k).rotation
        p = splats.means[k]
        e = cam.center - p
        n = R[:, 2] if R[:, 2] @ e >= 0 else -R[:, 2]
        c = splat_intensity(splats.variant, feats[k], n, v.sun, e / np.linalg.norm(e))
        per[k] = (R.T.tolist(), p.tolist(), splats.scales[k].tolist(), n, c,
                  float(splats.opacities[k]))
    Rc = cam.R[2].tolist()
    tc = float(cam.t[2])
    for y in range(H):
        for x in range(W):
            o, d = pixel_ray(cam, [x, y])
            o, d = o.tolist(), d.tolist()
            T = 1.0
            dsum = 0.0
            for k in order:
                (tu, tv, tw), p, (su, sv), n, c, opa = per[k]
                q = [p[i] - o[i] for i in range(3)]
                den = sum(tw[i] * d[i] for i in range(3))
                g3 = z3 = 0.0
                if abs(den) >= 1e-9:
                    t = sum(tw[i] * q[i] for i in range(3)) / den
                    if t > 1e-6:
                        w = [t * d[i] - q[i] for i in range(3)]
                        u = sum(tu[i] * w[i] for i in range(3)) / su
                        vv = sum(tv[i] * w[i] for i in range(3)) / sv
                        g3 = math.exp(-0.5 * (u * u + vv * vv))
                        z3 = sum(Rc[i] * (o[i] + t * d[i]) for i in range(3)) + tc
                g2 = math.exp(-((x - centre_pix[k, 0]) ** 2 + (y - centre_pix[k, 1]) ** 2))
                g, z = (g3, z3) if g3 >= g2 else (g2, centre_z[k])
                a = opa * g
                if a < 1.0 / 255.0:
                    continue
                wt = a * T
                out["intensity"][y, x] += wt * c
                out["accumulation"][y, x] += wt
                out["normal"][y, x] += wt * n
                dsum += wt * z
                if albedo is not None:
                    out["albedo"][y, x] += wt * albedo[k]
                out["product"][y, x] *= 1 - a
                T *= 1 - a
                if T < 1e-4:
                    break
            acc = out["accumulation"][y, x]
            out["depth"][y, x] = dsum / acc if acc > 0 else INVALID_DEPTH
    cal = v.calibration
    out["intensity"] = cal.scale * out["intensity"] + cal.bias
    return out


# ---------------------------------------------------------------- metrics

def psnr_oracle(a, b):
    se = 0.0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        se += (float(x) - float(y)) ** 2
    mse = se / np.size(a)
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def ssim_map_oracle(x, y, c1=0.01**2, c2=0.03**2):
    f = lambda a: gaussian_filter(a, 1.5, mode="reflect", truncate=3.5)  # 11 taps
    mx, my = f(x), f(y)
    sxx, syy, sxy = f(x * x) - mx**2, f(y * y) - my**2, f(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))


def normal_error_oracle(n, m, mask):
    angles = []
    for i, j in zip(*np.nonzero(mask)):
        c = sum(float(n[i, j, k]) * float(m[i, j, k]) for k in range(3))
        angles.append(math.degrees(math.acos(max(-1.0, min(1.0, c)))))
    return sum(angles) / len(angles)


def albedo_error_oracle(pred, true, mask):
    x, y = pred[mask], true[mask]
    A = np.stack([x, np.ones_like(x)], axis=1)
    s, o = np.linalg.lstsq(A, y, rcond=None)[0]
    return float(np.mean(np.abs(y - (s * x + o)) / y))


def hausdorff_normalized_oracle(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    h = max(d.min(axis=1).max(), d.min(axis=0).max())
    return h / math.sqrt(sum((b[:, k].max() - b[:, k].min()) ** 2 for k in range(3)))
