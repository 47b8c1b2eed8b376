"""Compiled per-tile blending kernels (forward and backward).

Splat data arrives pre-digested by :mod:`photosplat.rasterizer`:

``geo``  (n, 17): p(3) t_u(3) t_v(3) t_w(3) s_u s_v alpha pix_x pix_y
``val``  (n, 6):  colour, albedo, normal_flipped(3), centre_depth
``box``  (n, 4):  x0 x1 y0 y1 inclusive integer pixel bounds

Each tile is handled by one iteration of a ``prange`` loop and writes only
its own pixels and its own rows of the per-pair gradient buffer, so results
do not depend on thread scheduling.
"""
import numpy as np
from numba import config, njit, prange

config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
PARALLEL_EPS = 1e-9
EPS_DEPTH = 1e-6
N_PAIR_GRAD = 23


@njit(cache=True, inline="always")
def _intersect(geo, k, ox, oy, oz, dx, dy, dz):
    # returns hit flag, t, u, v, w(3)
    qx = geo[k, 0] - ox
    qy = geo[k, 1] - oy
    qz = geo[k, 2] - oz
    den = geo[k, 9] * dx + geo[k, 10] * dy + geo[k, 11] * dz
    if abs(den) < PARALLEL_EPS:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, den
    t = (geo[k, 9] * qx + geo[k, 10] * qy + geo[k, 11] * qz) / den
    if t <= EPS_DEPTH:
        return False, t, 0.0, 0.0, 0.0, 0.0, 0.0, den
    wx = t * dx - qx
    wy = t * dy - qy
    wz = t * dz - qz
    u = (geo[k, 3] * wx + geo[k, 4] * wy + geo[k, 5] * wz) / geo[k, 12]
    v = (geo[k, 6] * wx + geo[k, 7] * wy + geo[k, 8] * wz) / geo[k, 13]
    return True, t, u, v, wx, wy, wz, den


@njit(cache=True, inline="always")
def _gauss(geo, k, px, py, hit, u, v):
    g3 = np.exp(-0.5 * (u * u + v * v)) if hit else 0.0
    ex = px - geo[k, 15]
    ey = py - geo[k, 16]
    g2 = np.exp(-(ex * ex + ey * ey))
    if g3 >= g2:
        return g3, 0
    return g2, 1


@njit(cache=True, parallel=True)
def forward(tile_start, tile_end, pair_splat, geo, val, box, origin, dirs, dzs,
            width, height, tile, tiles_x):
    intensity = np.zeros((height, width))
    accum = np.zeros((height, width))
    depth_sum = np.zeros((height, width))
    normal = np.zeros((height, width, 3))
    albedo = np.zeros((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    checksum = np.zeros((height, width))
    ox, oy, oz = origin[0], origin[1], origin[2]
    n_tiles = len(tile_start)
    for ti in prange(n_tiles):
        tx = ti % tiles_x
        ty = ti // tiles_x
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                dx, dy, dz = dirs[py, px, 0], dirs[py, px, 1], dirs[py, px, 2]
                lst = tile_start[ti]
                cs = 0.0
                for j in range(tile_start[ti], tile_end[ti]):
                    k = pair_splat[j]
                    if px < box[k, 0] or px > box[k, 1] or py < box[k, 2] or py > box[k, 3]:
                        continue
                    hit, t, u, v, wx, wy, wz, den = _intersect(geo, k, ox, oy, oz, dx, dy, dz)
                    g, branch = _gauss(geo, k, px, py, hit, u, v)
                    a = geo[k, 14] * g
                    if a < ALPHA_MIN:
                        continue
                    z = t * dzs[py, px] if branch == 0 else val[k, 5]
                    w = a * T
                    intensity[py, px] += w * val[k, 0]
                    albedo[py, px] += w * val[k, 1]
                    normal[py, px, 0] += w * val[k, 2]
                    normal[py, px, 1] += w * val[k, 3]
                    normal[py, px, 2] += w * val[k, 4]
                    depth_sum[py, px] += w * z
                    accum[py, px] += w
                    cs += (k + 1.0) * (2.0 * branch + 1.0) * (j - tile_start[ti] + 1.0)
                    T *= 1.0 - a
                    lst = j + 1
                    if T < T_MIN:
                        break
                last[py, px] = lst
                checksum[py, px] = cs
    return intensity, accum, depth_sum, normal, albedo, last, checksum


@njit(cache=True, parallel=True)
def backward(tile_start, tile_end, pair_splat, geo, val, box, origin, dirs, dzs,
             width, height, tile, tiles_x, last, g_int, g_acc, g_dep, g_nrm, g_alb):
    n_pairs = len(pair_splat)
    out = np.zeros((n_pairs, N_PAIR_GRAD))
    ox, oy, oz = origin[0], origin[1], origin[2]
    n_tiles = len(tile_start)
    for ti in prange(n_tiles):
        tx = ti % tiles_x
        ty = ti // tiles_x
        cap = tile_end[ti] - tile_start[ti]
        js = np.empty(cap, dtype=np.int64)
        As = np.empty(cap)
        Ts = np.empty(cap)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                dx, dy, dz = dirs[py, px, 0], dirs[py, px, 1], dirs[py, px, 2]
                gi = g_int[py, px]
                ga = g_acc[py, px]
                gd = g_dep[py, px]
                gn0, gn1, gn2 = g_nrm[py, px, 0], g_nrm[py, px, 1], g_nrm[py, px, 2]
                gb = g_alb[py, px]
                # replay the forward pass to recover alpha and transmittance
                m = 0
                T = 1.0
                for j in range(tile_start[ti], last[py, px]):
                    k = pair_splat[j]
                    if px < box[k, 0] or px > box[k, 1] or py < box[k, 2] or py > box[k, 3]:
                        continue
                    hit, t, u, v, wx, wy, wz, den = _intersect(geo, k, ox, oy, oz, dx, dy, dz)
                    g, branch = _gauss(geo, k, px, py, hit, u, v)
                    a = geo[k, 14] * g
                    if a < ALPHA_MIN:
                        continue
                    js[m] = j
                    As[m] = a
                    Ts[m] = T
                    T *= 1.0 - a
                    m += 1
                behind = 0.0
                for i in range(m - 1, -1, -1):
                    j = js[i]
                    k = pair_splat[j]
                    a = As[i]
                    T = Ts[i]
                    w = a * T
                    hit, t, u, v, wx, wy, wz, den = _intersect(geo, k, ox, oy, oz, dx, dy, dz)
                    g, branch = _gauss(geo, k, px, py, hit, u, v)
                    z = t * dzs[py, px] if branch == 0 else val[k, 5]
                    f = (gi * val[k, 0] + ga + gd * z + gn0 * val[k, 2] + gn1 * val[k, 3]
                         + gn2 * val[k, 4] + gb * val[k, 1])
                    d_a = T * (f - behind)
                    behind = a * f + (1.0 - a) * behind
                    r = out[j]
                    r[17] += gi * w
                    r[18] += gb * w
                    r[19] += gn0 * w
                    r[20] += gn1 * w
                    r[21] += gn2 * w
                    alpha = geo[k, 14]
                    r[16] += d_a * g
                    d_g = d_a * alpha
                    if branch == 0:
                        su = geo[k, 12]
                        sv = geo[k, 13]
                        du = -u * g * d_g / su
                        dv = -v * g * d_g / sv
                        r[12] += -du * u
                        r[13] += -dv * v
                        # grads wrt t_u and t_v
                        r[3] += du * wx
                        r[4] += du * wy
                        r[5] += du * wz
                        r[6] += dv * wx
                        r[7] += dv * wy
                        r[8] += dv * wz
                        gwx = du * geo[k, 3] + dv * geo[k, 6]
                        gwy = du * geo[k, 4] + dv * geo[k, 7]
                        gwz = du * geo[k, 5] + dv * geo[k, 8]
                        gt = gwx * dx + gwy * dy + gwz * dz + gd * w * dzs[py, px]
                        # w = t d - q ; t = (t_w . q) / (t_w . d)
                        gqx = -gwx + gt * geo[k, 9] / den
                        gqy = -gwy + gt * geo[k, 10] / den
                        gqz = -gwz + gt * geo[k, 11] / den
                        r[0] += gqx
                        r[1] += gqy
                        r[2] += gqz
                        r[9] += -gt * wx / den
                        r[10] += -gt * wy / den
                        r[11] += -gt * wz / den
                    else:
                        ex = px - geo[k, 15]
                        ey = py - geo[k, 16]
                        r[14] += d_g * 2.0 * ex * g
                        r[15] += d_g * 2.0 * ey * g
                        r[22] += gd * w
    return out
