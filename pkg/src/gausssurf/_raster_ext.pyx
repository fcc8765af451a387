# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled compositing kernels; same contract as ``_raster_py``."""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp

NAME = "cython"


cdef inline void _tile_bounds(long tile, long width, long height, long tile_size,
                              long* x0, long* y0, long* x1, long* y1) noexcept nogil:
    cdef long tiles_x = (width + tile_size - 1) // tile_size
    cdef long ty = tile // tiles_x
    cdef long tx = tile - ty * tiles_x
    x0[0] = tx * tile_size
    y0[0] = ty * tile_size
    x1[0] = x0[0] + tile_size
    y1[0] = y0[0] + tile_size
    if x1[0] > width:
        x1[0] = width
    if y1[0] > height:
        y1[0] = height


cdef inline double _ray_depth(long g, double u, double v, const double[:, ::1] depths) noexcept nogil:
    cdef double den = (depths[g, 4] * u * u + 2.0 * depths[g, 5] * u * v + 2.0 * depths[g, 6] * u
                       + depths[g, 7] * v * v + 2.0 * depths[g, 8] * v + depths[g, 9])
    cdef double t
    if den > 0.0:
        t = (depths[g, 1] * u + depths[g, 2] * v + depths[g, 3]) / den
        if t > 0.0:
            return t
    return depths[g, 0]


cdef inline double _alpha(long g, double px, double py, const double[:, ::1] means2d,
                          const double[:, ::1] conics, const double[::1] opac,
                          double alpha_max, double* gval, double* raw) noexcept nogil:
    cdef double dx = px - means2d[g, 0]
    cdef double dy = py - means2d[g, 1]
    cdef double power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
    if power > 0.0:
        gval[0] = 0.0
        raw[0] = 0.0
        return 0.0
    gval[0] = exp(power)
    raw[0] = opac[g] * gval[0]
    if raw[0] > alpha_max:
        return alpha_max
    return raw[0]


def forward(const cnp.int64_t[::1] tile_ptr, const cnp.int64_t[::1] tile_ids,
            const double[:, ::1] means2d, const double[:, ::1] conics,
            const double[::1] opacities, const double[:, ::1] colors, const double[:, ::1] depths,
            long width, long height, long tile_size, const double[::1] background,
            double alpha_min, double t_min, double alpha_max, int n_threads=1):
    image_np = np.empty((height, width, 3))
    acc_np = np.zeros((height, width))
    depth_np = np.zeros((height, width))
    median_np = np.zeros((height, width))
    final_np = np.ones((height, width))
    ncon_np = np.zeros((height, width), dtype=np.int32)
    cdef double[:, :, ::1] image = image_np
    cdef double[:, ::1] acc = acc_np
    cdef double[:, ::1] depth_num = depth_np
    cdef double[:, ::1] depth_med = median_np
    cdef double[:, ::1] final_t = final_np
    cdef int[:, ::1] n_contrib = ncon_np
    cdef long n_tiles = tile_ptr.shape[0] - 1
    cdef long tile, x, y, k, g, x0, y0, x1, y1, last
    cdef double T, a, test_t, r, gg, cr, cg, cb, ac, dn, zr, dm
    for tile in prange(n_tiles, nogil=True, num_threads=n_threads, schedule="static"):
        _tile_bounds(tile, width, height, tile_size, &x0, &y0, &x1, &y1)
        for y in range(y0, y1):
            for x in range(x0, x1):
                T = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                ac = 0.0
                dn = 0.0
                dm = 0.0
                last = 0
                for k in range(tile_ptr[tile], tile_ptr[tile + 1]):
                    g = tile_ids[k]
                    a = _alpha(g, x, y, means2d, conics, opacities, alpha_max, &gg, &r)
                    if a < alpha_min:
                        continue
                    test_t = T * (1.0 - a)
                    if test_t < t_min:
                        break
                    cr = cr + colors[g, 0] * a * T
                    cg = cg + colors[g, 1] * a * T
                    cb = cb + colors[g, 2] * a * T
                    ac = ac + a * T
                    zr = _ray_depth(g, x, y, depths)
                    dn = dn + zr * a * T
                    if T >= 0.5 and test_t < 0.5:
                        dm = zr
                    T = test_t
                    last = k - tile_ptr[tile] + 1
                image[y, x, 0] = cr + T * background[0]
                image[y, x, 1] = cg + T * background[1]
                image[y, x, 2] = cb + T * background[2]
                acc[y, x] = ac
                depth_num[y, x] = dn
                depth_med[y, x] = dm
                final_t[y, x] = T
                n_contrib[y, x] = last
    return image_np, acc_np, depth_np, median_np, final_np, ncon_np


def backward(const cnp.int64_t[::1] tile_ptr, const cnp.int64_t[::1] tile_ids,
             const double[:, ::1] means2d, const double[:, ::1] conics,
             const double[::1] opacities, const double[:, ::1] colors, const double[:, ::1] depths,
             long width, long height, long tile_size, const double[::1] background,
             double alpha_min, double t_min, double alpha_max,
             const double[:, ::1] final_t, const int[:, ::1] n_contrib,
             const double[:, :, ::1] grad_image):
    cdef long n = opacities.shape[0]
    dm_np = np.zeros((n, 2))
    dc_np = np.zeros((n, 3))
    do_np = np.zeros(n)
    dcol_np = np.zeros((n, 3))
    cdef double[:, ::1] d_mean2d = dm_np
    cdef double[:, ::1] d_conic = dc_np
    cdef double[::1] d_opac = do_np
    cdef double[:, ::1] d_color = dcol_np
    cdef long n_tiles = tile_ptr.shape[0] - 1
    cdef long tile, x, y, k, g, x0, y0, x1, y1, start
    cdef double T, a, r, gg, dx, dy, d_alpha, d_g, t_final
    cdef double ar, ag, ab, gr, gch, gb
    # serial over tiles: fixed accumulation order keeps results run-to-run identical
    with nogil:
        for tile in range(n_tiles):
            _tile_bounds(tile, width, height, tile_size, &x0, &y0, &x1, &y1)
            start = tile_ptr[tile]
            for y in range(y0, y1):
                for x in range(x0, x1):
                    t_final = final_t[y, x]
                    T = t_final
                    gr = grad_image[y, x, 0]
                    gch = grad_image[y, x, 1]
                    gb = grad_image[y, x, 2]
                    # colour accumulated behind the current entry (background folded in)
                    ar = t_final * background[0]
                    ag = t_final * background[1]
                    ab = t_final * background[2]
                    for k in range(start + n_contrib[y, x] - 1, start - 1, -1):
                        g = tile_ids[k]
                        a = _alpha(g, x, y, means2d, conics, opacities, alpha_max, &gg, &r)
                        if a < alpha_min:
                            continue
                        T = T / (1.0 - a)
                        d_color[g, 0] += a * T * gr
                        d_color[g, 1] += a * T * gch
                        d_color[g, 2] += a * T * gb
                        d_alpha = ((colors[g, 0] * T - ar / (1.0 - a)) * gr
                                   + (colors[g, 1] * T - ag / (1.0 - a)) * gch
                                   + (colors[g, 2] * T - ab / (1.0 - a)) * gb)
                        ar = ar + colors[g, 0] * a * T
                        ag = ag + colors[g, 1] * a * T
                        ab = ab + colors[g, 2] * a * T
                        if r >= alpha_max:
                            continue
                        d_opac[g] += d_alpha * gg
                        d_g = d_alpha * opacities[g] * gg
                        dx = x - means2d[g, 0]
                        dy = y - means2d[g, 1]
                        d_mean2d[g, 0] += d_g * (conics[g, 0] * dx + conics[g, 1] * dy)
                        d_mean2d[g, 1] += d_g * (conics[g, 1] * dx + conics[g, 2] * dy)
                        d_conic[g, 0] += -0.5 * d_g * dx * dx
                        d_conic[g, 1] += -d_g * dx * dy
                        d_conic[g, 2] += -0.5 * d_g * dy * dy
    return dm_np, dc_np, do_np, dcol_np
