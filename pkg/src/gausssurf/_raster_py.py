"""Vectorized numpy compositing kernels (fallback when the compiled core is absent).

Both backends share one contract.  Inputs are per-Gaussian 2D splat arrays plus a
CSR tile binning (``tile_ptr``, ``tile_ids``) whose per-tile lists are already in
front-to-back order.  Pixel ``(x, y)`` is centred at integer coordinates.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def _tile_pixels(tile: int, width: int, height: int, tile_size: int):
    tiles_x = (width + tile_size - 1) // tile_size
    ty, tx = divmod(tile, tiles_x)
    x0, y0 = tx * tile_size, ty * tile_size
    x1, y1 = min(x0 + tile_size, width), min(y0 + tile_size, height)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return xs.ravel(), ys.ravel(), (slice(y0, y1), slice(x0, x1))


def _alphas(ids, xs, ys, means2d, conics, opacities, alpha_max):
    dx = xs[None, :] - means2d[ids, 0][:, None]
    dy = ys[None, :] - means2d[ids, 1][:, None]
    a, b, c = conics[ids, 0][:, None], conics[ids, 1][:, None], conics[ids, 2][:, None]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    g = np.exp(np.minimum(power, 0.0))
    raw = opacities[ids][:, None] * g
    raw = np.where(power > 0.0, 0.0, raw)
    alpha = np.minimum(raw, alpha_max)
    return alpha, raw, g, dx, dy


def _composite_weights(alpha, alpha_min, t_min):
    alpha = np.where(alpha < alpha_min, 0.0, alpha)
    test_t = np.cumprod(1.0 - alpha, axis=0)
    included = (test_t >= t_min) & (alpha > 0.0)
    # a pixel stops at the first contribution that would push T below t_min
    stopped = np.cumsum(test_t < t_min, axis=0) > 0
    included &= ~stopped
    alpha = np.where(included, alpha, 0.0)
    trans = np.cumprod(1.0 - alpha, axis=0)
    t_before = np.vstack([np.ones((1, alpha.shape[1])), trans[:-1]])
    weights = alpha * t_before
    final_t = trans[-1] if len(trans) else np.ones(alpha.shape[1])
    return alpha, included, t_before, weights, final_t


def _ray_depth(c, xs, ys):
    """Per (splat, pixel) depth; see ``depth_coefficients`` in the renderer."""
    u, v = xs[None, :], ys[None, :]
    col = [c[:, k:k + 1] for k in range(10)]
    den = (col[4] * u * u + 2 * col[5] * u * v + 2 * col[6] * u + col[7] * v * v
           + 2 * col[8] * v + col[9])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (col[1] * u + col[2] * v + col[3]) / den
    return np.where((den > 0) & (t > 0), t, col[0])


def forward(tile_ptr, tile_ids, means2d, conics, opacities, colors, depths,
            width, height, tile_size, background, alpha_min, t_min, alpha_max, n_threads=1):
    image = np.empty((height, width, 3))
    acc = np.zeros((height, width))
    depth_num = np.zeros((height, width))
    depth_med = np.zeros((height, width))
    final_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int32)
    n_tiles = len(tile_ptr) - 1
    for tile in range(n_tiles):
        xs, ys, sl = _tile_pixels(tile, width, height, tile_size)
        ids = tile_ids[tile_ptr[tile]:tile_ptr[tile + 1]]
        shape = (sl[0].stop - sl[0].start, sl[1].stop - sl[1].start)
        if len(ids) == 0:
            image[sl] = background
            continue
        alpha, _, _, _, _ = _alphas(ids, xs, ys, means2d, conics, opacities, alpha_max)
        alpha, included, t_before, w, ft = _composite_weights(alpha, alpha_min, t_min)
        rgb = w.T @ colors[ids] + ft[:, None] * background[None, :]
        image[sl] = rgb.reshape(shape + (3,))
        acc[sl] = w.sum(axis=0).reshape(shape)
        zr = _ray_depth(depths[ids], xs, ys)
        depth_num[sl] = (w * zr).sum(axis=0).reshape(shape)
        # the splat that takes transmittance below one half sets the median depth
        cross = included & (t_before >= 0.5) & (t_before * (1.0 - alpha) < 0.5)
        depth_med[sl] = np.where(cross.any(axis=0), zr[np.argmax(cross, axis=0), np.arange(zr.shape[1])],
                                 0.0).reshape(shape)
        final_t[sl] = ft.reshape(shape)
        last = np.where(included.any(axis=0),
                        len(ids) - np.argmax(included[::-1], axis=0), 0)
        n_contrib[sl] = last.reshape(shape).astype(np.int32)
    return image, acc, depth_num, depth_med, final_t, n_contrib


def backward(tile_ptr, tile_ids, means2d, conics, opacities, colors, depths,
             width, height, tile_size, background, alpha_min, t_min, alpha_max,
             final_t, n_contrib, grad_image):
    n = len(opacities)
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_color = np.zeros((n, 3))
    n_tiles = len(tile_ptr) - 1
    for tile in range(n_tiles):
        ids = tile_ids[tile_ptr[tile]:tile_ptr[tile + 1]]
        if len(ids) == 0:
            continue
        xs, ys, sl = _tile_pixels(tile, width, height, tile_size)
        g_pix = grad_image[sl].reshape(-1, 3)
        alpha, raw, g, dx, dy = _alphas(ids, xs, ys, means2d, conics, opacities, alpha_max)
        alpha, included, t_before, w, ft = _composite_weights(alpha, alpha_min, t_min)
        col = colors[ids]
        # color contributed by everything behind entry k (exclusive), background included
        wc = w[:, :, None] * col[:, None, :]
        behind = np.cumsum(wc[::-1], axis=0)[::-1] - wc
        behind += (ft[:, None] * background[None, :])[None]
        one_minus = np.where(included, 1.0 - alpha, 1.0)
        d_alpha = np.einsum("kpc,pc->kp",
                            col[:, None, :] * t_before[:, :, None] - behind / one_minus[:, :, None],
                            g_pix)
        d_alpha = np.where(included & (raw < alpha_max), d_alpha, 0.0)
        np.add.at(d_color, ids, w @ g_pix)
        np.add.at(d_opacity, ids, (d_alpha * g).sum(axis=1))
        d_g = d_alpha * opacities[ids][:, None] * g
        a, b, c = conics[ids, 0][:, None], conics[ids, 1][:, None], conics[ids, 2][:, None]
        # power = -0.5 (a dx^2 + c dy^2) - b dx dy with dx = px - mean_x
        dm = np.stack([(d_g * (a * dx + b * dy)).sum(axis=1),
                       (d_g * (b * dx + c * dy)).sum(axis=1)], axis=1)
        np.add.at(d_mean2d, ids, dm)
        dcon = np.stack([(-0.5 * d_g * dx * dx).sum(axis=1),
                         (-d_g * dx * dy).sum(axis=1),
                         (-0.5 * d_g * dy * dy).sum(axis=1)], axis=1)
        np.add.at(d_conic, ids, dcon)
    return d_mean2d, d_conic, d_opacity, d_color
