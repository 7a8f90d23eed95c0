"""JIT-compiled compositing kernels.

The rasterizer's outer structure (projection, depth sort, parameter chain
rule) is vectorized numpy; only the per-Gaussian per-pixel compositing loops
live here.  Per-Gaussian blending state (effective alpha and arrival
transmittance over the screen bounding box) is written to flat buffers laid
out by exclusive prefix sums, so the backward sweep replays the exact
forward arithmetic.  `sparselgs.rasterizer` falls back to a pure-numpy
implementation when numba is unavailable or SLGS_DISABLE_NUMBA is set.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def composite_forward(
    order_count,
    x0s, x1s, y0s, y1s,
    mean2d, conic, opac, colors, feats,
    alpha_clamp, t_floor,
    color_img, feat_img, T_img, contrib,
    offsets, alpha_buf, t_buf, save_state,
):
    K = order_count
    F = feats.shape[1]
    for k in range(K):
        x0, x1, y0, y1 = x0s[k], x1s[k], y0s[k], y1s[k]
        if x0 >= x1 or y0 >= y1:
            continue
        mx = mean2d[k, 0]
        my = mean2d[k, 1]
        a = conic[k, 0]
        b = conic[k, 1]
        c = conic[k, 2]
        o = opac[k]
        base = offsets[k]
        width = x1 - x0
        for y in range(y0, y1):
            dy = y - my
            row = base + (y - y0) * width - x0
            for x in range(x0, x1):
                Tv = T_img[y, x]
                idx = row + x
                if Tv <= t_floor:
                    if save_state:
                        alpha_buf[idx] = 0.0
                        t_buf[idx] = Tv
                    continue
                dx = x - mx
                sig = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                g = np.exp(-sig)
                alpha = o * g
                if alpha > alpha_clamp:
                    alpha = alpha_clamp
                if save_state:
                    alpha_buf[idx] = alpha
                    t_buf[idx] = Tv
                if alpha <= 0.0:
                    continue
                w = alpha * Tv
                for ch in range(3):
                    color_img[y, x, ch] += w * colors[k, ch]
                for ch in range(F):
                    feat_img[y, x, ch] += w * feats[k, ch]
                contrib[y, x] += 1
                T_img[y, x] = Tv * (1.0 - alpha)


@njit(cache=True)
def composite_backward(
    order_count,
    x0s, x1s, y0s, y1s,
    mean2d, conic, opac, colors, feats,
    alpha_clamp,
    grad_color, grad_feat, grad_alpha, use_color, use_feat, use_alpha,
    offsets, alpha_buf, t_buf,
    g_mean2d, g_conic, g_opac, g_color, g_feat,
    suffix,
):
    K = order_count
    F = feats.shape[1]
    for k in range(K - 1, -1, -1):
        x0, x1, y0, y1 = x0s[k], x1s[k], y0s[k], y1s[k]
        if x0 >= x1 or y0 >= y1:
            continue
        mx = mean2d[k, 0]
        my = mean2d[k, 1]
        a = conic[k, 0]
        b = conic[k, 1]
        c = conic[k, 2]
        o = opac[k]
        base = offsets[k]
        width = x1 - x0
        for y in range(y0, y1):
            dy = y - my
            row = base + (y - y0) * width - x0
            for x in range(x0, x1):
                idx = row + x
                alpha = alpha_buf[idx]
                if alpha <= 0.0:
                    continue
                Tv = t_buf[idx]
                # D = dLoss/d(blend weight) at this pixel
                D = 0.0
                if use_color:
                    for ch in range(3):
                        D += grad_color[y, x, ch] * colors[k, ch]
                if use_feat:
                    for ch in range(F):
                        D += grad_feat[y, x, ch] * feats[k, ch]
                if use_alpha:
                    D += grad_alpha[y, x]
                w = alpha * Tv
                g_a = Tv * D - suffix[y, x] / (1.0 - alpha)
                suffix[y, x] += D * w
                if use_color:
                    for ch in range(3):
                        g_color[k, ch] += w * grad_color[y, x, ch]
                if use_feat:
                    for ch in range(F):
                        g_feat[k, ch] += w * grad_feat[y, x, ch]
                dx = x - mx
                sig = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                g = np.exp(-sig)
                if o * g >= alpha_clamp:
                    continue  # clamped alpha: no gradient into the Gaussian
                g_opac[k] += g_a * g
                g_sig = -g_a * o * g
                g_mean2d[k, 0] -= g_sig * (a * dx + b * dy)
                g_mean2d[k, 1] -= g_sig * (b * dx + c * dy)
                g_conic[k, 0] += 0.5 * g_sig * dx * dx
                g_conic[k, 1] += 0.5 * g_sig * dx * dy
                g_conic[k, 2] += 0.5 * g_sig * dy * dy
