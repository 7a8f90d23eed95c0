"""Structural similarity with an analytic input gradient.

Windowed statistics use an 11x11 Gaussian kernel (sigma 1.5) and the usual
K1=0.01, K2=0.03 stabilizers on a unit dynamic range.  The score is averaged
over the fully-valid interior region, so constant images reproduce the
closed-form value C1/(1+C1) exactly.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03


def _kernel1d(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


_K1D = _kernel1d()


def _filter(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _K1D, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _K1D, axis=1, mode="constant", cval=0.0)


def _valid(img: np.ndarray, r: int) -> np.ndarray:
    return img[r:-r, r:-r] if r > 0 else img


def _embed(img: np.ndarray, shape, r: int) -> np.ndarray:
    out = np.zeros(shape)
    if r > 0:
        out[r:-r, r:-r] = img
    else:
        out[...] = img
    return out


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean SSIM between two images in [0,1]; channels are averaged."""
    return ssim_and_grad(x, y, need_grad=False)[0]


def ssim_and_grad(x: np.ndarray, y: np.ndarray, need_grad: bool = True):
    """Returns (mean ssim, d(mean ssim)/dx) with dx matching x's shape."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
        y = y[:, :, None]
    h, w, c = x.shape
    r = WINDOW_SIZE // 2
    if h < WINDOW_SIZE or w < WINDOW_SIZE:
        raise ValueError("image smaller than the SSIM window")
    c1 = K1 * K1
    c2 = K2 * K2

    total = 0.0
    grad = np.zeros_like(x) if need_grad else None
    n_valid = (h - 2 * r) * (w - 2 * r)
    for ch in range(c):
        xc, yc = x[:, :, ch], y[:, :, ch]
        mx = _valid(_filter(xc), r)
        my = _valid(_filter(yc), r)
        sxx = _valid(_filter(xc * xc), r) - mx * mx
        syy = _valid(_filter(yc * yc), r) - my * my
        sxy = _valid(_filter(xc * yc), r) - mx * my
        a1 = 2 * mx * my + c1
        a2 = 2 * sxy + c2
        b1 = mx * mx + my * my + c1
        b2 = sxx + syy + c2
        s = (a1 * a2) / (b1 * b2)
        total += s.mean()
        if not need_grad:
            continue
        # partials of s wrt the window statistics, s = N/D form
        inv_d = 1.0 / (b1 * b2)
        ds_dmx = inv_d * (2 * my * a2 - s * 2 * mx * b2)
        ds_dsxx = -inv_d * s * b1
        ds_dsxy = inv_d * 2 * a1
        # adjoint of the window statistics wrt x:
        #   mx(p)  <- w(q-p)
        #   sxx(p) <- 2 w(q-p) (x(q) - mx(p))
        #   sxy(p) <-   w(q-p) (y(q) - my(p))
        shape = (h, w)
        t0 = _filter(_embed(ds_dmx - 2 * mx * ds_dsxx - my * ds_dsxy, shape, r))
        t1 = _filter(_embed(ds_dsxx, shape, r))
        t2 = _filter(_embed(ds_dsxy, shape, r))
        grad[:, :, ch] = (t0 + 2 * xc * t1 + yc * t2) / n_valid
    mean = total / c
    if need_grad:
        grad = grad / c
        if squeeze:
            grad = grad[:, :, 0]
    return mean, grad
