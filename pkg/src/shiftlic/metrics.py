"""Distortion measures: MSE on the 0-255 scale, PSNR and MS-SSIM."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP = 100.0


def _pair(x, x_hat) -> tuple[Tensor, Tensor]:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(np.asarray(x_hat))
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return x, x_hat


def mse_tensor(x, x_hat) -> Tensor:
    """Mean squared error after scaling [0,1] pixels to [0,255]."""
    x, x_hat = _pair(x, x_hat)
    return ops.scale(ops.mean(ops.square(ops.sub(x_hat, x))), 255.0 ** 2)


def mse(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    d = (x.data.astype(np.float64) - x_hat.data.astype(np.float64)) * 255.0
    return float(np.mean(d * d))


def psnr(x, x_hat) -> float:
    m = mse(x, x_hat)
    if m <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / m))


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _window_for(h: int, w: int, size: int = 11) -> np.ndarray:
    # coarse scales of small inputs get a truncated odd window
    n = min(size, h, w)
    if n % 2 == 0:
        n -= 1
    return gaussian_window(n)


def _ssim_parts(x: Tensor, y: Tensor, win: np.ndarray, c1: float, c2: float):
    mu_x = ops.blur_valid(x, win)
    mu_y = ops.blur_valid(y, win)
    mu_xx = ops.square(mu_x)
    mu_yy = ops.square(mu_y)
    mu_xy = ops.mul(mu_x, mu_y)
    s_xx = ops.sub(ops.blur_valid(ops.square(x), win), mu_xx)
    s_yy = ops.sub(ops.blur_valid(ops.square(y), win), mu_yy)
    s_xy = ops.sub(ops.blur_valid(ops.mul(x, y), win), mu_xy)
    cs = ops.div(ops.add(ops.scale(s_xy, 2.0), c2), ops.add(ops.add(s_xx, s_yy), c2))
    lum = ops.div(ops.add(ops.scale(mu_xy, 2.0), c1), ops.add(ops.add(mu_xx, mu_yy), c1))
    return ops.mul(lum, cs), cs


def ms_ssim_tensor(x, x_hat, data_range: float = 1.0, weights=MSSSIM_WEIGHTS) -> Tensor:
    """Differentiable 5-scale MS-SSIM averaged over batch and channels."""
    x, y = _pair(x, x_hat)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    levels = len(weights)
    total = None
    for i in range(levels):
        _, _, H, W = x.shape
        win = _window_for(H, W)
        ssim_map, cs_map = _ssim_parts(x, y, win, c1, c2)
        if i < levels - 1:
            term = ops.relu(ops.mean(cs_map, axis=(2, 3)))
            x = ops.resample(ops.crop(x, H - H % 2, W - W % 2), 2, "down")
            y = ops.resample(ops.crop(y, H - H % 2, W - W % 2), 2, "down")
        else:
            term = ops.relu(ops.mean(ssim_map, axis=(2, 3)))
        term = ops.power(term, weights[i])
        total = term if total is None else ops.mul(total, term)
    return ops.mean(total)


def ms_ssim(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    return float(ms_ssim_tensor(Tensor(x.data.astype(np.float64)),
                                Tensor(x_hat.data.astype(np.float64))).data)


def ssim_db(d: float) -> float:
    """MS-SSIM in decibels, ``-10 log10(1 - d)``; capped like PSNR."""
    if d >= 1.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(1.0 - d))
