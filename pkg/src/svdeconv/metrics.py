"""PSNR and Gaussian-window SSIM.

``ssim_tensor`` is built from tape primitives so it can sit inside a loss;
``ssim`` is the plain-float convenience wrapper.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndauto as nd


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def gaussian_1d(self) -> np.ndarray:
        ax = np.arange(self.window) - self.window // 2
        g = np.exp(-(ax ** 2) / (2.0 * self.sigma ** 2))
        return g / g.sum()

    def gaussian_2d(self) -> np.ndarray:
        g = self.gaussian_1d()
        return np.outer(g, g)


DEFAULT_SSIM = SSIMConfig()


def psnr(a, b, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def _as_nchw(x) -> nd.Tensor:
    x = nd.as_tensor(x)
    if x.ndim == 2:
        return nd.reshape(x, (1, 1) + x.shape)
    if x.ndim == 3:
        return nd.reshape(x, (1,) + x.shape)
    return x


def ssim_tensor(a, b, cfg: SSIMConfig = DEFAULT_SSIM) -> nd.Tensor:
    """Mean SSIM over all valid window positions, channels and batch items.

    Local moments use a separable Gaussian window; only positions where the
    window fits entirely inside the image are averaged.
    """
    a, b = _as_nchw(a), _as_nchw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    n, c, h, w = a.shape
    k = cfg.window
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} smaller than the {k}x{k} SSIM window")
    a = nd.reshape(a, (n * c, 1, h, w))
    b = nd.reshape(b, (n * c, 1, h, w))
    g = cfg.gaussian_1d().astype(a.dtype)
    gr = nd.Tensor(g.reshape(1, 1, k, 1))
    gc = nd.Tensor(g.reshape(1, 1, 1, k))
    half = k // 2
    hv, wv = h - 2 * half, w - 2 * half

    def blur(x):
        y = nd.conv2d_same(nd.conv2d_same(x, gr), gc)
        return nd.crop(y, half, half, hv, wv)

    mu_a, mu_b = blur(a), blur(b)
    e_aa, e_bb, e_ab = blur(nd.square(a)), blur(nd.square(b)), blur(a * b)
    mu_aa, mu_bb, mu_ab = nd.square(mu_a), nd.square(mu_b), mu_a * mu_b
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    num = (2.0 * mu_ab + c1) * (2.0 * (e_ab - mu_ab) + c2)
    den = (mu_aa + mu_bb + c1) * ((e_aa - mu_aa) + (e_bb - mu_bb) + c2)
    return nd.mean_all(num / den)


def ssim(a, b, cfg: SSIMConfig = DEFAULT_SSIM) -> float:
    a = np.asarray(a.data if isinstance(a, nd.Tensor) else a, dtype=float)
    b = np.asarray(b.data if isinstance(b, nd.Tensor) else b, dtype=float)
    return float(ssim_tensor(a, b, cfg).data)


def mse(a, b) -> float:
    return float(np.mean((np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) ** 2))


def highpass(img: np.ndarray, sigma: float = 1.5) -> np.ndarray:
    """Image minus its Gaussian blur (zero boundary), over the last two axes."""
    from scipy.ndimage import gaussian_filter
    img = np.asarray(img, dtype=float)
    sig = (0,) * (img.ndim - 2) + (sigma, sigma)
    return img - gaussian_filter(img, sig, mode="constant")
