"""Training loss: (1 - lambda) L1 + lambda (1 - SSIM), with analytic gradients.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 on a
[0, 1] data range. Window weights are renormalized by their in-image mass so
border statistics are unbiased; on constant images the SSIM map is exactly
its closed form everywhere, which the tests pin.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.ndimage import convolve1d

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_C1 = (SSIM_K1 * 1.0) ** 2
SSIM_C2 = (SSIM_K2 * 1.0) ** 2
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5


@lru_cache(maxsize=8)
def _gauss_kernel(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


@lru_cache(maxsize=32)
def _window_mass(shape: tuple) -> np.ndarray:
    """Per-pixel sum of in-image window weights (borders get < 1)."""
    k = _gauss_kernel()
    ones = np.ones(shape)
    m = convolve1d(ones, k, axis=0, mode="constant", cval=0.0)
    return convolve1d(m, k, axis=1, mode="constant", cval=0.0)


def _blur(img: np.ndarray) -> np.ndarray:
    """Normalized Gaussian windowing of an (H, W) plane."""
    k = _gauss_kernel()
    out = convolve1d(img, k, axis=0, mode="constant", cval=0.0)
    out = convolve1d(out, k, axis=1, mode="constant", cval=0.0)
    return out / _window_mass(img.shape)


def _blur_adjoint(img: np.ndarray) -> np.ndarray:
    """Adjoint of _blur (the kernel is symmetric: divide, then convolve)."""
    k = _gauss_kernel()
    out = img / _window_mass(img.shape)
    out = convolve1d(out, k, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, k, axis=1, mode="constant", cval=0.0)


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel, per-channel SSIM between two (H, W, 3) images in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(x)
    for ch in range(x.shape[2]):
        out[:, :, ch] = _ssim_plane(x[:, :, ch], y[:, :, ch])[0]
    return out


def _ssim_plane(x: np.ndarray, y: np.ndarray):
    mu_x = _blur(x)
    mu_y = _blur(y)
    m_xx = _blur(x * x)
    m_yy = _blur(y * y)
    m_xy = _blur(x * y)
    var_x = m_xx - mu_x * mu_x
    var_y = m_yy - mu_y * mu_y
    cov = m_xy - mu_x * mu_y
    A1 = 2.0 * mu_x * mu_y + SSIM_C1
    A2 = 2.0 * cov + SSIM_C2
    B1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    B2 = var_x + var_y + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    return S, (mu_x, mu_y, A1, A2, B1, B2)


def _ssim_plane_grad(x: np.ndarray, y: np.ndarray, dL_dS: np.ndarray) -> np.ndarray:
    """Gradient of sum(dL_dS * SSIM) w.r.t. x."""
    S, (mu_x, mu_y, A1, A2, B1, B2) = _ssim_plane(x, y)
    D = B1 * B2
    d_mu = dL_dS * (2.0 * mu_y * (A2 - A1) / D + 2.0 * mu_x * S * (1.0 / B2 - 1.0 / B1))
    d_mxx = dL_dS * (-S / B2)
    d_mxy = dL_dS * (2.0 * A1 / D)
    return _blur_adjoint(d_mu) + 2.0 * x * _blur_adjoint(d_mxx) + y * _blur_adjoint(d_mxy)


def compute_loss(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.2):
    """Mixed L1 / D-SSIM photometric loss.

    Returns (scalar loss, dL/drendered of the same shape). Gradients for
    both terms are analytic; the L1 subgradient at zero difference is 0.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    n = rendered.size
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_ssim) * np.sign(diff) / n

    smap = np.empty_like(rendered)
    dL_dS = -lambda_ssim / n  # from lambda * (1 - mean(S))
    for ch in range(rendered.shape[2]):
        xs, ys = rendered[:, :, ch], target[:, :, ch]
        smap[:, :, ch] = _ssim_plane(xs, ys)[0]
        grad[:, :, ch] += _ssim_plane_grad(xs, ys, np.full(xs.shape, dL_dS))
    loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - float(smap.mean()))
    return loss, grad
