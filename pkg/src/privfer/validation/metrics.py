"""Image and embedding metrics: SSIM, PSNR, IED and the Gaussian-blur baseline."""
from __future__ import annotations

import math

import numpy as np
import scipy.ndimage
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DomainError

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
# psnr() of identical images; written as "inf" in text reports
PSNR_IDENTICAL = math.inf


def _window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = size // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}")


def ssim(img_a, img_b, data_range: float = 255.0) -> float:
    """Mean structural similarity (Gaussian 11x11 window, sigma 1.5, K1=0.01, K2=0.03).

    Statistics are taken only where the window fits inside the image; colour
    images (H, W, C) average the per-channel indices.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3 or min(a.shape[:2]) < SSIM_WINDOW:
        raise DomainError(f"ssim needs HxW or HxWxC images of at least {SSIM_WINDOW}px, got {a.shape}")
    w = _window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)

    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx**2
        vy = filt(y * y) - my**2
        cxy = filt(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def ssim_torch(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Differentiable per-image SSIM for (N, C, H, W) tensors, same definition as :func:`ssim`."""
    c = x.shape[1]
    w = torch.as_tensor(_window(), dtype=x.dtype)[None, None].expand(c, 1, -1, -1)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(t):
        return F.conv2d(t, w, groups=c)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx**2
    vy = filt(y * y) - my**2
    cxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return s.mean(dim=(1, 2, 3))


def psnr(img_a, img_b, peak: float = 255.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; identical inputs give ``PSNR_IDENTICAL``."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    _same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(peak**2 / mse))


def ied(z_a, z_b) -> float:
    """Individual embedding displacement: Euclidean distance between two
    embeddings of the same sample taken at different pipeline stages."""
    a = np.asarray(z_a, dtype=np.float64)
    b = np.asarray(z_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"embedding dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """2-D Gaussian ``exp(-(x^2+y^2)/(2 sigma^2)) / (2 pi sigma^2)`` sampled on
    integer offsets and renormalised to sum to one."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = max(1, math.ceil(3.0 * sigma))
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(r, r)
    k = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2)) / (2.0 * math.pi * sigma**2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Blur uint8 (H,W,3) or (N,H,W,3) images channel-wise (reflect borders)."""
    k = gaussian_kernel(sigma)
    arr = np.asarray(img)
    if arr.ndim not in (3, 4):
        raise DomainError(f"expected (H,W,C) or (N,H,W,C) images, got {arr.shape}")
    x = arr.astype(np.float64)
    kernel = k[:, :, None] if arr.ndim == 3 else k[None, :, :, None]
    out = scipy.ndimage.convolve(x, kernel, mode="reflect")
    if arr.dtype == np.uint8:
        return np.clip(np.round(out), 0, 255).astype(np.uint8)
    return out
