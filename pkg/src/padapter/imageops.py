"""Pixel-space image helpers: bilinear resize, blur, mask pooling.

Images are float64 (C, H, W); sampling uses half-pixel centers
(src = (dst + 0.5) * scale - 0.5, clamped), so a factor-2 downsample averages
each 2x2 block and resizing a constant image is exact.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ContractError


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if img.ndim != 3:
        raise ContractError(f"expected (C, H, W), got {img.shape}")
    c, h, w = img.shape
    if out_h < 1 or out_w < 1:
        raise ContractError("output dims must be positive")

    def axis_coords(n_src, n_dst):
        src = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        src = np.clip(src, 0.0, n_src - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(h, out_h)
    xlo, xhi, fx = axis_coords(w, out_w)
    top = img[:, ylo][:, :, xlo] * (1 - fx) + img[:, ylo][:, :, xhi] * fx
    bot = img[:, yhi][:, :, xlo] * (1 - fx) + img[:, yhi][:, :, xhi] * fx
    return top * (1 - fy[None, :, None]) + bot * fy[None, :, None]


def upsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsample by an integer factor; factor 1 is the identity."""
    if int(factor) != factor or factor < 1:
        raise ContractError(f"upsample factor must be an integer >= 1, got {factor}")
    if factor == 1:
        return img.copy()
    _, h, w = img.shape
    return bilinear_resize(img, h * int(factor), w * int(factor))


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear downsample by an integer factor dividing both dims."""
    if int(factor) != factor or factor < 1:
        raise ContractError(f"downsample factor must be an integer >= 1, got {factor}")
    _, h, w = img.shape
    if h % factor or w % factor:
        raise ContractError(f"factor {factor} does not divide image dims ({h}, {w})")
    if factor == 1:
        return img.copy()
    return bilinear_resize(img, h // int(factor), w // int(factor))


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Any-pixel pooling: a low-res cell is masked iff any pixel in it is."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ContractError(f"factor {factor} does not divide mask dims ({h}, {w})")
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    return (blocks.max(axis=(1, 3)) > 0).astype(np.float64)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate edges; sigma <= 0 is identity."""
    if sigma <= 0.0:
        return img.copy()
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()

    def blur_axis(a, axis):
        n = a.shape[axis]
        idx = np.clip(np.arange(n)[:, None] + xs.astype(np.int64)[None, :], 0, n - 1)
        taken = np.take(a, idx.reshape(-1), axis=axis)
        new_shape = list(a.shape)
        new_shape[axis:axis + 1] = [n, 2 * radius + 1]
        taken = taken.reshape(new_shape)
        return np.tensordot(taken, k, axes=([axis + 1], [0]))

    return blur_axis(blur_axis(img, 1), 2)
