"""Reconstruction and structure-preservation metrics on latent videos."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import uniform_filter

from .scenegen import LATENT_PEAK, RegionMask

PSNR_CAP = 99.0


class MetricError(ValueError):
    pass


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def psnr(a, b, peak: float = LATENT_PEAK) -> float:
    """PSNR in dB over all elements, capped at 99 dB (returned for identical inputs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise MetricError(f"peak must be positive, got {peak}")
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def _mask_array(mask, shape) -> np.ndarray:
    m = mask.masks if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    n, _, h, w = shape
    if m.shape != (n, h, w):
        raise MetricError(f"mask shape {m.shape} does not match video {shape}")
    return m


def masked_psnr(a, b, mask, peak: float = LATENT_PEAK) -> float:
    """PSNR over the sites where ``mask`` is 0 (all channels of those sites)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"masked_psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise MetricError(f"peak must be positive, got {peak}")
    keep = ~_mask_array(mask, a.shape)
    if not keep.any():
        raise MetricError("mask covers every site; nothing left to evaluate")
    if keep.all():
        return psnr(a, b, peak)  # same summation order as the unmasked metric
    diff = (a - b).transpose(0, 2, 3, 1)[keep]
    return _psnr_from_mse(float(np.mean(diff * diff)), peak)


def object_descriptors(video, mask, pool: int = 1) -> np.ndarray:
    video = np.asarray(video, dtype=np.float64)
    if pool < 1:
        raise MetricError(f"pool size must be >= 1, got {pool}")
    if pool > 1:
        video = uniform_filter(video, size=(1, 1, pool, pool), mode="nearest")
    m = _mask_array(mask, video.shape)
    empty = [i for i in range(m.shape[0]) if not m[i].any()]
    if empty:
        raise MetricError(f"object mask is empty in frames {empty}")
    return np.stack([video[i][:, m[i]].mean(axis=1) for i in range(m.shape[0])])


def osv_proxy(video, mask, pool: int = 1) -> float:
    """Cross-frame variance of mean-pooled object descriptors.

    A stand-in for object semantic variance, not that metric itself: each
    frame's descriptor is the mean latent vector over its masked sites
    (after an optional ``pool x pool`` box filter); the score is the mean
    squared distance of the descriptors to their cross-frame mean.
    """
    d = object_descriptors(video, mask, pool)
    d = d - d[0]  # exact zero for identical frames; the score is shift invariant
    return float(np.mean(np.sum((d - d.mean(axis=0)) ** 2, axis=1)))
