"""Quantitative evaluation: PSNR, range-compressed PSNR, SSIM, warp accuracy.

Irradiance images are unbounded above, so plain PSNR is complemented by
a mu-law variant that compresses the range logarithmically before
comparing, weighting shadow fidelity the way a tone-mapped view would.
Registration quality is measured geometrically: displacement between
estimated and true warps at the image corners, in pixels of the
high-resolution grid.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .model import AffineWarpField

#: reported instead of infinity when the error is exactly zero
PSNR_SENTINEL = 120.0


def psnr(ref: np.ndarray, test: np.ndarray, peak: float | None = None) -> float:
    """10*log10(peak^2 / MSE); peak defaults to the reference maximum."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if peak is None:
        peak = float(ref.max())
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return float(10.0 * np.log10(peak ** 2 / mse))


def mu_law(v: np.ndarray, mu: float = 5000.0, peak: float = 1.0) -> np.ndarray:
    """Logarithmic range compression onto [0,1]: log(1+mu*v/peak)/log(1+mu)."""
    v = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
    return np.log1p(mu * v / peak) / np.log1p(mu)


def mu_psnr(
    ref: np.ndarray, test: np.ndarray, mu: float = 5000.0, peak: float | None = None
) -> float:
    """PSNR after mu-law compression of both images (peak from the reference)."""
    ref = np.asarray(ref, dtype=np.float64)
    if peak is None:
        peak = float(ref.max())
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    return psnr(mu_law(ref, mu, peak), mu_law(test, mu, peak), peak=1.0)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    win = _gaussian_window()
    margin = win.shape[0] // 2

    def smooth(img):
        full = ndimage.correlate(img, win, mode="constant", cval=0.0)
        return full[margin:-margin, margin:-margin]  # keep full-window pixels only

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx = smooth(x)
    my = smooth(y)
    sxx = smooth(x * x) - mx * mx
    syy = smooth(y * y) - my * my
    sxy = smooth(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(ref: np.ndarray, test: np.ndarray, data_range: float | None = None) -> float:
    """Single-scale SSIM, 11x11 Gaussian window sigma=1.5, channel-averaged."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if data_range is None:
        spread = float(ref.max() - ref.min())
        data_range = spread if spread > 0 else 1.0
    if ref.ndim == 2:
        return _ssim_channel(ref, test, data_range)
    vals = [_ssim_channel(ref[..., c], test[..., c], data_range) for c in range(ref.shape[2])]
    return float(np.mean(vals))


def geometric_error(est: AffineWarpField, gt: AffineWarpField) -> float:
    """Mean displacement between estimated and true warps at the 4 corners."""
    if est.shape != gt.shape:
        raise ValueError(f"field grids differ: {est.shape} vs {gt.shape}")
    h, w = est.shape
    corners = np.array(
        [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)]
    )
    d = est.map_points(corners) - gt.map_points(corners)
    return float(np.mean(np.hypot(d[:, 0], d[:, 1])))


def burst_geometric_error(
    est_fields: list[AffineWarpField],
    gt_fields: list[AffineWarpField],
    k0: int,
) -> dict:
    """Corner errors per non-reference frame, with mean/median aggregation."""
    if len(est_fields) != len(gt_fields):
        raise ValueError("field lists must align")
    errors = []
    frames = []
    for k, (est, gt) in enumerate(zip(est_fields, gt_fields)):
        if k == k0:
            continue
        frames.append(k)
        errors.append(geometric_error(est, gt))
    arr = np.asarray(errors)
    return {
        "frames": frames,
        "per_frame": errors,
        "mean": float(arr.mean()) if errors else 0.0,
        "median": float(np.median(arr)) if errors else 0.0,
    }
