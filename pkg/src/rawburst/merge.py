"""Classical single-frame baselines: demosaicking and exposure-bracket fusion.

These close the loop without the burst solver: interpolate the missing
CFA channels per frame, divide by exposure, and fuse the per-frame
irradiance estimates with inverse-variance weights.  They are both the
comparison stack for the iterative reconstruction and building blocks
inside it (its initialization demosaicks bilinearly).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .model import BayerPattern, IrradianceImage, channel_map

# Bilinear interpolation as mask-normalized convolution: the numerator
# averages known same-channel neighbors, the denominator counts them, so
# borders stay consistent and known sites reproduce exactly.
_KERNEL_G = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]])
_KERNEL_RB = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]])


def demosaic_bilinear(raw: np.ndarray, pattern: BayerPattern) -> np.ndarray:
    """Interpolate missing CFA sites from same-channel neighbors, per channel."""
    raw = np.asarray(raw, dtype=np.float64)
    ch = channel_map(pattern, raw.shape)
    out = np.empty(raw.shape + (3,))
    for c, kernel in ((0, _KERNEL_RB), (1, _KERNEL_G), (2, _KERNEL_RB)):
        mask = (ch == c).astype(np.float64)
        num = ndimage.convolve(raw * mask, kernel, mode="constant", cval=0.0)
        den = ndimage.convolve(mask, kernel, mode="constant", cval=0.0)
        out[:, :, c] = num / den
    return out


# Gradient-corrected 5x5 linear demosaicking kernels, in eighths.  Five
# filters cover the site/channel cases; the remaining cases follow by
# symmetry (B swaps roles with R).
_G_AT_RB = np.array([
    [0, 0, -1, 0, 0],
    [0, 0, 2, 0, 0],
    [-1, 2, 4, 2, -1],
    [0, 0, 2, 0, 0],
    [0, 0, -1, 0, 0],
]) / 8.0

# chroma at a green site whose same-chroma neighbors sit left/right
_C_AT_G_H = np.array([
    [0, 0, 0.5, 0, 0],
    [0, -1, 0, -1, 0],
    [-1, 4, 5, 4, -1],
    [0, -1, 0, -1, 0],
    [0, 0, 0.5, 0, 0],
]) / 8.0

_C_AT_G_V = _C_AT_G_H.T

# chroma at the opposite chroma site (R at B, B at R)
_C_AT_C = np.array([
    [0, 0, -1.5, 0, 0],
    [0, 2, 0, 2, 0],
    [-1.5, 0, 6, 0, -1.5],
    [0, 2, 0, 2, 0],
    [0, 0, -1.5, 0, 0],
]) / 8.0


def demosaic_malvar(raw: np.ndarray, pattern: BayerPattern) -> np.ndarray:
    """Gradient-corrected linear demosaicking (5x5 kernels, mirrored borders)."""
    raw = np.asarray(raw, dtype=np.float64)
    ch = channel_map(pattern, raw.shape)
    tile = pattern.tile
    # green rows holding red tell the horizontal/vertical case apart
    red_row_parity = int(np.where(tile == 0)[0][0])

    def conv(kernel):
        return ndimage.convolve(raw, kernel, mode="mirror")

    g_at_rb = conv(_G_AT_RB)
    c_h = conv(_C_AT_G_H)
    c_v = conv(_C_AT_G_V)
    c_x = conv(_C_AT_C)

    rows = np.arange(raw.shape[0])[:, None]
    is_r = ch == 0
    is_g = ch == 1
    is_b = ch == 2
    g_in_red_row = is_g & ((rows % 2) == red_row_parity)
    g_in_blue_row = is_g & ~((rows % 2) == red_row_parity)

    out = np.empty(raw.shape + (3,))
    out[:, :, 1] = np.where(is_g, raw, g_at_rb)
    # red: own sites verbatim; horizontal neighbors in red rows, vertical
    # in blue rows; diagonal estimate at blue sites
    out[:, :, 0] = np.select(
        [is_r, g_in_red_row, g_in_blue_row], [raw, c_h, c_v], default=0.0
    )
    out[:, :, 0] = np.where(is_b, c_x, out[:, :, 0])
    out[:, :, 2] = np.select(
        [is_b, g_in_blue_row, g_in_red_row], [raw, c_h, c_v], default=0.0
    )
    out[:, :, 2] = np.where(is_r, c_x, out[:, :, 2])
    return out


def hdr_merge_bracket(
    frames: list[np.ndarray],
    exposures,
    masks: list[np.ndarray],
    alpha: float,
    beta: float,
) -> IrradianceImage:
    """Fuse pre-aligned linear RGB exposures with inverse-variance weights.

    Each frame contributes the irradiance estimate y_k/dt_k with variance
    (alpha*y_k + beta)/dt_k^2; masked (saturated) pixels are dropped and
    pixels saturated everywhere fall back to the shortest exposure, which
    clips last.
    """
    if beta <= 0:
        raise ValueError("beta must be > 0 for a well-defined variance")
    exposures = np.asarray(exposures, dtype=np.float64)
    if len(frames) != exposures.size or len(masks) != exposures.size:
        raise ValueError("frames, exposures, and masks must align")

    num = 0.0
    den = 0.0
    for y, dt, m in zip(frames, exposures, masks):
        y = np.asarray(y, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if m.ndim == y.ndim - 1:
            m = m[..., None]
        est = y / dt
        var = (alpha * y + beta) / dt ** 2
        num = num + m * est / var
        den = den + m / var
    shortest = int(np.argmin(exposures))
    fallback = np.asarray(frames[shortest], dtype=np.float64) / exposures[shortest]
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), fallback)
    return IrradianceImage(np.maximum(out, 0.0))


def select_nearest_ev(evs, targets) -> list[int]:
    """Pick, per target EV, the unused frame with the closest EV (ties: lower index)."""
    evs = list(np.asarray(evs, dtype=np.float64))
    chosen: list[int] = []
    for t in targets:
        best = None
        for i, ev in enumerate(evs):
            if i in chosen:
                continue
            if best is None or abs(ev - t) < abs(evs[best] - t):
                best = i
        if best is None:
            raise ValueError("more targets than frames")
        chosen.append(best)
    return chosen
