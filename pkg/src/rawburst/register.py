"""Multi-exposure burst alignment onto a reference frame.

The pipeline per non-reference frame: extract a single-channel feature
map at half the mosaic resolution (2x2 Bayer-block means, so all four
CFA sites contribute), estimate a global translation by sub-pixel phase
correlation, refine a global affine coarse-to-fine through a Gaussian
pyramid with forward-additive Lucas-Kanade, then refine per tile at the
finest level.  Saturated and out-of-bounds pixels are excluded from the
normal equations, which is what makes alignment work across exposure
brackets.

Warps returned to callers are expressed in high-resolution pixel units
as sampling maps (frame coords -> reference coords), matching what the
forward imaging operator consumes.  Internally LK estimates the opposite
direction (reference -> frame, the map that pulls the moving frame onto
the reference grid); the exact affine inverse is taken at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
from scipy import ndimage

from .model import (
    AffineWarpField,
    BurstMeta,
    RawFrame,
    _grid_dims,
    affine_apply,
    affine_compose,
    affine_identity,
    affine_invert,
    bilinear_sample,
    saturation_mask,
)


class NoSignalError(ValueError):
    """The image carries no usable structure for matching."""


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


@runtime_checkable
class FeatureExtractor(Protocol):
    """Plugin slot for the matching representation.

    Maps a raw frame to (features, mask): a single-channel map at half
    the mosaic resolution plus a weight in [0, 1] per feature pixel.
    Implementations must be deterministic and return finite values;
    anything callable with this shape (including learned extractors)
    can be dropped in.
    """

    def __call__(self, frame: RawFrame) -> tuple[np.ndarray, np.ndarray]: ...


def block_luma(data: np.ndarray, threshold: float = 0.98) -> tuple[np.ndarray, np.ndarray]:
    """2x2 Bayer-block means and the blockwise unsaturated mask.

    A block counts as valid only if all four CFA sites are unsaturated,
    since one clipped site already biases the mean.
    """
    h, w = data.shape
    blocks = data.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    sat = saturation_mask(data, threshold)
    mask = sat.reshape(h // 2, 2, w // 2, 2).min(axis=(1, 3))
    return blocks, mask


class PlainLuma:
    """Half-resolution luma features, normalized to cancel exposure.

    normalization='mean': divide by the mean over unsaturated blocks, so
    no metadata is trusted; 'exposure': divide by the frame's exposure,
    exact for a linear sensor.
    """

    def __init__(self, saturation_threshold: float = 0.98, normalization: str = "mean"):
        if normalization not in ("mean", "exposure"):
            raise ValueError(f"unknown normalization '{normalization}'")
        self.saturation_threshold = saturation_threshold
        self.normalization = normalization

    def __call__(self, frame: RawFrame) -> tuple[np.ndarray, np.ndarray]:
        blocks, mask = block_luma(frame.data, self.saturation_threshold)
        if self.normalization == "exposure":
            scale = frame.exposure
        else:
            valid = mask > 0
            scale = float(blocks[valid].mean()) if valid.any() else 1.0
        if scale <= 1e-12:
            scale = 1.0
        return blocks / scale, mask


def mtb(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Median threshold bitmap and its near-median exclusion mask.

    The bitmap (pixel > median) is invariant to any monotone gain; the
    exclusion band of +-4/255 flags pixels whose side of the threshold is
    noise-dominated.
    """
    gray = np.asarray(gray, dtype=np.float64)
    med = float(np.median(gray))
    bitmap = (gray > med).astype(np.float64)
    excluded = (np.abs(gray - med) <= 4.0 / 255.0).astype(np.float64)
    return bitmap, excluded


class MTBFeature:
    """Median-threshold-bitmap features over half-resolution luma."""

    def __init__(self, saturation_threshold: float = 0.98):
        self.saturation_threshold = saturation_threshold

    def __call__(self, frame: RawFrame) -> tuple[np.ndarray, np.ndarray]:
        blocks, mask = block_luma(frame.data, self.saturation_threshold)
        bitmap, excluded = mtb(blocks)
        return bitmap, mask * (1.0 - excluded)


# ---------------------------------------------------------------------------
# Phase correlation
# ---------------------------------------------------------------------------


def _quadratic_peak(r: np.ndarray, py: int, px: int) -> tuple[float, float]:
    """Sub-pixel offset of the correlation peak from a 3x3 quadratic fit."""
    h, w = r.shape
    ys = np.array([py - 1, py, py + 1]) % h
    xs = np.array([px - 1, px, px + 1]) % w
    patch = r[np.ix_(ys, xs)]
    gx, gy = np.meshgrid([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0])
    design = np.stack(
        [gx ** 2, gy ** 2, gx * gy, gx, gy, np.ones_like(gx)], axis=-1
    ).reshape(9, 6)
    coef, *_ = np.linalg.lstsq(design, patch.reshape(9), rcond=None)
    a, b, c, d, e, _ = coef
    hess = np.array([[2 * a, c], [c, 2 * b]])
    det = np.linalg.det(hess)
    if det <= 0 or not np.isfinite(det):  # not a proper maximum
        return 0.0, 0.0
    ox, oy = np.linalg.solve(hess, [-d, -e])
    if not (np.isfinite(ox) and np.isfinite(oy)) or abs(ox) > 1 or abs(oy) > 1:
        return 0.0, 0.0
    return float(oy), float(ox)


def phase_correlate(ref_feat: np.ndarray, mov_feat: np.ndarray) -> tuple[float, float]:
    """Sub-pixel translation (dy, dx) of mov relative to ref.

    Positive output means the content moved by that amount, so sampling
    mov at u + (dx, dy) aligns it with ref at u.
    """
    ref = np.asarray(ref_feat, dtype=np.float64)
    mov = np.asarray(mov_feat, dtype=np.float64)
    if ref.shape != mov.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {mov.shape}")
    a = ref - ref.mean()
    b = mov - mov.mean()
    if np.abs(a).max() < 1e-12 or np.abs(b).max() < 1e-12:
        raise NoSignalError("input has no structure to correlate")
    h, w = ref.shape
    win = np.outer(np.hanning(h), np.hanning(w))
    fa = np.fft.fft2(a * win)
    fb = np.fft.fft2(b * win)
    cross = fb * np.conj(fa)
    mag = np.abs(cross)
    mmax = mag.max()
    if mmax <= 0:
        raise NoSignalError("cross-power spectrum is empty")
    r = np.fft.ifft2(cross / np.maximum(mag, 1e-12 * mmax)).real
    py, px = np.unravel_index(np.argmax(r), r.shape)
    oy, ox = _quadratic_peak(r, int(py), int(px))
    dy = py + oy
    dx = px + ox
    if dy > h / 2:
        dy -= h
    if dx > w / 2:
        dx -= w
    return float(dy), float(dx)


# ---------------------------------------------------------------------------
# Gaussian pyramid
# ---------------------------------------------------------------------------

_BINOM5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _smooth5(img: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, _BINOM5, axis=0, mode="reflect")
    return ndimage.correlate1d(out, _BINOM5, axis=1, mode="reflect")


@dataclass(frozen=True)
class GaussianPyramid:
    """Coarse-to-fine stack: level 0 is the input, each level halves (floor)."""

    levels: tuple

    @classmethod
    def build(cls, img: np.ndarray, levels: int = 4) -> "GaussianPyramid":
        out = [np.asarray(img, dtype=np.float64)]
        for _ in range(levels - 1):
            h, w = out[-1].shape
            if h // 2 < 2 or w // 2 < 2:
                break
            sm = _smooth5(out[-1])
            out.append(np.ascontiguousarray(sm[::2, ::2][: h // 2, : w // 2]))
        return cls(tuple(out))

    @classmethod
    def build_mask(cls, mask: np.ndarray, levels: int = 4) -> "GaussianPyramid":
        """Mask pyramid: a coarse pixel stays valid only if fully backed."""
        out = [np.asarray(mask, dtype=np.float64)]
        for _ in range(levels - 1):
            h, w = out[-1].shape
            if h // 2 < 2 or w // 2 < 2:
                break
            sm = _smooth5(out[-1])
            down = sm[::2, ::2][: h // 2, : w // 2]
            out.append((down >= 0.999).astype(np.float64))
        return cls(tuple(out))

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def scale_affine(m: np.ndarray, factor: float) -> np.ndarray:
    """Conjugate an affine by coordinate scaling: translation scales, linear part doesn't."""
    out = np.asarray(m, dtype=np.float64).copy()
    out[:, 2] *= factor
    return out


# ---------------------------------------------------------------------------
# Forward-additive Lucas-Kanade
# ---------------------------------------------------------------------------

# fewest weighted samples worth fitting 6 affine parameters against
MIN_SUPPORT = 24.0


def lk_affine(
    ref_feat: np.ndarray,
    mov_feat: np.ndarray,
    init_p: np.ndarray,
    iters: int = 3,
    *,
    ref_origin: tuple[int, int] = (0, 0),
    ref_mask: np.ndarray | None = None,
    mov_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """Gauss-Newton refinement of an affine map ref coords -> mov coords.

    Minimizes the weighted mean of (mov(p(u)) - ref(u))^2 over the
    template pixels u.  The weights (template mask times the moving
    frame's mask and bounds validity sampled at the init warp) are fixed
    for the whole call: re-estimating them per step would let the solver
    "win" by shrinking its own support, and a sample pushed out of
    bounds reads as 0 against the template, which penalizes drifting off
    the frame.  ref_feat may be a tile view of a larger map; ref_origin
    gives its (row, col) offset so the affine stays in global
    coordinates.  Runs `iters` iterations; a step that increases the
    objective is halved up to 4 times and the solve stops if it still
    does not descend.  Returns (p, diagnostics); a singular normal
    system or too little mask support returns the init with a flag.
    """
    ref = np.asarray(ref_feat, dtype=np.float64)
    mov = np.asarray(mov_feat, dtype=np.float64)
    if not (np.isfinite(ref).all() and np.isfinite(mov).all()):
        raise ValueError("feature maps must be finite")
    p = np.asarray(init_p, dtype=np.float64).copy()

    oy, ox = ref_origin
    th, tw = ref.shape
    xs = ox + np.arange(tw, dtype=np.float64)
    ys = oy + np.arange(th, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    # solve in template-centered coordinates: keeps the 6x6 system
    # well-conditioned; converted back exactly on exit
    cx = xs.mean()
    cy = ys.mean()
    xc = gx - cx
    yc = gy - cy
    center = affine_apply(p, [(cx, cy)])[0]
    theta = np.array([p[0, 0], p[0, 1], center[0], p[1, 0], p[1, 1], center[1]])

    grad_y, grad_x = np.gradient(mov)
    refm = np.ones_like(ref) if ref_mask is None else np.asarray(ref_mask, dtype=np.float64)

    def warp_coords(th_vec):
        sx = th_vec[0] * xc + th_vec[1] * yc + th_vec[2]
        sy = th_vec[3] * xc + th_vec[4] * yc + th_vec[5]
        return sx, sy

    sx, sy = warp_coords(theta)
    vals, valid = bilinear_sample(mov, sx, sy)
    wq = valid * refm
    if mov_mask is not None:
        mval, _ = bilinear_sample(np.asarray(mov_mask, dtype=np.float64), sx, sy)
        wq = wq * mval
    support = float(wq.sum())

    def objective(err):
        return float((wq * err * err).sum() / support) if support > 0 else 0.0

    err = vals - ref
    diag = {
        "iterations": 0,
        "increment_norms": [],
        "objective_trace": [objective(err)],
        "singular": False,
        "step_rejected": False,
        "support": support,
        "low_support": False,
    }
    if support < MIN_SUPPORT:
        diag["low_support"] = True
        diag["residual"] = diag["objective_trace"][-1]
        return p, diag

    for it in range(iters):
        gxs, _ = bilinear_sample(grad_x, sx, sy)
        gys, _ = bilinear_sample(grad_y, sx, sy)
        jac = np.stack(
            [gxs * xc, gxs * yc, gxs, gys * xc, gys * yc, gys], axis=-1
        )
        hess = np.einsum("ijk,ij,ijl->kl", jac, wq, jac)
        rhs = -np.einsum("ijk,ij->k", jac, wq * err)
        hess = hess + 1e-6 * np.trace(hess) * np.eye(6)
        try:
            delta = np.linalg.solve(hess, rhs)
        except np.linalg.LinAlgError:
            diag["singular"] = True
            break
        if not np.isfinite(delta).all():
            diag["singular"] = True
            break

        prev = diag["objective_trace"][-1]
        step = 1.0
        accepted = False
        for _ in range(5):  # full step, then up to 4 halvings
            cand = theta + step * delta
            sx2, sy2 = warp_coords(cand)
            vals2, _ = bilinear_sample(mov, sx2, sy2)
            err2 = vals2 - ref
            obj2 = objective(err2)
            if obj2 <= prev:
                theta, err, sx, sy = cand, err2, sx2, sy2
                diag["increment_norms"].append(float(np.linalg.norm(step * delta)))
                diag["objective_trace"].append(obj2)
                accepted = True
                break
            step *= 0.5
        diag["iterations"] = it + 1
        if not accepted:
            diag["step_rejected"] = True
            break

    out = np.empty((2, 3))
    out[0, :2] = theta[0:2]
    out[1, :2] = theta[3:5]
    out[:, 2] = np.array([theta[2], theta[5]]) - out[:, :2] @ np.array([cx, cy])
    diag["residual"] = diag["objective_trace"][-1]
    if diag["singular"]:
        return p, diag
    return out, diag


# ---------------------------------------------------------------------------
# Burst registration
# ---------------------------------------------------------------------------


@dataclass
class RegistrationResult:
    """Estimated warp fields plus convergence diagnostics per frame."""

    fields: list
    diagnostics: list


def _feature_to_hr(s: int) -> np.ndarray:
    """Coordinate map feature grid -> HR grid: u_hr = 2*s*u_feat + s/2.

    A feature pixel is the centroid of a 2x2 mosaic block; mosaic pixel m
    sits at HR coordinate s*m, so the block centroid lands at 2*s*i + s/2.
    """
    return np.array([[2.0 * s, 0.0, s / 2.0], [0.0, 2.0 * s, s / 2.0]])


def feature_to_hr_field(q: np.ndarray, s: int) -> np.ndarray:
    """Stored-field affine (frame->ref, HR units) from an LK result (ref->mov, feature units)."""
    fwd = _feature_to_hr(s)
    return affine_compose(fwd, affine_compose(affine_invert(q), affine_invert(fwd)))


def hr_field_to_feature(p: np.ndarray, s: int) -> np.ndarray:
    """Inverse of feature_to_hr_field: LK-space affine from a stored field."""
    fwd = _feature_to_hr(s)
    return affine_compose(affine_invert(fwd), affine_compose(affine_invert(p), fwd))


# sanity bounds for accepted LK updates: burst motion is near-identity,
# so a linear part far from the identity or a center jump of a large
# fraction of the template is misconvergence, not motion
_MAX_LINEAR_DEV = 0.15
_MAX_CENTER_STEP = 0.35


def _plausible(q_init: np.ndarray, q_new: np.ndarray, span: float, center) -> bool:
    if not np.isfinite(q_new).all():
        return False
    if np.abs(q_new[:, :2] - np.eye(2)).max() > _MAX_LINEAR_DEV:
        return False
    c0 = affine_apply(q_init, [center])[0]
    c1 = affine_apply(q_new, [center])[0]
    return float(np.hypot(c1[0] - c0[0], c1[1] - c0[1])) <= _MAX_CENTER_STEP * span


def _erode_border(mask: np.ndarray, margin: int) -> np.ndarray:
    """Zero a band at the map boundary, where warped-in content is unreliable."""
    if margin <= 0:
        return mask
    out = mask.copy()
    out[:margin, :] = 0.0
    out[-margin:, :] = 0.0
    out[:, :margin] = 0.0
    out[:, -margin:] = 0.0
    return out


def _gain_align(f0, m0, fk, mk) -> tuple[np.ndarray, float]:
    """Scale moving features so their mean matches the reference on the
    jointly valid region; per-frame normalization alone is biased when
    the two frames saturate in different places."""
    joint = (m0 * mk) > 0
    if joint.sum() >= 16:
        num = float(f0[joint].mean())
        den = float(fk[joint].mean())
        if num > 1e-12 and den > 1e-12:
            return fk * (num / den), num / den
    return fk, 1.0


def _tile_bounds_feature(
    hr_shape: tuple[int, int], tile_size: int, s: int, feat_shape: tuple[int, int]
):
    """Per-HR-tile (row, col) slices of the feature map."""
    ny, nx = _grid_dims(hr_shape, tile_size)
    step = 2 * s  # one feature pixel spans 2s HR pixels
    bounds = []
    for ti in range(ny):
        r0 = (ti * tile_size) // step
        r1 = min(-(-min((ti + 1) * tile_size, hr_shape[0]) // step), feat_shape[0])
        row = []
        for tj in range(nx):
            c0 = (tj * tile_size) // step
            c1 = min(-(-min((tj + 1) * tile_size, hr_shape[1]) // step), feat_shape[1])
            row.append((r0, r1, c0, c1))
        bounds.append(row)
    return ny, nx, bounds


def register_burst(
    frames: list[RawFrame],
    meta: BurstMeta,
    extractor=None,
    levels: int = 4,
    iters_per_level: int = 3,
    tile_size: int = 200,
    edge_margin: int = 5,
) -> RegistrationResult:
    """Align every frame onto the reference; fields come out in HR units.

    Schedule: phase-correlation translation init, whole-image LK from the
    coarsest pyramid level down to level 1, then per-tile LK at level 0
    initialized from the global affine.  A band of edge_margin feature
    pixels is masked out at the map boundary (warped-in frame borders
    carry no scene content), moving features are gain-matched to the
    reference over the jointly valid region, and any LK update that
    leaves the near-identity regime reverts to its init with a flag.
    Frames whose features carry no signal keep the identity warp.
    """
    if len(frames) != meta.nframes:
        raise ValueError("frames and meta disagree on burst length")
    if meta.nframes < 2:
        raise ValueError("registration needs at least 2 frames")
    extractor = extractor if extractor is not None else PlainLuma()
    s = meta.scale
    h, w = frames[meta.k0].shape
    hr_shape = (s * h, s * w)

    feats = [extractor(f) for f in frames]
    f0, m0 = feats[meta.k0]
    m0 = _erode_border(m0, edge_margin)
    ref_pyr = GaussianPyramid.build(f0, levels)
    ref_mpyr = GaussianPyramid.build_mask(m0, levels)

    fields: list = [None] * meta.nframes
    diags: list = [None] * meta.nframes
    fields[meta.k0] = AffineWarpField.identity(hr_shape, tile_size, reference=True)
    diags[meta.k0] = {"reference": True}

    for k in range(meta.nframes):
        if k == meta.k0:
            continue
        fk, mk = feats[k]
        mk = _erode_border(mk, edge_margin)
        fk, gain = _gain_align(f0, m0, fk, mk)
        dia: dict = {"levels": [], "tiles": [], "no_signal": False, "gain": gain}
        try:
            dy, dx = phase_correlate(f0, fk)
        except NoSignalError:
            dy, dx = 0.0, 0.0
            dia["no_signal"] = True
        dia["phase_shift"] = [dy, dx]
        q = np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]])

        mov_pyr = GaussianPyramid.build(fk, levels)
        mov_mpyr = GaussianPyramid.build_mask(mk, levels)
        nlev = min(len(ref_pyr), len(mov_pyr))

        for lev in range(nlev - 1, 0, -1):
            ref_l = ref_pyr[lev]
            if min(ref_l.shape) < 12:  # too small to constrain an affine
                dia["levels"].append({"level": lev, "skipped": True})
                continue
            q_l = scale_affine(q, 0.5 ** lev)
            init_l = q_l.copy()
            q_l, ldiag = lk_affine(
                ref_l,
                mov_pyr[lev],
                q_l,
                iters_per_level,
                ref_mask=ref_mpyr[lev],
                mov_mask=mov_mpyr[lev],
            )
            lh, lw = ref_l.shape
            center = ((lw - 1) / 2.0, (lh - 1) / 2.0)
            if not _plausible(init_l, q_l, min(lh, lw), center):
                q_l = init_l
                ldiag["rejected"] = True
            q = scale_affine(q_l, 2.0 ** lev)
            dia["levels"].append(
                {"level": lev, "init": init_l.tolist(), "result": q_l.tolist(), **ldiag}
            )
        dia["global"] = q.tolist()

        ny, nx, bounds = _tile_bounds_feature(hr_shape, tile_size, s, f0.shape)
        params = np.empty((ny, nx, 2, 3))
        for ti in range(ny):
            for tj in range(nx):
                r0, r1, c0, c1 = bounds[ti][tj]
                qt, tdiag = lk_affine(
                    f0[r0:r1, c0:c1],
                    fk,
                    q,
                    iters_per_level,
                    ref_origin=(r0, c0),
                    ref_mask=m0[r0:r1, c0:c1],
                    mov_mask=mk,
                )
                span = min(r1 - r0, c1 - c0)
                center = ((c0 + c1 - 1) / 2.0, (r0 + r1 - 1) / 2.0)
                det = qt[0, 0] * qt[1, 1] - qt[0, 1] * qt[1, 0]
                if abs(det) <= 1e-6 or not _plausible(q, qt, span, center):
                    qt = q.copy()
                    tdiag["rejected"] = True
                params[ti, tj] = feature_to_hr_field(qt, s)
                dia["tiles"].append({"tile": [ti, tj], **tdiag})
        fields[k] = AffineWarpField(hr_shape, params, tile_size)
        diags[k] = dia

    return RegistrationResult(fields, diags)


def refine_fields(
    frames: list[RawFrame],
    meta: BurstMeta,
    fields: list[AffineWarpField],
    extractor=None,
    iters: int = 1,
    edge_margin: int = 5,
) -> list[AffineWarpField]:
    """One extra LK pass per tile, initialized from the current estimates."""
    extractor = extractor if extractor is not None else PlainLuma()
    s = meta.scale
    feats = [extractor(f) for f in frames]
    f0, m0 = feats[meta.k0]
    m0 = _erode_border(m0, edge_margin)
    out = list(fields)
    for k in range(meta.nframes):
        if k == meta.k0:
            continue
        fk, mk = feats[k]
        mk = _erode_border(mk, edge_margin)
        fk, _gain = _gain_align(f0, m0, fk, mk)
        fld = fields[k]
        ny, nx, bounds = _tile_bounds_feature(fld.shape, fld.tile_size, s, f0.shape)
        params = np.empty((ny, nx, 2, 3))
        for ti in range(ny):
            for tj in range(nx):
                r0, r1, c0, c1 = bounds[ti][tj]
                q = hr_field_to_feature(fld.params[ti, tj], s)
                qt, _ = lk_affine(
                    f0[r0:r1, c0:c1],
                    fk,
                    q,
                    iters,
                    ref_origin=(r0, c0),
                    ref_mask=m0[r0:r1, c0:c1],
                    mov_mask=mk,
                )
                span = min(r1 - r0, c1 - c0)
                center = ((c0 + c1 - 1) / 2.0, (r0 + r1 - 1) / 2.0)
                det = qt[0, 0] * qt[1, 1] - qt[0, 1] * qt[1, 0]
                if abs(det) <= 1e-6 or not _plausible(q, qt, span, center):
                    qt = q
                params[ti, tj] = feature_to_hr_field(qt, s)
        out[k] = AffineWarpField(fld.shape, params, fld.tile_size)
    return out
