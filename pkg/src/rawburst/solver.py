"""Iterative burst reconstruction by half-quadratic splitting.

The latent HR/HDR image x is estimated from the registered burst by
alternating two sub-problems with an auxiliary variable z and a growing
coupling weight eta:

    z-step: a few gradient-descent iterations on the weighted data term
            sum_k ||w_k (A_k z - y_k)||^2 / 2 + eta ||z - x||^2 / 2,
    x-step: x = prox(z, gamma), a pluggable denoising/prior operator.

Fusion weights w_k blend frames by exposure and saturation: long
exposures dominate where they are clean, saturated pixels drop out, and
fully clipped pixels fall back to a uniform average so no pixel is left
without data.  The step size comes from a power-iteration estimate of
the data term's Lipschitz constant, which guarantees descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .merge import demosaic_bilinear
from .model import (
    AffineWarpField,
    BurstMeta,
    BurstOperator,
    IrradianceImage,
    RawFrame,
    _grid_dims,
    bilinear_sample_clamped,
    cfa_apply,
    saturation_mask,
    warp_apply,
)
from .register import refine_fields, register_burst


class DivergedError(RuntimeError):
    """The gradient iteration produced non-finite values."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace else []


# ---------------------------------------------------------------------------
# Plugin interfaces with classical defaults
# ---------------------------------------------------------------------------


@runtime_checkable
class Prior(Protocol):
    """x-step plugin: approximate prox of gamma * Omega at z.

    Any callable (z, gamma) -> array of z's shape qualifies, including
    learned denoisers; gamma scales the prior's strength.
    """

    def __call__(self, z: np.ndarray, gamma: float) -> np.ndarray: ...


@runtime_checkable
class Confidence(Protocol):
    """Fusion-weight plugin: per-pixel agreement gain in [0, 1].

    Receives a frame and the reference prediction, both mapped to
    irradiance units on the frame's grid.
    """

    def __call__(self, frame_irr: np.ndarray, ref_irr: np.ndarray) -> np.ndarray: ...


class IdentityPrior:
    """No prior: the x-step passes z through."""

    def __call__(self, z: np.ndarray, gamma: float) -> np.ndarray:
        return z


class TvL1Prior:
    """Anisotropic total-variation prox (gradient soft-thresholding)."""

    def __init__(self, iters: int = 20):
        self.iters = iters

    def __call__(self, z: np.ndarray, gamma: float) -> np.ndarray:
        return prox_tv_l1(z, gamma, self.iters)


class UnitConfidence:
    """No content-based down-weighting."""

    def __call__(self, frame_irr: np.ndarray, ref_irr: np.ndarray) -> np.ndarray:
        return np.ones(np.asarray(frame_irr).shape[:2])


class ResidualConfidence:
    """Down-weight pixels that disagree with the warped reference.

    Both inputs are exposure-normalized (irradiance units), so a single
    sigma covers all frames of a bracket.
    """

    def __init__(self, sigma: float = 0.05):
        if sigma <= 0:
            raise ValueError("sigma must be > 0")
        self.sigma = sigma

    def __call__(self, frame_irr: np.ndarray, ref_irr: np.ndarray) -> np.ndarray:
        r = np.asarray(frame_irr, dtype=np.float64) - np.asarray(ref_irr, dtype=np.float64)
        return np.exp(-(r ** 2) / (2.0 * self.sigma ** 2))


@dataclass
class HqsConfig:
    """Solver schedule and plugin slots.

    eta and gamma must provide one value per stage; eta grows so the
    auxiliary variable is pulled ever closer to the prior's output.
    """

    stages: int = 3
    gd_steps: int = 3
    step_size: float | None = None
    eta: tuple = (1.0, 2.0, 4.0)
    gamma: tuple = (0.05, 0.02, 0.01)
    prior: object = field(default_factory=IdentityPrior)
    confidence: object = field(default_factory=UnitConfidence)
    refine_warps: bool = False
    saturation_threshold: float = 0.98
    power_iters: int = 20
    seed: int = 0
    trace_objective: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("need at least one stage")
        if self.gd_steps < 1:
            raise ValueError("need at least one gradient step per stage")
        if len(self.eta) != self.stages or len(self.gamma) != self.stages:
            raise ValueError("eta and gamma must provide one value per stage")
        eta = np.asarray(self.eta, dtype=np.float64)
        if (eta <= 0).any() or (np.diff(eta) < 0).any():
            raise ValueError("eta must be positive and non-decreasing")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step size must be > 0")


# ---------------------------------------------------------------------------
# Fusion weights and initialization
# ---------------------------------------------------------------------------


def _field_to_lr(fld: AffineWarpField, s: int) -> AffineWarpField:
    """Express an HR-unit field on the mosaic grid (u_hr = s * u_lr)."""
    if s == 1:
        return fld
    if fld.tile_size % s:
        raise ValueError(f"tile size {fld.tile_size} not divisible by scale {s}")
    params = fld.params.copy()
    params[..., 2] /= s
    shape = (fld.shape[0] // s, fld.shape[1] // s)
    return AffineWarpField(shape, params, fld.tile_size // s, fld.reference)


def fusion_weights(
    frames: list[RawFrame],
    meta: BurstMeta,
    fields: list[AffineWarpField],
    confidence=None,
    *,
    saturation_threshold: float = 0.98,
    validity: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Per-frame, per-pixel weights for the data term, shape (K, h, w).

    The exposure-weighted factor dt_k m_k / sum_j dt_j m_j sums to one
    wherever at least one frame is unsaturated and degrades to uniform
    1/K where all are clipped; confidence and warp validity multiply on
    top.
    """
    confidence = confidence if confidence is not None else UnitConfidence()
    dts = meta.exposures
    k = meta.nframes
    masks = np.stack(
        [saturation_mask(f.data, saturation_threshold) for f in frames]
    )
    den = np.einsum("k,khw->hw", dts, masks)
    base = np.where(den > 0, dts[:, None, None] * masks / np.where(den > 0, den, 1.0), 1.0 / k)

    if isinstance(confidence, UnitConfidence):
        weights = base
    else:
        ref_rgb = demosaic_bilinear(frames[meta.k0].data, meta.sensor.pattern)
        ref_irr = ref_rgb / dts[meta.k0]
        gains = np.empty_like(base)
        for i in range(k):
            if i == meta.k0:
                gains[i] = 1.0
                continue
            lr_field = _field_to_lr(fields[i], meta.scale)
            warped, _ = warp_apply(ref_irr, lr_field)
            pred = cfa_apply(warped, meta.sensor.pattern)
            g = confidence(frames[i].data / dts[i], pred)
            gains[i] = np.clip(g, 0.0, 1.0)
        weights = base * gains

    if validity is not None:
        weights = weights * np.stack(validity)
    return weights


def upscale_bilinear(img: np.ndarray, s: int) -> np.ndarray:
    """Upscale by s with bilinear interpolation; LR pixel i lands on HR s*i."""
    if s == 1:
        return img.copy()
    h, w = img.shape[:2]
    ys = np.arange(s * h, dtype=np.float64) / s
    xs = np.arange(s * w, dtype=np.float64) / s
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample_clamped(img, gx, gy)


def init_z(
    frames: list[RawFrame], meta: BurstMeta, fields: list[AffineWarpField]
) -> np.ndarray:
    """Starting point: demosaic, exposure-normalize, align, average, upscale.

    Saturated pixels are dropped from the average (a clipped sample read
    through 1/dt badly underestimates bright content); where every frame
    clipped, the all-frame average stands in so the start stays finite.
    """
    dts = meta.exposures
    num = 0.0
    den = 0.0
    num_all = 0.0
    den_all = 0.0
    for k, frame in enumerate(frames):
        rgb = demosaic_bilinear(frame.data, meta.sensor.pattern) / dts[k]
        sat = saturation_mask(frame.data).astype(np.float64)
        if k == meta.k0:
            warped, val = rgb, np.ones(frame.shape)
            wsat = sat
        else:
            # sample frame k where the reference grid lands in its geometry
            lr_field = _field_to_lr(fields[k].inverse(), meta.scale)
            warped, val = warp_apply(rgb, lr_field)
            wsat, _ = warp_apply(sat, lr_field)
        num = num + dts[k] * val[..., None] * wsat[..., None] * warped
        den = den + dts[k] * val * wsat
        num_all = num_all + dts[k] * val[..., None] * warped
        den_all = den_all + dts[k] * val
    fallback = num_all / np.where(den_all > 0, den_all, 1.0)[..., None]
    avg = np.where(
        (den > 1e-9)[..., None],
        num / np.where(den > 0, den, 1.0)[..., None],
        fallback,
    )
    return upscale_bilinear(avg, meta.scale)


# ---------------------------------------------------------------------------
# Gradient descent on the coupled data term
# ---------------------------------------------------------------------------


def surrogate_objective(
    z: np.ndarray,
    x: np.ndarray,
    op: BurstOperator,
    weights: np.ndarray,
    ys: list[np.ndarray],
    eta: float,
) -> float:
    """Data term plus coupling: the quantity the z-step descends."""
    total = 0.0
    for k in range(op.meta.nframes):
        r = weights[k] * (op.apply(z, k) - ys[k])
        total += 0.5 * float(np.vdot(r, r))
    d = z - x
    return total + 0.5 * eta * float(np.vdot(d, d))


def z_update(
    z: np.ndarray,
    x: np.ndarray,
    op: BurstOperator,
    weights: np.ndarray,
    ys: list[np.ndarray],
    delta: float,
    eta: float,
    steps: int,
    trace: list | None = None,
) -> np.ndarray:
    """`steps` gradient iterations of the coupled weighted least squares."""
    w2 = [weights[k] * weights[k] for k in range(op.meta.nframes)]
    for _ in range(steps):
        grad = eta * (z - x)
        for k in range(op.meta.nframes):
            grad += op.adjoint(w2[k] * (op.apply(z, k) - ys[k]), k)
        z = z - delta * grad
        if not np.isfinite(z).all():
            raise DivergedError("z-step produced non-finite values", trace)
        if trace is not None:
            trace.append(surrogate_objective(z, x, op, weights, ys, eta))
    return z


def lipschitz_estimate(
    op: BurstOperator,
    weights: np.ndarray,
    iters: int = 20,
    seed: int = 0,
) -> tuple[float, list[float]]:
    """Power iteration on sum_k A_k^T w_k^2 A_k; returns (L, per-iter history)."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.hr_shape + (3,))
    v /= np.linalg.norm(v)
    w2 = [weights[k] * weights[k] for k in range(op.meta.nframes)]
    history: list[float] = []
    for _ in range(iters):
        mv = op.normal_apply(v, w2)
        history.append(float(np.vdot(v, mv)))
        norm = np.linalg.norm(mv)
        if norm == 0:
            return 0.0, history
        v = mv / norm
    return history[-1], history


# ---------------------------------------------------------------------------
# Total-variation prox
# ---------------------------------------------------------------------------


def _grad2(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return u[1:, :] - u[:-1, :], u[:, 1:] - u[:, :-1]


def _grad2_t(pv: np.ndarray, ph: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape)
    out[1:, :] += pv
    out[:-1, :] -= pv
    out[:, 1:] += ph
    out[:, :-1] -= ph
    return out


def _fgp_channel(b: np.ndarray, gamma: float, iters: int) -> np.ndarray:
    h, w = b.shape
    pv = np.zeros((h - 1, w))
    ph = np.zeros((h, w - 1))
    rv, rh = pv, ph
    t = 1.0
    inv_step = 1.0 / (8.0 * gamma)  # 8 bounds the gradient operator's norm
    for _ in range(iters):
        u = b - gamma * _grad2_t(rv, rh, (h, w))
        dv, dh = _grad2(u)
        pv_new = np.clip(rv + inv_step * dv, -1.0, 1.0)
        ph_new = np.clip(rh + inv_step * dh, -1.0, 1.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        m = (t - 1.0) / t_new
        rv = pv_new + m * (pv_new - pv)
        rh = ph_new + m * (ph_new - ph)
        pv, ph, t = pv_new, ph_new, t_new
    return b - gamma * _grad2_t(pv, ph, (h, w))


def prox_tv_l1(z: np.ndarray, gamma: float, iters: int = 20) -> np.ndarray:
    """Approximate argmin_x ||x-z||^2/2 + gamma * TV_aniso(x), per channel.

    Accelerated projection on the dual box constraint; gamma=0 returns z
    exactly.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    if gamma == 0:
        return z.copy()
    if z.ndim == 2:
        return _fgp_channel(z, gamma, iters)
    out = np.empty_like(z)
    for c in range(z.shape[2]):
        out[..., c] = _fgp_channel(z[..., c], gamma, iters)
    return out


# ---------------------------------------------------------------------------
# Full reconstruction
# ---------------------------------------------------------------------------


def reconstruct(
    frames: list[RawFrame],
    meta: BurstMeta,
    config: HqsConfig | None = None,
    *,
    fields: list[AffineWarpField] | None = None,
    extractor=None,
    levels: int = 4,
    lk_iters: int = 3,
    tile_size: int = 200,
) -> tuple[IrradianceImage, dict]:
    """Register (unless warps are supplied), initialize, and run the stages.

    Returns the reconstruction and an info dict with the registration
    diagnostics, step size, Lipschitz estimate, per-stage objective
    traces, and the warp fields actually used.
    """
    config = config if config is not None else HqsConfig()
    if len(frames) != meta.nframes:
        raise ValueError("frames and meta disagree on burst length")
    info: dict = {}
    if fields is None:
        if meta.nframes >= 2:
            reg = register_burst(
                frames, meta, extractor, levels, lk_iters, tile_size
            )
            fields = reg.fields
            info["registration"] = reg.diagnostics
        else:
            h, w = frames[0].shape
            fields = [
                AffineWarpField.identity(
                    (meta.scale * h, meta.scale * w), tile_size, reference=True
                )
            ]

    ys = [f.data for f in frames]
    op = BurstOperator(meta, fields)
    z = init_z(frames, meta, fields)
    x = z
    lipschitz = None
    traces: list[list[float]] = []
    delta = config.step_size

    for t in range(config.stages):
        eta = float(config.eta[t])
        gamma = float(config.gamma[t])
        validity = [op.validity(k) for k in range(meta.nframes)]
        weights = fusion_weights(
            frames,
            meta,
            fields,
            config.confidence,
            saturation_threshold=config.saturation_threshold,
            validity=validity,
        )
        if config.step_size is None:
            if lipschitz is None:
                lipschitz, history = lipschitz_estimate(
                    op, weights, config.power_iters, config.seed
                )
                info["lipschitz"] = lipschitz
                info["lipschitz_history"] = history
            delta = 0.9 / (lipschitz + eta)
        trace_t: list | None = [] if config.trace_objective else None
        z = z_update(z, x, op, weights, ys, delta, eta, config.gd_steps, trace_t)
        x = config.prior(z, gamma)
        traces.append(trace_t if trace_t is not None else [])
        if config.refine_warps and t < config.stages - 1:
            fields = refine_fields(frames, meta, fields, extractor)
            op = BurstOperator(meta, fields)
            lipschitz = None  # operator changed

    info["objective_trace"] = traces
    info["fields"] = fields
    info["delta"] = float(delta)
    out = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    if not np.isfinite(out).all():
        raise DivergedError("reconstruction contains non-finite values")
    return IrradianceImage(out), info
