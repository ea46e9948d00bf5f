"""Image formation model: sensor radiometry and the burst imaging operator.

A raw burst frame is the quantized, mosaicked record of the analog
irradiance reaching the sensor during one exposure window.  Frame k of a
burst is modeled as

    y_k = S(a_k + noise),    a_k = C D_s B W_k (dt_k x),

where x is the latent high-resolution linear-light image, W_k a
piecewise-affine warp, B an s x s box blur standing in for pixel-area
integration, D_s decimation by the super-resolution factor s, C the
Bayer color filter selection, dt_k the exposure, and S quantization to
the sensor's digital-number range.  This module provides the domain
types, the scalar radiometric formulas (quantization, normalization,
noise, SNR, saturation), and every linear operator of the chain together
with its exact adjoint.  Adjoints are exact in the strict matrix sense,
including boundary handling, so gradient-based solvers can rely on them.

Conventions used throughout:

- arrays are indexed [row, col] but affine maps act on (x, y) = (col,
  row) coordinate pairs;
- a warp field stores, for each output pixel of its own grid, the affine
  sampling map into the source image (output coords -> source coords);
- decimation keeps samples at offsets 0, s, 2s, ... per axis, so a
  low-resolution pixel i corresponds to high-resolution coordinate s*i.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


class BayerPattern(enum.Enum):
    """2x2 color filter tile, named top-left to bottom-right."""

    RGGB = "RGGB"
    BGGR = "BGGR"
    GRBG = "GRBG"
    GBRG = "GBRG"

    @property
    def tile(self) -> np.ndarray:
        """2x2 array of channel indices (0=R, 1=G, 2=B)."""
        idx = {"R": 0, "G": 1, "B": 2}
        flat = [idx[c] for c in self.value]
        return np.array(flat, dtype=np.uint8).reshape(2, 2)


def channel_map(pattern: BayerPattern, shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel channel index (0=R, 1=G, 2=B) for a mosaic of `shape`."""
    h, w = shape
    reps = ((h + 1) // 2, (w + 1) // 2)
    return np.tile(pattern.tile, reps)[:h, :w]


@dataclass(frozen=True)
class SensorConfig:
    """Quantization and noise description of the sensor.

    alpha and beta are the shot- and read-noise variance coefficients on
    the [0,1]-normalized signal: var(noise) = alpha*y + beta.
    """

    bit_depth: int = 12
    black_level: int = 0
    white_level: int = 4095
    alpha: float = 0.0
    beta: float = 0.0
    pattern: BayerPattern = BayerPattern.RGGB

    def __post_init__(self):
        if self.bit_depth < 8:
            raise ValueError(f"bit depth must be >= 8, got {self.bit_depth}")
        full = (1 << self.bit_depth) - 1
        if not 0 <= self.black_level < self.white_level <= full:
            raise ValueError(
                f"need 0 <= black ({self.black_level}) < white "
                f"({self.white_level}) <= {full}"
            )
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("noise variance coefficients must be >= 0")

    @property
    def dn_range(self) -> int:
        return self.white_level - self.black_level


@dataclass(frozen=True)
class RawFrame:
    """One mosaicked burst member, normalized to [0,1], with its exposure."""

    data: np.ndarray
    exposure: float
    sensor: SensorConfig

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 2:
            raise ValueError(f"raw frame must be 2-D, got shape {data.shape}")
        h, w = data.shape
        if h % 2 or w % 2:
            raise ValueError(f"frame dims must be even (whole Bayer tiles), got {h}x{w}")
        if not np.isfinite(data).all():
            raise ValueError("raw frame contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("raw frame values must lie in [0,1]")
        if not self.exposure > 0:
            raise ValueError(f"exposure must be > 0, got {self.exposure}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class IrradianceImage:
    """Latent linear-light scene estimate: (H, W, 3) non-negative floats."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"irradiance image must be (H, W, 3), got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("irradiance image contains non-finite values")
        if data.min() < 0.0:
            raise ValueError("irradiance values must be >= 0")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass(frozen=True)
class BurstMeta:
    """Burst-level description: exposures, reference index, SR factor."""

    exposures: np.ndarray
    k0: int
    scale: int
    sensor: SensorConfig

    def __post_init__(self):
        exposures = np.asarray(self.exposures, dtype=np.float64)
        object.__setattr__(self, "exposures", exposures)
        if exposures.ndim != 1 or exposures.size < 1:
            raise ValueError("need at least one exposure")
        if not (exposures > 0).all():
            raise ValueError("all exposures must be > 0")
        if not 0 <= self.k0 < exposures.size:
            raise ValueError(f"reference index {self.k0} out of range [0, {exposures.size})")
        if int(self.scale) != self.scale or self.scale < 1:
            raise ValueError(f"scale must be a positive integer, got {self.scale}")
        object.__setattr__(self, "scale", int(self.scale))

    @property
    def nframes(self) -> int:
        return int(self.exposures.size)


def ev_to_exposure(ev: float) -> float:
    """Exposure value to relative exposure time: +1 EV doubles the signal."""
    return float(2.0 ** ev)


def exposure_to_ev(exposure: float) -> float:
    return float(np.log2(exposure))


# ---------------------------------------------------------------------------
# Scalar radiometric formulas
# ---------------------------------------------------------------------------


def quantize(analog: np.ndarray, exposure: float, sensor: SensorConfig) -> np.ndarray:
    """Map analog irradiance to integer DN: round, offset by black, clamp.

    The scale is (white - black) so that normalize(quantize(v)) recovers
    v within half a DN step for unsaturated signal.
    """
    analog = np.asarray(analog, dtype=np.float64)
    if analog.min() < 0:
        raise ValueError("analog signal must be >= 0")
    dn = np.round(exposure * analog * sensor.dn_range) + sensor.black_level
    dn = np.clip(dn, sensor.black_level, sensor.white_level)
    return dn.astype(np.uint16)


def normalize(dn: np.ndarray, sensor: SensorConfig) -> np.ndarray:
    """DN to [0,1] floats: (dn - black) / (white - black)."""
    dn = np.asarray(dn)
    if dn.min() < sensor.black_level or dn.max() > sensor.white_level:
        raise ValueError(
            f"DN values outside [{sensor.black_level}, {sensor.white_level}]"
        )
    return (dn.astype(np.float64) - sensor.black_level) / sensor.dn_range


def noise_std(y: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Poissonian-Gaussian noise std on normalized signal: sqrt(alpha*y + beta)."""
    y = np.asarray(y, dtype=np.float64)
    return np.sqrt(np.maximum(alpha * y + beta, 0.0))


def snr_map(y: np.ndarray, mask: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Per-pixel SNR m*y/sqrt(alpha*y + beta); 0 where masked or undefined."""
    y = np.asarray(y, dtype=np.float64)
    den = noise_std(y, alpha, beta)
    out = np.zeros_like(y)
    np.divide(mask * y, den, out=out, where=den > 0)
    return out


def saturation_mask(y: np.ndarray, threshold: float = 0.98) -> np.ndarray:
    """1 where y is below the saturation threshold, 0 where clipped."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    return (np.asarray(y) < threshold).astype(np.float64)


def add_noise(
    y: np.ndarray, alpha: float, beta: float, seed: int, frame: int = 0
) -> np.ndarray:
    """Add zero-mean Gaussian noise with pixel-dependent variance alpha*y + beta.

    Uses a counter-based generator keyed by (seed, frame); each pixel
    consumes one draw in C order, so the sample at a given pixel is
    reproducible independent of array chunking.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("noise variance coefficients must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    if alpha == 0 and beta == 0:
        return y.copy()
    bits = np.random.Philox(key=np.array([seed, frame], dtype=np.uint64))
    eps = np.random.Generator(bits).standard_normal(y.shape)
    return y + noise_std(y, alpha, beta) * eps


# ---------------------------------------------------------------------------
# Affine warp fields
# ---------------------------------------------------------------------------


def affine_identity() -> np.ndarray:
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def affine_apply(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 2x3 affine to (N, 2) points in (x, y) order."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ np.asarray(m)[:, :2].T + np.asarray(m)[:, 2]

def affine_compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2x3 affine of the composition a(b(u))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((2, 3))
    out[:, :2] = a[:, :2] @ b[:, :2]
    out[:, 2] = a[:, :2] @ b[:, 2] + a[:, 2]
    return out


def affine_invert(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    lin = np.linalg.inv(m[:, :2])
    out = np.empty((2, 3))
    out[:, :2] = lin
    out[:, 2] = -lin @ m[:, 2]
    return out


def _grid_dims(shape: tuple[int, int], tile_size: int) -> tuple[int, int]:
    h, w = shape
    return (max(1, -(-h // tile_size)), max(1, -(-w // tile_size)))


@dataclass(frozen=True)
class AffineWarpField:
    """Per-tile affine sampling maps from this frame's grid into its source.

    params[i, j] is the 2x3 matrix for tile (i, j); applied to output
    pixel coordinates (x, y) it yields the source coordinates to sample.
    For burst frame k the field maps frame-k geometry onto the reference
    geometry, which is exactly what the forward operator W_k consumes.
    """

    shape: tuple[int, int]
    params: np.ndarray
    tile_size: int = 200
    reference: bool = False

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        if self.tile_size < 1:
            raise ValueError("tile size must be >= 1")
        ny, nx = _grid_dims(self.shape, self.tile_size)
        if params.shape != (ny, nx, 2, 3):
            raise ValueError(
                f"params grid {params.shape} does not match {ny}x{nx} tiles"
            )
        det = params[..., 0, 0] * params[..., 1, 1] - params[..., 0, 1] * params[..., 1, 0]
        if (np.abs(det) <= 1e-6).any():
            raise ValueError("tile affine is not invertible")
        if self.reference and not np.array_equal(
            params, np.broadcast_to(affine_identity(), params.shape)
        ):
            raise ValueError("reference field must be exactly identity")

    @classmethod
    def identity(
        cls, shape: tuple[int, int], tile_size: int = 200, reference: bool = False
    ) -> "AffineWarpField":
        ny, nx = _grid_dims(shape, tile_size)
        params = np.tile(affine_identity(), (ny, nx, 1, 1))
        return cls(shape, params, tile_size, reference)

    @classmethod
    def from_global(
        cls, matrix: np.ndarray, shape: tuple[int, int], tile_size: int = 200
    ) -> "AffineWarpField":
        ny, nx = _grid_dims(shape, tile_size)
        params = np.tile(np.asarray(matrix, dtype=np.float64), (ny, nx, 1, 1))
        return cls(shape, params, tile_size)

    @property
    def grid_dims(self) -> tuple[int, int]:
        return _grid_dims(self.shape, self.tile_size)

    def tile_of(self, x: float, y: float) -> tuple[int, int]:
        ny, nx = self.grid_dims
        ti = min(max(int(y // self.tile_size), 0), ny - 1)
        tj = min(max(int(x // self.tile_size), 0), nx - 1)
        return ti, tj

    def map_points(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 2) points in (x, y) order through their tile's affine."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        out = np.empty_like(pts)
        for n, (x, y) in enumerate(pts):
            ti, tj = self.tile_of(x, y)
            out[n] = affine_apply(self.params[ti, tj], [(x, y)])[0]
        return out

    def inverse(self) -> "AffineWarpField":
        """Field with every tile affine inverted.

        Tiles stay attached to the same grid cells, which is exact for a
        global affine and a small-displacement approximation otherwise;
        callers use it for initialization and weighting, never inside
        the forward operator.
        """
        ny, nx, _, _ = self.params.shape
        inv = np.empty_like(self.params)
        for i in range(ny):
            for j in range(nx):
                inv[i, j] = affine_invert(self.params[i, j])
        return AffineWarpField(self.shape, inv, self.tile_size, self.reference)

    def as_global(self) -> np.ndarray:
        """The single 2x3 matrix if all tiles agree, else an error."""
        first = self.params[0, 0]
        if not np.allclose(self.params, first, atol=0.0, rtol=0.0):
            raise ValueError("field is not a global affine")
        return first.copy()


# ---------------------------------------------------------------------------
# Bilinear sampling and warp operators
# ---------------------------------------------------------------------------


def bilinear_sample(
    img: np.ndarray, sx: np.ndarray, sy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sample img at (sx, sy) with bilinear weights; out-of-bounds gives 0.

    Returns (values, validity); validity is 1 where the sample position
    lies inside [0, w-1] x [0, h-1].
    """
    h, w = img.shape[:2]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(sy), 0, max(h - 2, 0)).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    vmask = valid.astype(np.float64)
    w00 = (1 - fx) * (1 - fy) * vmask
    w01 = fx * (1 - fy) * vmask
    w10 = (1 - fx) * fy * vmask
    w11 = fx * fy * vmask
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 3:
        w00, w01, w10, w11 = (a[..., None] for a in (w00, w01, w10, w11))
    out = (
        w00 * img[y0, x0] + w01 * img[y0, x1] + w10 * img[y1, x0] + w11 * img[y1, x1]
    )
    return out, vmask


def bilinear_sample_clamped(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Bilinear sampling with edge extension instead of a validity mask."""
    h, w = img.shape[:2]
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    out, _ = bilinear_sample(img, sx, sy)
    return out


def field_coords(field: AffineWarpField) -> tuple[np.ndarray, np.ndarray]:
    """Source sampling coordinates (sx, sy) for every pixel of the field's grid."""
    h, w = field.shape
    t = field.tile_size
    sx = np.empty((h, w))
    sy = np.empty((h, w))
    ny, nx = field.grid_dims
    for ti in range(ny):
        r0, r1 = ti * t, min((ti + 1) * t, h)
        ys = np.arange(r0, r1, dtype=np.float64)
        for tj in range(nx):
            c0, c1 = tj * t, min((tj + 1) * t, w)
            xs = np.arange(c0, c1, dtype=np.float64)
            m = field.params[ti, tj]
            gx, gy = np.meshgrid(xs, ys)
            sx[r0:r1, c0:c1] = m[0, 0] * gx + m[0, 1] * gy + m[0, 2]
            sy[r0:r1, c0:c1] = m[1, 0] * gx + m[1, 1] * gy + m[1, 2]
    return sx, sy


class WarpPlan:
    """Precomputed gather indices and weights for one warp field.

    forward: out = sum_i w_i * img.flat[idx_i]; adjoint scatters with the
    same indices and weights, so the pair is an exact transpose.
    """

    __slots__ = ("out_shape", "in_shape", "idx", "wts", "validity")

    def __init__(self, field: AffineWarpField, in_shape: tuple[int, int]):
        h, w = in_shape
        sx, sy = field_coords(field)
        valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
        x0 = np.clip(np.floor(sx), 0, max(w - 2, 0)).astype(np.intp)
        y0 = np.clip(np.floor(sy), 0, max(h - 2, 0)).astype(np.intp)
        fx = sx - x0
        fy = sy - y0
        vmask = valid.astype(np.float64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        self.out_shape = field.shape
        self.in_shape = (h, w)
        self.idx = np.stack(
            [(y0 * w + x0).ravel(), (y0 * w + x1).ravel(),
             (y1 * w + x0).ravel(), (y1 * w + x1).ravel()]
        )
        self.wts = np.stack(
            [((1 - fx) * (1 - fy) * vmask).ravel(), (fx * (1 - fy) * vmask).ravel(),
             ((1 - fx) * fy * vmask).ravel(), (fx * fy * vmask).ravel()]
        )
        self.validity = vmask

    def apply(self, img: np.ndarray) -> np.ndarray:
        if img.ndim == 2:
            flat = img.reshape(-1)
            out = sum(self.wts[i] * flat[self.idx[i]] for i in range(4))
            return out.reshape(self.out_shape)
        flat = img.reshape(-1, img.shape[2])
        out = sum(self.wts[i][:, None] * flat[self.idx[i]] for i in range(4))
        return out.reshape(self.out_shape + (img.shape[2],))

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        n = self.in_shape[0] * self.in_shape[1]
        if r.ndim == 2:
            rf = r.reshape(-1)
            acc = np.zeros(n)
            for i in range(4):
                acc += np.bincount(self.idx[i], weights=self.wts[i] * rf, minlength=n)
            return acc.reshape(self.in_shape)
        nc = r.shape[2]
        rf = r.reshape(-1, nc)
        acc = np.zeros((n, nc))
        for c in range(nc):
            for i in range(4):
                acc[:, c] += np.bincount(
                    self.idx[i], weights=self.wts[i] * rf[:, c], minlength=n
                )
        return acc.reshape(self.in_shape + (nc,))


def warp_apply(
    img: np.ndarray, field: AffineWarpField
) -> tuple[np.ndarray, np.ndarray]:
    """Resample img through the field; returns (warped, validity mask)."""
    plan = WarpPlan(field, img.shape[:2])
    return plan.apply(img), plan.validity


def warp_adjoint(
    r: np.ndarray, field: AffineWarpField, in_shape: tuple[int, int] | None = None
) -> np.ndarray:
    """Exact transpose of warp_apply's linear map (bilinear splatting)."""
    plan = WarpPlan(field, in_shape if in_shape is not None else field.shape)
    return plan.adjoint(r)


# ---------------------------------------------------------------------------
# Blur, decimation, CFA
# ---------------------------------------------------------------------------


def _box_axis(x: np.ndarray, s: int, axis: int) -> np.ndarray:
    if s == 1:
        return x
    x = np.moveaxis(x, axis, -1)
    if x.shape[-1] < s:
        raise ValueError(f"axis length {x.shape[-1]} shorter than kernel {s}")
    lo = (s - 1) // 2
    hi = s - 1 - lo
    pad = [(0, 0)] * (x.ndim - 1) + [(lo, hi)]
    xp = np.pad(x, pad, mode="symmetric")
    out = sliding_window_view(xp, s, axis=-1).sum(axis=-1) / s
    return np.moveaxis(out, -1, axis)


def _box_axis_adjoint(r: np.ndarray, s: int, axis: int) -> np.ndarray:
    if s == 1:
        return r
    r = np.moveaxis(r, axis, -1)
    n = r.shape[-1]
    lo = (s - 1) // 2
    hi = s - 1 - lo
    pad = [(0, 0)] * (r.ndim - 1) + [(s - 1, s - 1)]
    rp = np.pad(r, pad, mode="constant")
    # transpose of the sliding window mean, landing on padded coordinates
    g = sliding_window_view(rp, s, axis=-1).sum(axis=-1) / s
    out = g[..., lo:lo + n].copy()
    if lo:
        out[..., :lo] += g[..., :lo][..., ::-1]
    if hi:
        out[..., n - hi:] += g[..., lo + n:][..., ::-1]
    return np.moveaxis(out, -1, axis)


def blur_apply(x: np.ndarray, s: int) -> np.ndarray:
    """s x s box blur (pixel-area integration), symmetric boundary."""
    return _box_axis(_box_axis(np.asarray(x, dtype=np.float64), s, 0), s, 1)


def blur_adjoint(r: np.ndarray, s: int) -> np.ndarray:
    """Exact transpose of blur_apply, boundary handling included."""
    return _box_axis_adjoint(_box_axis_adjoint(np.asarray(r, dtype=np.float64), s, 1), s, 0)


def decimate(x: np.ndarray, s: int) -> np.ndarray:
    """Keep every s-th sample per axis, starting at offset 0."""
    return np.ascontiguousarray(x[::s, ::s])


def decimate_adjoint(r: np.ndarray, s: int, shape: tuple[int, int]) -> np.ndarray:
    """Insert zeros between samples, back to `shape`."""
    out_shape = shape + r.shape[2:]
    out = np.zeros(out_shape, dtype=np.float64)
    out[::s, ::s] = r
    return out


def cfa_apply(rgb: np.ndarray, pattern: BayerPattern) -> np.ndarray:
    """Select the pattern's channel at every pixel of an (H, W, 3) image."""
    h, w = rgb.shape[:2]
    ch = channel_map(pattern, (h, w))
    return rgb[np.arange(h)[:, None], np.arange(w)[None, :], ch]


def cfa_adjoint(mosaic: np.ndarray, pattern: BayerPattern) -> np.ndarray:
    """Scatter mosaic values into their own channel, zeros elsewhere."""
    h, w = mosaic.shape
    ch = channel_map(pattern, (h, w))
    out = np.zeros((h, w, 3), dtype=np.float64)
    out[np.arange(h)[:, None], np.arange(w)[None, :], ch] = mosaic
    return out


# ---------------------------------------------------------------------------
# Composite burst operator
# ---------------------------------------------------------------------------


def forward_A(
    x: np.ndarray, k: int, meta: BurstMeta, fields: list[AffineWarpField]
) -> np.ndarray:
    """Analog low-resolution mosaic a_k = C D_s B W_k (dt_k x)."""
    s = meta.scale
    field = fields[k]
    if x.shape[:2] != field.shape:
        raise ValueError(f"image {x.shape[:2]} does not match field grid {field.shape}")
    warped, _ = warp_apply(x, field)
    low = decimate(blur_apply(warped, s), s)
    return meta.exposures[k] * cfa_apply(low, meta.sensor.pattern)


def adjoint_A(
    r: np.ndarray, k: int, meta: BurstMeta, fields: list[AffineWarpField]
) -> np.ndarray:
    """Exact transpose of forward_A: dt_k W^T B^T D^T C^T r."""
    s = meta.scale
    field = fields[k]
    rgb = cfa_adjoint(r, meta.sensor.pattern)
    up = blur_adjoint(decimate_adjoint(rgb, s, field.shape), s)
    return meta.exposures[k] * warp_adjoint(up, field)


class BurstOperator:
    """All K forward maps of a registered burst with cached warp plans.

    Precomputes the per-frame bilinear gather tables once, so repeated
    apply/adjoint calls inside iterative solvers stay cheap.
    """

    def __init__(self, meta: BurstMeta, fields: list[AffineWarpField]):
        if len(fields) != meta.nframes:
            raise ValueError("one warp field per frame required")
        shapes = {f.shape for f in fields}
        if len(shapes) != 1:
            raise ValueError("all warp fields must share one grid")
        self.meta = meta
        self.fields = list(fields)
        self.hr_shape = fields[0].shape
        s = meta.scale
        if self.hr_shape[0] % s or self.hr_shape[1] % s:
            raise ValueError(f"grid {self.hr_shape} not divisible by scale {s}")
        self.lr_shape = (self.hr_shape[0] // s, self.hr_shape[1] // s)
        self._plans = [WarpPlan(f, self.hr_shape) for f in fields]
        self._validity = []
        for plan in self._plans:
            v = decimate(blur_apply(plan.validity, s), s)
            self._validity.append((v >= 1.0 - 1e-9).astype(np.float64))

    def apply(self, x: np.ndarray, k: int) -> np.ndarray:
        s = self.meta.scale
        low = decimate(blur_apply(self._plans[k].apply(x), s), s)
        return self.meta.exposures[k] * cfa_apply(low, self.meta.sensor.pattern)

    def adjoint(self, r: np.ndarray, k: int) -> np.ndarray:
        s = self.meta.scale
        rgb = cfa_adjoint(r, self.meta.sensor.pattern)
        up = blur_adjoint(decimate_adjoint(rgb, s, self.hr_shape), s)
        return self.meta.exposures[k] * self._plans[k].adjoint(up)

    def validity(self, k: int) -> np.ndarray:
        """Low-resolution mask: 1 where the whole blur footprint was in bounds."""
        return self._validity[k]

    def normal_apply(self, x: np.ndarray, sq_weights: list[np.ndarray]) -> np.ndarray:
        """sum_k A_k^T (w_k^2 * A_k x), the data-term normal operator."""
        x = np.asarray(x, dtype=np.float64)
        acc = np.zeros_like(x)
        for k in range(self.meta.nframes):
            acc += self.adjoint(sq_weights[k] * self.apply(x, k), k)
        return acc
