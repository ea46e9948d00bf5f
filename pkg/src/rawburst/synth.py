"""Semi-synthetic burst generation with exact ground truth.

Starting from a linear-light ground-truth image, each burst frame gets
its own random affine motion (translation and a small rotation), an
exposure gain drawn in EV, bilinear resampling down to the mosaic grid,
CFA sampling, signal-dependent noise, and quantization.  The ground
truth, the warps, and the noise coefficients are all recorded, so
registration and reconstruction can be scored exactly.

Everything is deterministic per (seed, burst index): one generator,
seeded by that pair, drives every draw in a fixed order, and the noise
uses a counter-based stream keyed per frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import formats
from .model import (
    AffineWarpField,
    BayerPattern,
    BurstMeta,
    IrradianceImage,
    RawFrame,
    SensorConfig,
    add_noise,
    bilinear_sample,
    cfa_apply,
    ev_to_exposure,
    normalize,
    quantize,
)


@dataclass(frozen=True)
class LogLinearNoise:
    """Sampler for (alpha, beta): log10(beta) is affine in log10(alpha)."""

    slope: float = 2.0
    intercept: float = 1.25
    log10_alpha_range: tuple = (-4.0, -2.0)

    def __post_init__(self):
        lo, hi = self.log10_alpha_range
        if not lo <= hi:
            raise ValueError("alpha range must be ordered")

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        la = rng.uniform(*self.log10_alpha_range)
        alpha = 10.0 ** la
        beta = 10.0 ** (self.slope * la + self.intercept)
        return float(alpha), float(beta)


@dataclass(frozen=True)
class SynthConfig:
    """Burst synthesis protocol; defaults give 11-frame x1 256px bursts."""

    frames: int = 11
    crop: int = 256
    scale: int = 1
    max_translation: float = 6.0
    max_rotation: float = 1.0
    frame_ev_range: tuple = (-3.0, 3.0)
    gt_gain_ev_range: tuple = (-5.0, 5.0)
    noise: LogLinearNoise | None = field(default_factory=LogLinearNoise)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    wb_gains: tuple = (2.0, 1.0, 1.7)
    tile_size: int = 200
    k0: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.scale not in (1, 2, 4):
            raise ValueError(f"scale must be 1, 2, or 4, got {self.scale}")
        if self.crop % (2 * self.scale):
            raise ValueError(
                f"crop {self.crop} must be divisible by 2*scale={2 * self.scale} "
                "so frames hold whole Bayer tiles"
            )
        if self.max_translation < 0 or self.max_rotation < 0:
            raise ValueError("motion ranges must be >= 0")
        for name in ("frame_ev_range", "gt_gain_ev_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be ordered")
        if not 0 <= self.k0 < self.frames:
            raise ValueError(f"k0={self.k0} out of range")


def config_from_doc(doc: dict) -> SynthConfig:
    """SynthConfig from a JSON document in the sidecar dialect.

    Short keys mirror meta.json: K for the frame count, s for the scale
    factor, sensor as {q, b, c, pattern}.  Unknown keys are rejected so
    typos fail loudly instead of silently using a default.
    """
    kwargs: dict = {}
    renames = {"K": "frames", "s": "scale"}
    plain = {
        "crop",
        "max_translation",
        "max_rotation",
        "frame_ev_range",
        "gt_gain_ev_range",
        "wb_gains",
        "tile_size",
        "k0",
        "seed",
    }
    for key, value in doc.items():
        if key in renames:
            kwargs[renames[key]] = int(value)
        elif key in plain:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        elif key == "noise":
            if value is None:
                kwargs["noise"] = None
            else:
                kwargs["noise"] = LogLinearNoise(
                    slope=float(value.get("slope", 2.0)),
                    intercept=float(value.get("intercept", 1.25)),
                    log10_alpha_range=tuple(
                        value.get("log10_alpha_range", (-4.0, -2.0))
                    ),
                )
        elif key == "sensor":
            kwargs["sensor"] = SensorConfig(
                bit_depth=int(value.get("q", 12)),
                black_level=int(value.get("b", 0)),
                white_level=int(value.get("c", (1 << int(value.get("q", 12))) - 1)),
                pattern=BayerPattern(value.get("pattern", "RGGB")),
            )
        else:
            raise ValueError(f"unknown synthesis config key '{key}'")
    return SynthConfig(**kwargs)


@dataclass
class BurstSample:
    """Ground truth, frames, metadata, and the exact warps that made them."""

    gt: IrradianceImage | None
    frames: list[RawFrame]
    meta: BurstMeta
    gt_fields: list[AffineWarpField] | None
    alpha: float
    beta: float
    evs: np.ndarray
    seed: int = 0
    burst_index: int = 0
    meta_doc: dict | None = None

    def __post_init__(self):
        if len(self.frames) != self.meta.nframes:
            raise ValueError("frame count disagrees with meta")
        if self.gt_fields is not None and not self.gt_fields[self.meta.k0].reference:
            raise ValueError("reference frame's ground-truth field must be identity")


# ---------------------------------------------------------------------------
# Scene synthesis and unprocessing
# ---------------------------------------------------------------------------


def render_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural test scene: multi-octave texture plus saturating highlights.

    Returns (size, size, 3) uint8.  Texture covers every pixel so
    alignment benchmarks are informative everywhere; a few bright blobs
    clip to white, exercising the saturation paths.
    """
    base = np.zeros((size, size, 3))
    for sigma in (2.0, 4.0, 8.0, 16.0, 32.0):
        g = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="reflect")
        g /= g.std() + 1e-12
        color = rng.uniform(0.5, 1.0, size=3)
        base += math.sqrt(sigma) * g[..., None] * color
    lo, hi = np.percentile(base, [2.0, 98.0])
    base = np.clip((base - lo) / (hi - lo + 1e-12), 0.0, 1.0)
    base = base ** rng.uniform(0.8, 1.3)
    base *= rng.uniform(0.35, 0.6)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, size, size=2)
        radius = rng.uniform(size / 32.0, size / 8.0)
        amp = rng.uniform(0.8, 2.0)
        color = rng.uniform(0.7, 1.0, size=3)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))
        base += blob[..., None] * color
    return (np.clip(base, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def unprocess(
    srgb: np.ndarray, config: SynthConfig, rng: np.random.Generator
) -> tuple[IrradianceImage, float]:
    """Display-encoded image to linear light: inverse gamma, inverse white
    balance, then a global gain 2^g with g drawn from gt_gain_ev_range.

    Returns (image, g).
    """
    x = np.asarray(srgb, dtype=np.float64)
    if x.min() < 0 or x.max() > 255:
        raise ValueError("expected 8-bit input in [0, 255]")
    x = x / 255.0
    linear = np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)
    linear = linear / np.asarray(config.wb_gains, dtype=np.float64)
    g = float(rng.uniform(*config.gt_gain_ev_range))
    return IrradianceImage(linear * 2.0 ** g), g


def random_warp(
    rng: np.random.Generator, config: SynthConfig, shape: tuple[int, int]
) -> AffineWarpField:
    """Global rotation about the image center plus a translation.

    Draw order is fixed (tx, ty, then the angle) so streams replay.
    """
    tx, ty = rng.uniform(-config.max_translation, config.max_translation, size=2)
    theta = math.radians(rng.uniform(-config.max_rotation, config.max_rotation))
    h, w = shape
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    m = np.empty((2, 3))
    m[:, :2] = rot
    m[:, 2] = center - rot @ center + np.array([tx, ty])
    return AffineWarpField.from_global(m, shape, config.tile_size)


# ---------------------------------------------------------------------------
# Burst synthesis
# ---------------------------------------------------------------------------


def synthesize_burst(
    gt: IrradianceImage,
    config: SynthConfig,
    rng: np.random.Generator | None = None,
    burst_index: int = 0,
) -> BurstSample:
    """Render K frames from the ground truth.

    Per frame: warp by its ground-truth field, resample bilinearly onto
    the mosaic grid (low-res pixel i sits at high-res coordinate s*i, so
    warp and downscale collapse into one bilinear gather), gain by
    2^ev, clip at saturation, mosaic, add noise, quantize, normalize.
    The reference frame keeps identity warp and 0 EV.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, burst_index]))
    hr = gt.data.shape[:2]
    if hr[0] < config.crop or hr[1] < config.crop:
        raise ValueError(f"ground truth {hr} smaller than crop {config.crop}")
    if hr != (config.crop, config.crop):
        raise ValueError(f"ground truth {hr} does not match crop {config.crop}")

    k = config.frames
    k0 = config.k0
    if config.noise is not None:
        alpha, beta = config.noise.sample(rng)
    else:
        alpha, beta = 0.0, 0.0
    noise_seed = int(rng.integers(2 ** 63))

    gt_fields = []
    for i in range(k):
        if i == k0:
            gt_fields.append(
                AffineWarpField.identity(hr, config.tile_size, reference=True)
            )
        else:
            gt_fields.append(random_warp(rng, config, hr))
    evs = np.zeros(k)
    for i in range(k):
        if i != k0:
            evs[i] = rng.uniform(*config.frame_ev_range)

    sensor = replace(config.sensor, alpha=alpha, beta=beta)
    s = config.scale
    lr = config.crop // s
    xs = s * np.arange(lr, dtype=np.float64)
    gx, gy = np.meshgrid(xs, xs)

    frames = []
    for i in range(k):
        m = gt_fields[i].params[0, 0]
        sx = m[0, 0] * gx + m[0, 1] * gy + m[0, 2]
        sy = m[1, 0] * gx + m[1, 1] * gy + m[1, 2]
        vals, _ = bilinear_sample(gt.data, sx, sy)
        gained = vals * ev_to_exposure(evs[i])
        clipped = np.minimum(gained, 1.0)
        mosaic = cfa_apply(clipped, sensor.pattern)
        if config.noise is not None:
            mosaic = add_noise(mosaic, alpha, beta, noise_seed, frame=i)
            mosaic = np.maximum(mosaic, 0.0)  # DNs clamp at the black level
        dn = quantize(mosaic, 1.0, sensor)  # gain already applied above
        frames.append(
            RawFrame(normalize(dn, sensor), ev_to_exposure(evs[i]), sensor)
        )

    meta = BurstMeta(
        exposures=np.array([ev_to_exposure(e) for e in evs]),
        k0=k0,
        scale=s,
        sensor=sensor,
    )
    return BurstSample(
        gt=gt,
        frames=frames,
        meta=meta,
        gt_fields=gt_fields,
        alpha=alpha,
        beta=beta,
        evs=evs,
        seed=config.seed,
        burst_index=burst_index,
    )


def make_burst(config: SynthConfig, burst_index: int = 0) -> BurstSample:
    """Scene rendering, unprocessing, and synthesis in one seeded stream."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, burst_index]))
    scene = render_scene(rng, config.crop)
    gt, _ = unprocess(scene, config, rng)
    return synthesize_burst(gt, config, rng, burst_index)


# ---------------------------------------------------------------------------
# Burst directories
# ---------------------------------------------------------------------------


def save_burst(sample: BurstSample, directory) -> None:
    """Write gt.pfm, frame_XX.pgm16, and meta.json into the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if sample.gt is not None:
        formats.write_pfm(directory / "gt.pfm", sample.gt.data.astype(np.float32))
    sensor = sample.meta.sensor
    maxval = (1 << sensor.bit_depth) - 1
    frame_docs = []
    for i, frame in enumerate(sample.frames):
        dn = np.round(frame.data * sensor.dn_range + sensor.black_level)
        formats.write_pgm16(directory / f"frame_{i:02d}.pgm16", dn.astype(np.uint16), maxval)
        doc = {
            "ev": float(sample.evs[i]),
            "alpha": sample.alpha,
            "beta": sample.beta,
        }
        if sample.gt_fields is not None:
            doc["warp"] = [list(map(float, row)) for row in sample.gt_fields[i].as_global()]
        frame_docs.append(doc)
    meta_doc = {
        "K": sample.meta.nframes,
        "k0": sample.meta.k0,
        "s": sample.meta.scale,
        "seed": sample.seed,
        "sensor": formats.sensor_to_meta(sensor),
        "frames": frame_docs,
    }
    if sample.meta_doc:
        for key, value in sample.meta_doc.items():
            meta_doc.setdefault(key, value)  # carry foreign annotations along
    formats.write_meta(directory / "meta.json", meta_doc)


def load_burst(directory) -> BurstSample:
    """Read a burst directory back; gt and warps are optional on disk."""
    directory = Path(directory)
    doc = formats.read_meta(directory / "meta.json")
    sensor = formats.sensor_from_meta(doc)
    maxval_expected = (1 << sensor.bit_depth) - 1
    frames = []
    for i, fr in enumerate(doc["frames"]):
        dn, maxval = formats.read_pgm16(directory / f"frame_{i:02d}.pgm16")
        if maxval != maxval_expected:
            raise ValueError(
                f"frame_{i:02d}: PGM maxval {maxval} does not match "
                f"sidecar bit depth {sensor.bit_depth}"
            )
        data = normalize(dn, sensor)
        frames.append(RawFrame(data, ev_to_exposure(fr["ev"]), sensor))
    meta = formats.meta_from_doc(doc)
    gt_path = directory / "gt.pfm"
    gt = None
    if gt_path.exists():
        gt = IrradianceImage(formats.read_pfm(gt_path).astype(np.float64))
    gt_fields = formats.gt_fields_from_doc(doc, frames[0].shape)
    evs = np.array([fr["ev"] for fr in doc["frames"]])
    return BurstSample(
        gt=gt,
        frames=frames,
        meta=meta,
        gt_fields=gt_fields,
        alpha=float(doc["frames"][0]["alpha"]),
        beta=float(doc["frames"][0]["beta"]),
        evs=evs,
        seed=int(doc.get("seed", 0)),
        meta_doc=doc,
    )
