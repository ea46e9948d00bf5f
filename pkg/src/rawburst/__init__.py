"""Joint HDR and super-resolution reconstruction from raw image bursts.

The library models a camera burst as noisy, mosaicked, downsampled,
exposure-scaled views of one latent linear-light image, aligns the
frames, and inverts the model with a splitting scheme.  Sub-packages:

- model:    sensor/optics operators and their exact adjoints
- synth:    semi-synthetic bursts with exact ground truth
- register: MTB / phase correlation / pyramidal Lucas-Kanade alignment
- solver:   half-quadratic splitting reconstruction with plugin priors
- merge:    demosaicking and the exposure-bracketing baseline
- metrics:  PSNR, mu-law PSNR, SSIM, geometric warp error
- formats:  PFM / 16-bit PGM / JSON sidecar I/O
- report:   metric tables, figures, previews
- cli:      the `rawburst` command
"""

from .formats import (
    read_meta,
    read_pfm,
    read_pgm16,
    read_warps,
    write_meta,
    write_pfm,
    write_pgm16,
    write_ppm,
    write_warps,
)
from .merge import (
    demosaic_bilinear,
    demosaic_malvar,
    hdr_merge_bracket,
    select_nearest_ev,
)
from .metrics import (
    burst_geometric_error,
    geometric_error,
    mu_law,
    mu_psnr,
    psnr,
    ssim,
)
from .model import (
    AffineWarpField,
    BayerPattern,
    BurstMeta,
    BurstOperator,
    IrradianceImage,
    RawFrame,
    SensorConfig,
    add_noise,
    adjoint_A,
    blur_adjoint,
    blur_apply,
    cfa_adjoint,
    cfa_apply,
    channel_map,
    decimate,
    decimate_adjoint,
    ev_to_exposure,
    exposure_to_ev,
    forward_A,
    noise_std,
    normalize,
    quantize,
    saturation_mask,
    snr_map,
    warp_adjoint,
    warp_apply,
)
from .register import (
    FeatureExtractor,
    GaussianPyramid,
    MTBFeature,
    NoSignalError,
    PlainLuma,
    RegistrationResult,
    lk_affine,
    mtb,
    phase_correlate,
    refine_fields,
    register_burst,
)
from .solver import (
    Confidence,
    DivergedError,
    HqsConfig,
    IdentityPrior,
    Prior,
    ResidualConfidence,
    TvL1Prior,
    UnitConfidence,
    fusion_weights,
    init_z,
    lipschitz_estimate,
    prox_tv_l1,
    reconstruct,
)
from .synth import (
    BurstSample,
    LogLinearNoise,
    SynthConfig,
    load_burst,
    make_burst,
    render_scene,
    save_burst,
    synthesize_burst,
    unprocess,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
