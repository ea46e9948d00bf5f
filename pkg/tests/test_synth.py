"""Synthetic burst generation tests."""

import numpy as np
import pytest
from scipy import stats

from rawburst import (
    LogLinearNoise,
    SynthConfig,
    cfa_apply,
    load_burst,
    make_burst,
    normalize,
    quantize,
    render_scene,
    save_burst,
    unprocess,
)
from rawburst.synth import config_from_doc, random_warp


def _flat_config(**kw):
    base = dict(
        frames=1,
        crop=32,
        scale=1,
        max_translation=0.0,
        max_rotation=0.0,
        frame_ev_range=(0.0, 0.0),
        gt_gain_ev_range=(0.0, 0.0),
        noise=None,
    )
    base.update(kw)
    return SynthConfig(**base)


# ---------------------------------------------------------------------------
# unprocess
# ---------------------------------------------------------------------------


def test_unprocess_zero_is_zero(rng):
    cfg = _flat_config()
    out, g = unprocess(np.zeros((8, 8, 3), dtype=np.uint8), cfg, rng)
    assert np.all(out.data == 0)


def test_unprocess_srgb_midgray(rng):
    # inverse sRGB of 188/255 is ~0.5 linear
    cfg = _flat_config(wb_gains=(1.0, 1.0, 1.0))
    srgb = np.full((4, 4, 3), 188, dtype=np.uint8)
    out, g = unprocess(srgb, cfg, rng)
    assert g == 0.0
    assert out.data.mean() == pytest.approx(0.503, abs=0.005)


def test_unprocess_gain_doubles(rng):
    srgb = (np.arange(48) % 200 + 20).astype(np.uint8).reshape(4, 4, 3)
    base, _ = unprocess(srgb, _flat_config(), np.random.default_rng(1))
    up, g = unprocess(srgb, _flat_config(gt_gain_ev_range=(1.0, 1.0)), np.random.default_rng(1))
    assert g == 1.0
    assert np.allclose(up.data, 2.0 * base.data)


def test_unprocess_white_balance_division(rng):
    cfg = _flat_config(wb_gains=(2.0, 1.0, 1.7))
    srgb = np.full((4, 4, 3), 188, dtype=np.uint8)
    out, _ = unprocess(srgb, cfg, rng)
    r, g, b = out.data[0, 0]
    assert r == pytest.approx(g / 2.0)
    assert b == pytest.approx(g / 1.7)


# ---------------------------------------------------------------------------
# random warps
# ---------------------------------------------------------------------------


def test_random_warp_degenerate_is_identity(rng):
    cfg = _flat_config(crop=64)
    f = random_warp(rng, cfg, (64, 64))
    assert np.allclose(f.as_global(), np.array([[1.0, 0, 0], [0, 1.0, 0]]))


def test_random_warp_translations_uniform():
    cfg = SynthConfig(frames=2, crop=64, max_translation=6.0, max_rotation=0.0, noise=None)
    rng = np.random.default_rng(5)
    tx = np.array([random_warp(rng, cfg, (64, 64)).as_global()[0, 2] for _ in range(10_000)])
    assert stats.kstest(tx, stats.uniform(loc=-6.0, scale=12.0).cdf).pvalue > 0.01


def test_random_warp_rotation_corner_displacement():
    # 1 degree about the center moves a 256x256 corner by ~3.16 px
    cfg = SynthConfig(frames=2, crop=256, max_translation=0.0, max_rotation=1.0, noise=None)
    rng = np.random.default_rng(0)
    disp = []
    for _ in range(200):
        f = random_warp(rng, cfg, (256, 256))
        corner = f.map_points(np.array([[0.0, 0.0]]))[0]
        disp.append(np.hypot(corner[0], corner[1]))
    theta = np.deg2rad(1.0)
    expected = np.hypot(127.5, 127.5) * theta
    assert max(disp) == pytest.approx(expected, rel=0.05)


# ---------------------------------------------------------------------------
# burst synthesis
# ---------------------------------------------------------------------------


def test_single_flat_frame_matches_cfa(rng):
    cfg = _flat_config(crop=16)
    s = make_burst(cfg, 0)
    assert len(s.frames) == 1
    gt = s.gt.data
    expected = normalize(
        quantize(cfa_apply(np.minimum(gt, 1.0), cfg.sensor.pattern), 1.0, cfg.sensor),
        cfg.sensor,
    )
    assert np.array_equal(s.frames[0].data, expected)


def test_reference_frame_is_identity_unit_gain():
    cfg = SynthConfig(frames=5, crop=32, noise=None, seed=2)
    s = make_burst(cfg, 0)
    assert s.gt_fields[cfg.k0].reference
    assert np.allclose(s.gt_fields[cfg.k0].as_global(), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    assert s.evs[cfg.k0] == 0.0
    assert s.meta.exposures[cfg.k0] == 1.0


def test_positive_ev_saturates():
    cfg = _flat_config(frames=2, crop=16, frame_ev_range=(3.0, 3.0))
    s = make_burst(cfg, 0)
    k = 1 - cfg.k0 if cfg.k0 < 2 else 1
    bright = s.frames[1].data
    assert bright.max() == 1.0
    gt_mosaic = cfa_apply(s.gt.data, cfg.sensor.pattern)
    assert np.all(bright[gt_mosaic * 8.0 >= 1.0] == 1.0)


def test_same_seed_bit_identical():
    cfg = SynthConfig(frames=3, crop=32, seed=9)
    a = make_burst(cfg, 4)
    b = make_burst(cfg, 4)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.data, fb.data)
    assert np.array_equal(a.gt.data, b.gt.data)
    c = make_burst(cfg, 5)
    assert not np.array_equal(a.frames[0].data, c.frames[0].data)


def test_internal_consistency_oracle():
    # noise-free, ev=0, identity warps: frame = normalize(quantize(cfa(downscale(gt))))
    # with the synthesis downscale sampling HR coords s*i (exact at integers)
    for s_factor in (1, 2):
        cfg = _flat_config(frames=3, crop=32, scale=s_factor)
        smp = make_burst(cfg, 1)
        hr = np.minimum(smp.gt.data, 1.0)
        lr = hr[::s_factor, ::s_factor]
        expected = normalize(
            quantize(cfa_apply(lr, cfg.sensor.pattern), 1.0, cfg.sensor), cfg.sensor
        )
        for fr in smp.frames:
            assert np.array_equal(fr.data, expected)


def test_noise_params_recorded():
    cfg = SynthConfig(frames=2, crop=16, seed=3)
    s = make_burst(cfg, 0)
    assert s.alpha > 0 and s.beta > 0
    assert 10 ** -4 <= s.alpha <= 10 ** -2
    model = LogLinearNoise()
    assert np.log10(s.beta) == pytest.approx(
        model.slope * np.log10(s.alpha) + model.intercept
    )


def test_render_scene_properties():
    img = render_scene(np.random.default_rng(2), 64)
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8
    assert img.max() == 255  # saturated highlights present
    again = render_scene(np.random.default_rng(2), 64)
    assert np.array_equal(img, again)


# ---------------------------------------------------------------------------
# burst directory round trip
# ---------------------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    cfg = SynthConfig(frames=3, crop=32, scale=2, seed=6)
    s = make_burst(cfg, 2)
    d = tmp_path / "burst"
    save_burst(s, d)
    back = load_burst(d)
    assert np.array_equal(back.gt.data, s.gt.data.astype(np.float32))
    assert len(back.frames) == 3
    for fa, fb in zip(s.frames, back.frames):
        assert np.array_equal(fa.data, fb.data)
        assert fb.exposure == pytest.approx(fa.exposure)
    assert back.meta.scale == 2 and back.meta.k0 == cfg.k0
    assert back.alpha == pytest.approx(s.alpha)
    for ga, gb in zip(s.gt_fields, back.gt_fields):
        assert np.allclose(ga.as_global(), gb.as_global(), atol=1e-12)


def test_load_rejects_maxval_mismatch(tmp_path):
    cfg = SynthConfig(frames=1, crop=16, seed=1)
    s = make_burst(cfg, 0)
    d = tmp_path / "burst"
    save_burst(s, d)
    raw = (d / "frame_00.pgm16").read_bytes()
    (d / "frame_00.pgm16").write_bytes(raw.replace(b"4095", b"1023", 1))
    with pytest.raises(ValueError):
        load_burst(d)


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(crop=30, scale=2)
    with pytest.raises(ValueError):
        SynthConfig(scale=3)
    with pytest.raises(ValueError):
        SynthConfig(frame_ev_range=(3.0, -3.0))


def test_config_from_doc():
    cfg = config_from_doc({"K": 5, "crop": 64, "s": 2, "seed": 11})
    assert cfg.frames == 5 and cfg.crop == 64 and cfg.scale == 2 and cfg.seed == 11
    with pytest.raises(ValueError):
        config_from_doc({"K": 5, "bogus": 1})
