"""Demosaicking and exposure-bracket fusion tests with scalar oracles."""

import numpy as np
import pytest

from rawburst import (
    BayerPattern,
    cfa_apply,
    channel_map,
    demosaic_bilinear,
    demosaic_malvar,
    hdr_merge_bracket,
    select_nearest_ev,
)

from conftest import ALL_PATTERNS


# ---------------------------------------------------------------------------
# scalar oracles (independent loops, no vectorized shortcuts)
# ---------------------------------------------------------------------------

_ORACLE_G = [(0, -1, 1.0), (0, 1, 1.0), (-1, 0, 1.0), (1, 0, 1.0), (0, 0, 4.0)]
_ORACLE_RB = [
    (-1, -1, 1.0), (-1, 1, 1.0), (1, -1, 1.0), (1, 1, 1.0),
    (-1, 0, 2.0), (1, 0, 2.0), (0, -1, 2.0), (0, 1, 2.0), (0, 0, 4.0),
]


def _bilinear_oracle(raw, pattern):
    h, w = raw.shape
    ch = channel_map(pattern, raw.shape)
    out = np.zeros((h, w, 3))
    for c, taps in ((0, _ORACLE_RB), (1, _ORACLE_G), (2, _ORACLE_RB)):
        for i in range(h):
            for j in range(w):
                num = den = 0.0
                for di, dj, wgt in taps:
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w and ch[ii, jj] == c:
                        num += wgt * raw[ii, jj]
                        den += wgt
                out[i, j, c] = num / den
    return out


_MALVAR_G_AT_RB = [
    (-2, 0, -1), (-1, 0, 2), (0, -2, -1), (0, -1, 2), (0, 0, 4),
    (0, 1, 2), (0, 2, -1), (1, 0, 2), (2, 0, -1),
]
_MALVAR_C_AT_G_H = [
    (-2, 0, 0.5), (-1, -1, -1), (-1, 1, -1), (0, -2, -1), (0, -1, 4),
    (0, 0, 5), (0, 1, 4), (0, 2, -1), (1, -1, -1), (1, 1, -1), (2, 0, 0.5),
]
_MALVAR_C_AT_G_V = [(dj, di, w) for di, dj, w in _MALVAR_C_AT_G_H]
_MALVAR_C_AT_C = [
    (-2, 0, -1.5), (-1, -1, 2), (-1, 1, 2), (0, -2, -1.5), (0, 0, 6),
    (0, 2, -1.5), (1, -1, 2), (1, 1, 2), (2, 0, -1.5),
]


def _mirror(i, n):
    # scipy "mirror" reflection: ... 2 1 | 0 1 2 3 | 2 1 ...
    period = 2 * n - 2 if n > 1 else 1
    i = abs(i) % period
    return period - i if i >= n else i


def _malvar_oracle(raw, pattern):
    h, w = raw.shape
    ch = channel_map(pattern, raw.shape)
    red_row = int(np.where(pattern.tile == 0)[0][0])

    def tap_sum(i, j, taps):
        acc = 0.0
        for di, dj, wgt in taps:
            acc += wgt * raw[_mirror(i + di, h), _mirror(j + dj, w)]
        return acc / 8.0

    out = np.zeros((h, w, 3))
    for i in range(h):
        for j in range(w):
            c = ch[i, j]
            out[i, j, c] = raw[i, j]
            if c != 1:
                out[i, j, 1] = tap_sum(i, j, _MALVAR_G_AT_RB)
                other = 2 if c == 0 else 0
                out[i, j, other] = tap_sum(i, j, _MALVAR_C_AT_C)
            else:
                row_chroma = 0 if i % 2 == red_row else 2
                out[i, j, row_chroma] = tap_sum(i, j, _MALVAR_C_AT_G_H)
                out[i, j, 2 - row_chroma] = tap_sum(i, j, _MALVAR_C_AT_G_V)
    return out


# ---------------------------------------------------------------------------
# bilinear
# ---------------------------------------------------------------------------


def test_bilinear_constant():
    out = demosaic_bilinear(np.full((6, 6), 0.3), BayerPattern.RGGB)
    assert np.allclose(out, 0.3)


def test_bilinear_pure_green():
    rgb = np.zeros((6, 6, 3))
    rgb[..., 1] = np.random.default_rng(0).uniform(0.2, 0.8, size=(6, 6))
    out = demosaic_bilinear(cfa_apply(rgb, BayerPattern.RGGB), BayerPattern.RGGB)
    assert np.all(out[..., 0] == 0.0)
    assert np.all(out[..., 2] == 0.0)
    assert np.isfinite(out[..., 1]).all()


def test_bilinear_hand_worked_4x4():
    # RGGB sites: R at even/even, B at odd/odd
    raw = np.array(
        [
            [4.0, 2.0, 8.0, 6.0],
            [2.0, 12.0, 4.0, 10.0],
            [8.0, 4.0, 16.0, 2.0],
            [6.0, 10.0, 2.0, 14.0],
        ]
    )
    out = demosaic_bilinear(raw, BayerPattern.RGGB)
    assert out[0, 0, 0] == 4.0  # own site verbatim
    assert out[1, 1, 0] == 9.0  # four diagonal R neighbors: (4+8+8+16)/4
    assert out[0, 1, 0] == 6.0  # left/right R: (4+8)/2
    assert out[1, 0, 0] == 6.0  # above/below R: (4+8)/2
    assert out[0, 0, 1] == 2.0  # two in-bounds G neighbors: (2+2)/2
    assert out[1, 1, 1] == 3.0  # N/S/E/W greens: (2+4+4+2)/4
    assert out[1, 1, 2] == 12.0  # own blue site verbatim
    assert out[0, 0, 2] == 12.0  # single in-bounds diagonal B
    assert out[2, 2, 2] == 11.5  # four diagonal B: (12+10+10+14)/4


@pytest.mark.parametrize("pattern", ALL_PATTERNS)
def test_bilinear_matches_scalar_oracle(pattern, rng):
    raw = rng.uniform(size=(8, 8))
    assert np.allclose(demosaic_bilinear(raw, pattern), _bilinear_oracle(raw, pattern))


def test_bilinear_known_sites_exact(rng):
    raw = rng.uniform(size=(8, 8))
    out = demosaic_bilinear(raw, BayerPattern.RGGB)
    ch = channel_map(BayerPattern.RGGB, raw.shape)
    for c in range(3):
        sites = ch == c
        assert np.array_equal(out[..., c][sites], raw[sites])


# ---------------------------------------------------------------------------
# Malvar
# ---------------------------------------------------------------------------


def test_malvar_constant():
    out = demosaic_malvar(np.full((8, 8), 0.4), BayerPattern.RGGB)
    assert np.allclose(out, 0.4)


@pytest.mark.parametrize("pattern", ALL_PATTERNS)
def test_malvar_affine_reproduction(pattern):
    # gradient-corrected filters are exact on per-channel affine signals
    i, j = np.indices((12, 12), dtype=np.float64)
    rgb = np.stack(
        [0.3 + 0.01 * i + 0.02 * j, 0.5 - 0.015 * i + 0.01 * j, 0.2 + 0.02 * i],
        axis=2,
    )
    out = demosaic_malvar(cfa_apply(rgb, pattern), pattern)
    assert np.allclose(out[2:-2, 2:-2], rgb[2:-2, 2:-2], atol=1e-12)


@pytest.mark.parametrize("pattern", ALL_PATTERNS)
def test_malvar_matches_scalar_oracle(pattern, rng):
    raw = rng.uniform(size=(8, 8))
    assert np.allclose(demosaic_malvar(raw, pattern), _malvar_oracle(raw, pattern))


# ---------------------------------------------------------------------------
# bracketing merge
# ---------------------------------------------------------------------------


def test_merge_single_frame():
    y = np.random.default_rng(0).uniform(0.1, 0.9, size=(6, 6, 3))
    out = hdr_merge_bracket([y], [2.0], [np.ones((6, 6, 3))], 1e-3, 1e-5)
    assert np.allclose(out.data, y / 2.0)


def test_merge_consistent_frames():
    y1 = np.random.default_rng(1).uniform(0.05, 0.45, size=(6, 6, 3))
    out = hdr_merge_bracket(
        [y1, 2.0 * y1], [1.0, 2.0], [np.ones((6, 6, 3))] * 2, 1e-3, 1e-5
    )
    assert np.allclose(out.data, y1)


def test_merge_exposure_equivariance():
    rng = np.random.default_rng(2)
    ys = [rng.uniform(0.1, 0.9, size=(4, 4, 3)) for _ in range(3)]
    masks = [np.ones((4, 4, 3))] * 3
    dts = np.array([0.5, 1.0, 2.0])
    a = hdr_merge_bracket(ys, dts, masks, 1e-3, 1e-5).data
    b = hdr_merge_bracket(ys, 3.0 * dts, masks, 1e-3, 1e-5).data
    assert np.allclose(b, a / 3.0)


def test_merge_convex_combination_bounds():
    rng = np.random.default_rng(3)
    ys = [rng.uniform(0.1, 0.9, size=(5, 5, 3)) for _ in range(3)]
    dts = [0.5, 1.0, 2.0]
    masks = [np.ones((5, 5, 3))] * 3
    out = hdr_merge_bracket(ys, dts, masks, 1e-3, 1e-5).data
    ests = np.stack([y / t for y, t in zip(ys, dts)])
    assert np.all(out >= ests.min(axis=0) - 1e-12)
    assert np.all(out <= ests.max(axis=0) + 1e-12)


def test_merge_all_saturated_uses_shortest():
    y = np.ones((4, 4, 3))
    masks = [np.zeros((4, 4, 3))] * 2
    out = hdr_merge_bracket([y, y], [4.0, 0.5], masks, 1e-3, 1e-5)
    assert np.allclose(out.data, y / 0.5)


def test_merge_rejects_zero_beta():
    with pytest.raises(ValueError):
        hdr_merge_bracket([np.ones((2, 2, 3))], [1.0], [np.ones((2, 2, 3))], 1e-3, 0.0)


def test_merge_variance_near_optimal():
    # empirical variance of the fused estimator within 10% of (sum 1/v_k)^-1
    rng = np.random.default_rng(4)
    truth = 0.3
    dts = np.array([0.5, 1.0, 2.0])
    alpha, beta = 1e-3, 1e-5
    n = 100_000
    draws = []
    ys = [truth * dt + rng.normal(0, np.sqrt(alpha * truth * dt + beta), size=n) for dt in dts]
    merged = hdr_merge_bracket(
        [y.reshape(1, -1, 1).repeat(3, axis=2) for y in ys],
        dts,
        [np.ones((1, n, 3))] * 3,
        alpha,
        beta,
    ).data[0, :, 0]
    bound = 1.0 / np.sum(dts ** 2 / (alpha * truth * dts + beta))
    var = merged.var()
    assert var <= 1.1 * bound
    assert var <= min((alpha * truth * dts + beta) / dts ** 2)


def test_select_nearest_ev():
    evs = [-2.5, -0.1, 0.0, 2.2, 2.6]
    assert select_nearest_ev(evs, [-2.4, 0.0, 2.4]) == [0, 2, 3]
    assert select_nearest_ev([0.0, 0.0], [0.0]) == [0]  # tie: lower index
    with pytest.raises(ValueError):
        select_nearest_ev([0.0], [0.0, 1.0])
