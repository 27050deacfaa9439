import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refvsr.metrics import (DEFAULT_BANDS, FovBandSpec, band_mask, banded_report, gaussian_window,
                            parse_bands, psnr, ssim, ssim_map)


def ssim_oracle(a, b):
    """Explicit per-window SSIM of grayscale images (valid windows only)."""
    win = gaussian_window()
    k = win.shape[0]
    h, w = a.shape
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            pa, pb = a[i:i + k, j:j + k], b[i:i + k, j:j + k]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            out[i, j] = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    return out


def test_psnr_known_values():
    a = np.zeros((3, 4, 4))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 0.01) == pytest.approx(40.0)
    assert psnr(a, a) == 100.0


def test_psnr_mask_restricts_pixels():
    a = np.zeros((1, 4, 4))
    b = a.copy()
    b[0, 0, 0] = 1.0
    mask = np.zeros((4, 4), bool)
    mask[2:, 2:] = True
    assert psnr(a, b, mask) == 100.0
    assert psnr(a, b) == pytest.approx(10 * math.log10(16))
    with pytest.raises(ValueError, match="empty"):
        psnr(a, b, np.zeros((4, 4), bool))


def test_ssim_matches_explicit_window_oracle(rng):
    a = rng.random((3, 20, 23))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert np.allclose(ssim_map(a, b), ssim_oracle(a.mean(0), b.mean(0)), atol=1e-10)


def test_ssim_frozen_value():
    # frozen from ssim_oracle on a deterministic pair
    y, x = np.mgrid[0:16, 0:16] / 15.0
    a = np.stack([x, y, x * y])
    b = np.stack([x, y, x * y]) ** 2
    want = ssim_oracle(a.mean(0), b.mean(0)).mean()
    assert ssim(a, b) == pytest.approx(want, abs=1e-12)
    assert ssim(a, b) == pytest.approx(0.7435522, abs=1e-6)


def test_ssim_identity_and_bounds(rng):
    a = rng.random((3, 16, 16))
    assert ssim(a, a) == 1.0
    assert -1 <= ssim(a, rng.random((3, 16, 16))) < 1


def test_ssim_too_small_image(rng):
    with pytest.raises(ValueError, match="smaller"):
        ssim(rng.random((3, 8, 8)), rng.random((3, 8, 8)))


@pytest.mark.parametrize("h,w", [(64, 96), (256, 384), (1080, 1920), (50, 70)])
def test_band_area_fractions(h, w):
    tol = (h + w) / (h * w)  # one pixel row plus one pixel column
    assert band_mask((h, w), FovBandSpec(0, 0.5)).mean() == pytest.approx(0.25, abs=tol)
    assert band_mask((h, w), FovBandSpec(0.5, 0.6)).mean() == pytest.approx(0.11, abs=tol)


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 120), st.integers(8, 120), st.floats(0, 0.9), st.floats(0.05, 1))
def test_band_is_difference_of_centred_rectangles(h, w, inner, width):
    outer = min(1.0, inner + width)
    m = band_mask((h, w), FovBandSpec(inner, outer))
    full_outer = band_mask((h, w), FovBandSpec(0, outer))
    assert not np.any(m & ~full_outer)
    # symmetric about the frame centre
    assert np.array_equal(m, m[::-1, ::-1])


def test_band_validation_and_parsing():
    with pytest.raises(ValueError):
        FovBandSpec(0.6, 0.5)
    assert parse_bands("0:0.5, 0.5:1") == [FovBandSpec(0, 0.5), FovBandSpec(0.5, 1)]
    with pytest.raises(ValueError, match="inner:outer"):
        parse_bands("0-0.5")
    assert [b.label for b in DEFAULT_BANDS] == ["0%-50%", "50%-60%", "50%-70%", "50%-80%", "50%-90%", "50%-100%"]


def test_banded_report_outputs(tmp_path, rng):
    gt = [rng.random((3, 32, 48)) for _ in range(2)]
    sr = [np.clip(g + 0.05 * rng.standard_normal(g.shape), 0, 1) for g in gt]
    rep = banded_report(sr, gt)
    assert len(rep.rows) == 6 and rep.frames == 2
    assert rep.rows[0].pixel_count == 16 * 24
    paths = rep.write(tmp_path, figure=True)
    assert paths["figure"].stat().st_size > 0
    kv = dict(line.split("=") for line in paths["kv"].read_text().split())
    assert float(kv["band_0_0.5.psnr"]) == pytest.approx(rep.rows[0].psnr, abs=1e-5)
    assert int(kv["band_0.5_0.6.pixel_count"]) == rep.rows[1].pixel_count
    with pytest.raises(ValueError, match="differ"):
        banded_report(sr, gt[:1])
