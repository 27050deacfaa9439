import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refvsr import ops
from refvsr.align import (AFFINE_LINEAR_RANGE, AFFINE_SHIFT_RANGE, AffineHead, RefFeatureExtractor,
                          affine_correct, affine_resample, extract_ref_features, fold_patches,
                          squash_affine, warp_by_index)
from refvsr.flow import BLOCK, LEVELS, RADIUS, estimate_flow
from refvsr.tensor import Tensor


# ------------------------------------------------------------ alignment

@pytest.mark.parametrize("zoom,size", [(2, 16), (4, 32)])
def test_ref_extractor_lands_on_lr_grid(rng, zoom, size):
    ext = RefFeatureExtractor(8, zoom, rng=rng)
    out = extract_ref_features(Tensor(rng.random((1, 3, size, size)).astype(np.float32)), zoom, ext)
    assert out.shape == (1, 8, size // zoom, size // zoom)
    with pytest.raises(ValueError, match="zoom"):
        extract_ref_features(Tensor(np.zeros((1, 3, 8, 8))), 4 if zoom == 2 else 2, ext)


def test_fold_of_replicated_cells_is_identity(rng):
    x = rng.random((1, 2, 4, 5))
    # every patch sample equals the value of the cell it lands on
    samples = np.zeros((1, 2, 12, 15))
    for y in range(12):
        for z in range(15):
            ty = min(max(y // 3 + y % 3 - 1, 0), 3)
            tz = min(max(z // 3 + z % 3 - 1, 0), 4)
            samples[0, :, y, z] = x[0, :, ty, tz]
    assert np.allclose(fold_patches(Tensor(samples)).data, x)


def test_identity_index_map_reproduces_features(rng):
    x = rng.random((1, 3, 5, 6))
    p = np.arange(30).reshape(5, 6)
    assert np.allclose(warp_by_index(Tensor(x), p).data, x)


def test_index_map_moves_constant_patches(rng):
    ref = np.zeros((1, 1, 6, 6))
    ref[0, 0, 2:5, 2:5] = 1.0            # a 3x3 block centred at (3, 3)
    p = np.full((4, 4), 3 * 6 + 3)       # every cell points at the centre
    out = warp_by_index(Tensor(ref), p).data
    assert np.allclose(out, 1.0)


def test_index_out_of_range_rejected(rng):
    with pytest.raises(ValueError, match="out of range"):
        warp_by_index(Tensor(rng.random((1, 1, 3, 3))), np.full((2, 2), 9))


def test_zero_affine_residual_is_identity(rng):
    x = rng.random((1, 3, 5, 7))
    out = affine_resample(Tensor(x), Tensor(np.zeros((1, 6, 5, 7)))).data
    assert np.allclose(out, x, atol=1e-12)


def test_pure_translation_of_linear_ramp(rng):
    # interior of a horizontal ramp shifted by tx = 0.25 rises by 0.25
    ramp = np.tile(np.arange(8, dtype=np.float64), (1, 1, 8, 1))
    res = np.zeros((1, 6, 8, 8))
    res[:, 4] = 0.25
    out = affine_resample(Tensor(ramp), Tensor(res)).data
    assert np.allclose(out[0, 0, 2:-2, 2:-2], ramp[0, 0, 2:-2, 2:-2] + 0.25)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False), st.integers(0, 5))
def test_squashed_affine_stays_in_range(v, k):
    raw = np.zeros((1, 6, 1, 1))
    raw[0, k] = v
    out = squash_affine(Tensor(raw)).data[0, :, 0, 0]
    assert np.all(np.abs(out[:4]) <= AFFINE_LINEAR_RANGE)
    assert np.all(np.abs(out[4:]) <= AFFINE_SHIFT_RANGE)


def test_fresh_affine_head_leaves_coarse_features_unchanged(rng):
    head = AffineHead(8, 8, rng=rng)
    coarse = Tensor(rng.random((1, 4, 5, 5)).astype(np.float32))
    lr = Tensor(rng.random((1, 4, 5, 5)).astype(np.float32))
    assert np.allclose(affine_correct(coarse, lr, head).data, coarse.data, atol=1e-6)


# ------------------------------------------------------------ flow

def _textured(rng, h, w):
    img = rng.random((3, h + 16, w + 16))
    return ops.gaussian_blur3(Tensor(img[None])).data[0]


@pytest.mark.parametrize("dy,dx", [(0, 0), (1, 2), (-3, 1), (2, -2)])
def test_flow_recovers_integer_translation(rng, dy, dx):
    big = _textured(rng, 32, 48)
    prev = big[:, 8:40, 8:56]
    cur = big[:, 8 + dy:40 + dy, 8 + dx:56 + dx]   # cur(p) = prev(p + (dy, dx))
    flow = estimate_flow(cur[None], prev[None])[0]
    inner = (slice(8, -8), slice(8, -8))
    assert np.allclose(flow[0][inner], dx) and np.allclose(flow[1][inner], dy)


def test_flow_of_identical_frames_is_zero(rng):
    img = rng.random((1, 3, 16, 24))
    assert np.array_equal(estimate_flow(img, img), np.zeros((1, 2, 16, 24), np.float32))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_flow_is_finite_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((1, 3, 32, 32)), r.random((1, 3, 32, 32))
    flow = estimate_flow(a, b)
    assert np.all(np.isfinite(flow))
    assert np.abs(flow).max() <= RADIUS * (2 ** LEVELS - 1)


def test_flow_rejects_tiny_or_mismatched_frames(rng):
    with pytest.raises(ValueError, match="block"):
        estimate_flow(rng.random((1, 3, BLOCK - 1, 16)), rng.random((1, 3, BLOCK - 1, 16)))
    with pytest.raises(ValueError, match="differ"):
        estimate_flow(rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 24)))
