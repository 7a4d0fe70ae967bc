"""Tests for the preprocessing pipeline against loop-based oracles."""

import numpy as np
import pytest

from mriseq.errors import DataError
from mriseq.preprocess import (
    TOY_TARGET_DIMS,
    PreprocessConfig,
    clip_percentiles,
    crop_or_pad,
    percentile,
    preprocess_pipeline,
    resample,
    trilinear_resize,
)
from mriseq.volume import CANONICAL_ORIENTATION, Volume3D


def naive_trilinear(arr, coords_x, coords_y, coords_z):
    """Reference trilinear interpolation with explicit loops."""
    arr = np.asarray(arr, dtype=np.float64)
    out = np.zeros((len(coords_x), len(coords_y), len(coords_z)))
    for i, u in enumerate(coords_x):
        for j, v in enumerate(coords_y):
            for k, w in enumerate(coords_z):
                x0, y0, z0 = int(np.floor(u)), int(np.floor(v)), int(np.floor(w))
                x1 = min(x0 + 1, arr.shape[0] - 1)
                y1 = min(y0 + 1, arr.shape[1] - 1)
                z1 = min(z0 + 1, arr.shape[2] - 1)
                fx, fy, fz = u - x0, v - y0, w - z0
                acc = 0.0
                for dx, wx in ((x0, 1 - fx), (x1, fx)):
                    for dy, wy in ((y0, 1 - fy), (y1, fy)):
                        for dz, wz in ((z0, 1 - fz), (z1, fz)):
                            acc += wx * wy * wz * arr[dx, dy, dz]
                out[i, j, k] = acc
    return out


# ---------------------------------------------------------------------------
# percentile

def test_percentile_matches_manual_rank_interpolation():
    values = np.array([3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0])
    # sorted: 1 1 2 3 4 5 6 9; rank 25 -> 0.25 * 7 = 1.75 between 1 and 2
    assert percentile(values, 25.0) == pytest.approx(1.75, abs=1e-12)
    assert percentile(values, 50.0) == pytest.approx(3.5, abs=1e-12)
    assert percentile(values, 0.0) == 1.0
    assert percentile(values, 100.0) == 9.0


def test_percentile_random_against_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        values = rng.normal(size=rng.integers(2, 200))
        q = float(rng.uniform(0, 100))
        srt = np.sort(values.astype(np.float64))
        rank = q / 100.0 * (srt.size - 1)
        lo = int(np.floor(rank))
        hi = min(lo + 1, srt.size - 1)
        expected = srt[lo] + (rank - lo) * (srt[hi] - srt[lo])
        assert percentile(values, q) == pytest.approx(expected, abs=1e-9)


def test_percentile_empty_raises():
    with pytest.raises(DataError):
        percentile(np.array([]), 50.0)


# ---------------------------------------------------------------------------
# resample

def test_resample_equal_spacing_is_identity():
    rng = np.random.default_rng(1)
    vol = Volume3D.from_array(rng.normal(size=(4, 4, 4)).astype(np.float32),
                              (1.0, 1.0, 1.0))
    assert resample(vol, (1.0, 1.0, 1.0)) is vol


def test_resample_axis_coordinates_hand_case():
    # spacing 1 -> 1.5 over 5 samples: output reads input coords 0, 1.5, 3.
    line = np.array([10.0, 20.0, 30.0, 40.0, 50.0], dtype=np.float32)
    vol = Volume3D.from_array(line.reshape(5, 1, 1), (1.0, 1.0, 1.0))
    out = resample(vol, (1.5, 1.0, 1.0))
    assert out.dims == (3, 1, 1)
    np.testing.assert_allclose(out.array()[:, 0, 0], [10.0, 25.0, 40.0],
                               atol=1e-6)
    assert out.spacing == (1.5, 1.0, 1.0)


def test_resample_downsample_by_two_reads_even_indices():
    arr = np.arange(8, dtype=np.float32).reshape(8, 1, 1)
    vol = Volume3D.from_array(arr, (1.0, 1.0, 1.0))
    out = resample(vol, (2.0, 1.0, 1.0))
    assert out.dims == (4, 1, 1)
    np.testing.assert_allclose(out.array()[:, 0, 0], [0.0, 2.0, 4.0, 6.0])


def test_resample_matches_naive_trilinear():
    rng = np.random.default_rng(2)
    arr = rng.normal(size=(6, 5, 4))
    vol = Volume3D.from_array(arr.astype(np.float32), (1.0, 2.0, 3.0))
    target = (1.6, 1.1, 4.0)
    out = resample(vol, target)
    coords = []
    for axis, (t, s, n) in enumerate(zip(target, vol.spacing, vol.dims)):
        n_out = out.dims[axis]
        u = np.clip(np.arange(n_out) * (t / s), 0.0, n - 1)
        coords.append(u)
    expected = naive_trilinear(arr, *coords)
    np.testing.assert_allclose(out.array(), expected, atol=1e-6)


def test_resample_output_dims_round_half_up():
    vol = Volume3D.from_array(np.zeros((5, 5, 5), dtype=np.float32),
                              (1.0, 1.0, 1.0))
    # 5 * 1 / 2 = 2.5 rounds up to 3
    assert resample(vol, (2.0, 2.0, 2.0)).dims == (3, 3, 3)


def test_resample_rejects_bad_spacing():
    vol = Volume3D.from_array(np.zeros((2, 2, 2), dtype=np.float32),
                              (1.0, 1.0, 1.0))
    with pytest.raises(DataError):
        resample(vol, (0.0, 1.0, 1.0))


# ---------------------------------------------------------------------------
# trilinear_resize (endpoint-aligned, used for saliency and coarse fields)

def test_trilinear_resize_identity():
    rng = np.random.default_rng(3)
    arr = rng.normal(size=(4, 3, 5))
    np.testing.assert_allclose(trilinear_resize(arr, (4, 3, 5)), arr, atol=1e-12)


def test_trilinear_resize_preserves_linear_ramp():
    # exact for linear functions along the resized axis
    x = np.arange(5, dtype=np.float64)
    arr = np.broadcast_to(x[:, None, None], (5, 2, 2)).copy()
    out = trilinear_resize(arr, (9, 2, 2))
    np.testing.assert_allclose(out[:, 0, 0], np.linspace(0.0, 4.0, 9), atol=1e-12)


def test_trilinear_resize_downsample_hand_case():
    arr = np.arange(5, dtype=np.float64).reshape(5, 1, 1)
    out = trilinear_resize(arr, (3, 1, 1))
    np.testing.assert_allclose(out[:, 0, 0], [0.0, 2.0, 4.0], atol=1e-12)


def test_trilinear_resize_size_one_axis_reads_midpoint():
    arr = np.array([1.0, 3.0, 5.0, 7.0]).reshape(4, 1, 1)
    out = trilinear_resize(arr, (1, 1, 1))
    # midpoint coordinate (4-1)/2 = 1.5 -> (3 + 5) / 2
    assert out[0, 0, 0] == pytest.approx(4.0, abs=1e-12)


def test_trilinear_resize_matches_naive_oracle():
    rng = np.random.default_rng(4)
    arr = rng.normal(size=(3, 4, 2))
    out_dims = (5, 3, 4)
    out = trilinear_resize(arr, out_dims)
    coords = []
    for n_out, n_in in zip(out_dims, arr.shape):
        if n_out == 1:
            coords.append(np.array([(n_in - 1) / 2.0]))
        else:
            coords.append(np.arange(n_out) * ((n_in - 1) / (n_out - 1)))
    expected = naive_trilinear(arr, *coords)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_trilinear_resize_validates_input():
    with pytest.raises(ValueError):
        trilinear_resize(np.zeros((2, 2)), (2, 2, 2))
    with pytest.raises(ValueError):
        trilinear_resize(np.zeros((2, 2, 2)), (0, 2, 2))


# ---------------------------------------------------------------------------
# clip and crop/pad

def test_clip_percentiles_bounds_from_sorted_values():
    rng = np.random.default_rng(5)
    arr = rng.normal(size=(8, 8, 4)).astype(np.float32)
    vol = Volume3D.from_array(arr, (1.0, 1.0, 1.0))
    out = clip_percentiles(vol, 5.0, 95.0)
    lo = percentile(arr, 5.0)
    hi = percentile(arr, 95.0)
    np.testing.assert_allclose(
        out.array(), np.clip(arr.astype(np.float64), lo, hi), atol=1e-6)


def test_clip_is_idempotent():
    rng = np.random.default_rng(6)
    vol = Volume3D.from_array(rng.normal(size=(6, 6, 3)).astype(np.float32),
                              (1.0, 1.0, 1.0))
    once = clip_percentiles(vol, 2.0, 98.0)
    twice = clip_percentiles(once, 0.0, 100.0)
    np.testing.assert_array_equal(once.data, twice.data)


def test_clip_rejects_unordered_bounds():
    vol = Volume3D.from_array(np.zeros((2, 2, 2), dtype=np.float32),
                              (1.0, 1.0, 1.0))
    with pytest.raises(DataError):
        clip_percentiles(vol, 99.0, 1.0)


def test_crop_centers_and_drops_edges():
    arr = np.arange(6, dtype=np.float32).reshape(6, 1, 1)
    vol = Volume3D.from_array(arr, (1.0, 1.0, 1.0))
    out = crop_or_pad(vol, (3, 1, 1))
    # start at floor((6-3)/2) = 1
    np.testing.assert_array_equal(out.array()[:, 0, 0], [1.0, 2.0, 3.0])


def test_pad_puts_odd_extra_on_high_side():
    arr = np.array([1.0, 2.0, 3.0], dtype=np.float32).reshape(3, 1, 1)
    vol = Volume3D.from_array(arr, (1.0, 1.0, 1.0))
    out = crop_or_pad(vol, (6, 1, 1))
    # floor((6-3)/2) = 1 zero before, 2 after
    np.testing.assert_array_equal(out.array()[:, 0, 0],
                                  [0.0, 1.0, 2.0, 3.0, 0.0, 0.0])


def test_crop_or_pad_mixed_axes():
    rng = np.random.default_rng(7)
    arr = rng.normal(size=(5, 2, 4)).astype(np.float32)
    vol = Volume3D.from_array(arr, (1.0, 1.0, 1.0))
    out = crop_or_pad(vol, (3, 4, 4))
    assert out.dims == (3, 4, 4)
    np.testing.assert_array_equal(out.array()[:, 1:3, :], arr[1:4, :, :])
    assert float(np.abs(out.array()[:, 0, :]).sum()) == 0.0


# ---------------------------------------------------------------------------
# the full pipeline

def test_pipeline_always_hits_target_dims_randomized():
    rng = np.random.default_rng(8)
    cfg = PreprocessConfig(target_spacing=(1.5, 1.5, 7.8),
                           target_dims=(12, 12, 4))
    for _ in range(25):
        dims = tuple(int(d) for d in rng.integers(3, 24, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.4, 9.0, size=3))
        orientation = ["R→L", "P→A", "I→S"]
        rng.shuffle(orientation)
        arr = rng.normal(size=dims).astype(np.float32)
        vol = Volume3D.from_array(arr, spacing, tuple(orientation))
        out = preprocess_pipeline(vol, cfg)
        assert out.dims == cfg.target_dims
        assert out.spacing == cfg.target_spacing
        assert out.orientation == CANONICAL_ORIENTATION
        assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0)


def test_pipeline_invariant_to_gain_and_offset():
    # percentile rescaling cancels any positive affine intensity map
    rng = np.random.default_rng(9)
    arr = rng.normal(size=(10, 9, 6)).astype(np.float32)
    cfg = PreprocessConfig(target_spacing=(1.0, 1.0, 1.0), target_dims=(8, 8, 4))
    base = preprocess_pipeline(Volume3D.from_array(arr, (0.9, 1.1, 1.3)), cfg)
    mapped = preprocess_pipeline(
        Volume3D.from_array(3.7 * arr + 12.0, (0.9, 1.1, 1.3)), cfg)
    np.testing.assert_allclose(mapped.data, base.data, atol=1e-5)


def test_pipeline_constant_volume_maps_to_zeros():
    vol = Volume3D.from_array(np.full((4, 4, 4), 5.0, dtype=np.float32),
                              (1.0, 1.0, 1.0))
    cfg = PreprocessConfig(target_spacing=(1.0, 1.0, 1.0), target_dims=(4, 4, 4))
    out = preprocess_pipeline(vol, cfg)
    np.testing.assert_array_equal(out.data, np.zeros(64, dtype=np.float32))


def test_pipeline_without_rescale_keeps_clip_bounds():
    rng = np.random.default_rng(10)
    arr = rng.normal(size=(6, 6, 6)).astype(np.float32)
    cfg = PreprocessConfig(target_spacing=(1.0, 1.0, 1.0), target_dims=(6, 6, 6),
                           rescale_to_unit=False)
    out = preprocess_pipeline(Volume3D.from_array(arr, (1.0, 1.0, 1.0)), cfg)
    assert out.data.min() == pytest.approx(percentile(arr, 1.0), abs=1e-5)
    assert out.data.max() == pytest.approx(percentile(arr, 99.0), abs=1e-5)


def test_preprocess_config_validation_and_digest():
    with pytest.raises(DataError):
        PreprocessConfig(target_dims=(0, 2, 2))
    with pytest.raises(DataError):
        PreprocessConfig(target_spacing=(1.0, -1.0, 1.0))
    with pytest.raises(DataError):
        PreprocessConfig(clip_percentiles=(99.0, 1.0))

    a = PreprocessConfig(target_dims=TOY_TARGET_DIMS)
    b = PreprocessConfig(target_dims=tuple(TOY_TARGET_DIMS))
    c = PreprocessConfig(target_dims=(16, 16, 8))
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert len(a.digest()) == 16
