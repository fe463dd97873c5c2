import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from wirepipe.imagecore import (
    InvalidInputError,
    argmax_classes,
    as_image,
    as_mask,
    as_prob,
    bilinear_resize,
    bilinear_resize_crop,
    dilate,
    footprint_bounds,
    luminance,
    max_filter,
    maxpool_downsample_mask,
    min_filter,
    onion_ring,
    softmax_logits,
)

import oracles

unit = st.floats(0.0, 1.0, allow_nan=False, width=64)


def rand_image(h, w, c=3, seed=0):
    return np.random.default_rng(seed).random((h, w, c))


def rand_mask(h, w, density=0.1, seed=0):
    return (np.random.default_rng(seed).random((h, w)) < density).astype(np.uint8)


class TestValidation:
    def test_gray_promoted(self):
        assert as_image(np.zeros((4, 5))).shape == (4, 5, 1)

    def test_float32_kept(self):
        assert as_image(np.zeros((2, 2, 3), np.float32)).dtype == np.float32

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf, -0.1, 1.5])
    def test_range_checked(self, bad):
        a = np.zeros((3, 3, 3))
        a[1, 1, 2] = bad
        with pytest.raises(InvalidInputError):
            as_image(a)

    def test_channel_limits(self):
        with pytest.raises(InvalidInputError):
            as_image(np.zeros((2, 2, 9)))
        with pytest.raises(InvalidInputError):
            as_image(np.zeros((2, 2, 3)), channels=1)
        with pytest.raises(InvalidInputError):
            as_image(np.zeros((0, 2, 3)))

    def test_mask_must_be_binary(self):
        assert as_mask(np.array([[True, False]])).dtype == np.uint8
        with pytest.raises(InvalidInputError):
            as_mask(np.array([[0, 2]]))

    def test_prob_must_normalise(self):
        as_prob(np.full((2, 2, 2), 0.5))
        with pytest.raises(InvalidInputError):
            as_prob(np.full((2, 2, 2), 0.6))


class TestLuminance:
    def test_black_and_white(self):
        assert np.all(luminance(np.zeros((4, 4, 3))) == 0)
        np.testing.assert_allclose(luminance(np.ones((4, 4, 3))), 1.0, atol=1e-12)

    def test_red_pixel(self):
        assert luminance(np.array([[[1.0, 0.0, 0.0]]]))[0, 0, 0] == pytest.approx(0.2126)

    def test_shape_and_errors(self):
        assert luminance(rand_image(5, 6)).shape == (5, 6, 1)
        with pytest.raises(InvalidInputError):
            luminance(np.zeros((2, 2, 1)))


class TestRankFilters:
    def test_constant(self):
        a = np.full((9, 7), 0.37)
        assert np.all(min_filter(a) == 0.37) and np.all(max_filter(a) == 0.37)

    def test_single_white_pixel(self):
        a = np.zeros((12, 12))
        a[5, 5] = 1.0
        hi = max_filter(a, 6)
        # the window of output row i spans [i-2, i+3], so rows 2..7 see row 5
        expected = np.zeros_like(a)
        expected[2:8, 2:8] = 1.0
        np.testing.assert_array_equal(hi, expected)
        assert not min_filter(a, 6).any()

    def test_edge_clipped_block(self):
        a = np.zeros((8, 8))
        a[0, 7] = 1.0
        expected = np.zeros_like(a)
        expected[0:3, 4:8] = 1.0
        np.testing.assert_array_equal(max_filter(a, 6), expected)

    @pytest.mark.parametrize("k", [1, 2, 3, 4, 6])
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_brute_force(self, k, dtype):
        a = np.random.default_rng(k).random((32, 32)).astype(dtype)
        np.testing.assert_array_equal(min_filter(a, k), oracles.window_rank(a, k, np.min))
        np.testing.assert_array_equal(max_filter(a, k), oracles.window_rank(a, k, np.max))

    def test_channel_axis_kept(self):
        a = np.random.default_rng(0).random((6, 5, 1))
        assert min_filter(a).shape == (6, 5, 1)
        with pytest.raises(InvalidInputError):
            min_filter(np.zeros((4, 4, 2)))

    @pytest.mark.parametrize("k", [0, -1, 2.5])
    def test_bad_kernel(self, k):
        with pytest.raises(InvalidInputError):
            max_filter(np.zeros((4, 4)), k)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 20)), elements=unit),
           st.integers(1, 7))
    def test_sandwich(self, a, k):
        assert np.all(min_filter(a, k) <= a) and np.all(a <= max_filter(a, k))


class TestBilinear:
    def test_identity_is_bitwise(self):
        a = rand_image(13, 17)
        out = bilinear_resize(a, 13, 17)
        assert out is not a
        np.testing.assert_array_equal(out, a)

    def test_checkerboard_to_one_pixel(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert bilinear_resize(a, 1, 1)[0, 0] == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("size", [(1, 1), (3, 50), (64, 64), (100, 7)])
    def test_constant_stays_constant(self, size):
        a = np.full((20, 30, 3), 0.3)
        np.testing.assert_allclose(bilinear_resize(a, *size), 0.3, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("shape,out", [
        ((8, 8, 3), (16, 16)), ((16, 16, 3), (8, 8)), ((7, 11, 1), (13, 5)),
        ((1, 9, 3), (4, 20)), ((9, 1, 2), (3, 3)), ((6, 6, 6), (10, 14)), ((5, 9), (12, 4)),
    ])
    def test_matches_reference(self, shape, out):
        a = np.random.default_rng(1).random(shape)
        np.testing.assert_allclose(bilinear_resize(a, *out), oracles.bilinear(a, *out),
                                   rtol=0, atol=1e-12)

    def test_crop_matches_full(self):
        a = rand_image(10, 12)
        full = bilinear_resize(a, 37, 29)
        crop = bilinear_resize_crop(a, 37, 29, (5, 9, 11, 20))
        np.testing.assert_allclose(crop, full[9:29, 5:16], rtol=0, atol=1e-13)

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            bilinear_resize(np.zeros((4, 4)), 0, 3)
        with pytest.raises(InvalidInputError):
            bilinear_resize_crop(np.zeros((4, 4)), 8, 8, (4, 4, 5, 1))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3)),
                  elements=unit),
           st.integers(1, 30), st.integers(1, 30))
    def test_stays_in_range(self, a, oh, ow):
        out = bilinear_resize(a, oh, ow)
        assert out.shape == (oh, ow, 3)
        assert out.min() >= a.min() - 1e-12 and out.max() <= a.max() + 1e-12


class TestMaxpool:
    def test_zero(self):
        assert not maxpool_downsample_mask(np.zeros((64, 64), np.uint8), 8, 8).any()

    def test_single_pixel_survives(self):
        m = np.zeros((1024, 1024), np.uint8)
        m[700, 33] = 1
        out = maxpool_downsample_mask(m, 64, 64)
        assert out.sum() == 1 and out[700 // 16, 33 // 16] == 1

    def test_thin_line_survives(self):
        m = np.zeros((64, 64), np.uint8)
        m[21, :] = 1
        out = maxpool_downsample_mask(m, 8, 8)
        assert out.sum() == 8 and out[21 // 8].all()

    def test_footprints(self):
        lo, hi = footprint_bounds(10, 4)
        np.testing.assert_array_equal(lo, [0, 2, 5, 7])
        np.testing.assert_array_equal(hi, [3, 5, 8, 10])

    @pytest.mark.parametrize("shape,out", [((64, 64), (32, 32)), ((37, 53), (10, 7)),
                                           ((30, 30), (30, 11)), ((9, 9), (1, 1))])
    def test_brute_force(self, shape, out):
        m = rand_mask(*shape, density=0.02, seed=3)
        np.testing.assert_array_equal(maxpool_downsample_mask(m, *out), oracles.maxpool(m, *out))

    def test_upscale_rejected(self):
        with pytest.raises(InvalidInputError):
            maxpool_downsample_mask(np.zeros((4, 4), np.uint8), 8, 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40), st.data())
    def test_never_loses_annotation(self, h, w, data):
        oh = data.draw(st.integers(1, h))
        ow = data.draw(st.integers(1, w))
        m = data.draw(arrays(np.uint8, (h, w), elements=st.integers(0, 1)))
        out = maxpool_downsample_mask(m, oh, ow)
        r_lo, r_hi = footprint_bounds(h, oh)
        c_lo, c_hi = footprint_bounds(w, ow)
        covered = np.zeros_like(m)
        for i, j in zip(*np.nonzero(out)):
            covered[r_lo[i]:r_hi[i], c_lo[j]:c_hi[j]] = 1
        assert np.all(covered >= m)


class TestDilation:
    def test_examples(self):
        assert not dilate(np.zeros((5, 5), np.uint8), 3).any()
        m = np.zeros((7, 7), np.uint8)
        m[3, 3] = 1
        expected = np.zeros_like(m)
        expected[2:5, 2:5] = 1
        np.testing.assert_array_equal(dilate(m, 3), expected)
        full = np.ones((6, 6), np.uint8)
        np.testing.assert_array_equal(dilate(full, 4), full)

    @pytest.mark.parametrize("d", [1, 2, 3, 6, 7])
    def test_brute_force(self, d):
        m = rand_mask(24, 31, density=0.05, seed=d)
        np.testing.assert_array_equal(dilate(m, d), oracles.dilate(m, d))

    def test_ring_examples(self):
        assert not onion_ring(np.zeros((5, 5), np.uint8), 3).any()
        m = np.zeros((7, 7), np.uint8)
        m[3, 3] = 1
        ring = onion_ring(m, 3)
        assert ring.sum() == 8 and ring[3, 3] == 0
        assert not onion_ring(np.ones((5, 5), np.uint8), 7).any()

    def test_bad_d(self):
        with pytest.raises(InvalidInputError):
            dilate(np.zeros((3, 3), np.uint8), 0)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 16), st.integers(1, 16)),
                  elements=st.integers(0, 1)),
           st.integers(1, 6), st.integers(0, 3))
    def test_properties(self, m, d, extra):
        out = dilate(m, d)
        assert np.all(out >= m)
        assert np.all(dilate(m, d + extra) >= out)
        bigger = m.copy()
        bigger[0, 0] = 1
        assert np.all(dilate(bigger, d) >= out)
        assert not (onion_ring(m, d) & m).any()


class TestSoftmax:
    def test_tie_goes_to_background(self):
        p = softmax_logits(np.zeros((3, 3, 2)))
        np.testing.assert_array_equal(p, 0.5)
        assert not argmax_classes(p).any()

    def test_confident_wire(self):
        p = softmax_logits(np.array([[[0.0, 10.0]]]))
        assert p[0, 0, 1] == pytest.approx(1 / (1 + np.exp(-10)), rel=1e-12)
        assert p[0, 0, 1] == pytest.approx(0.99995, abs=1e-5)
        assert argmax_classes(p)[0, 0] == 1

    def test_many_classes(self):
        z = np.random.default_rng(0).normal(size=(4, 4, 3))
        e = np.exp(z)
        np.testing.assert_allclose(softmax_logits(z), e / e.sum(axis=2, keepdims=True))

    # logits on a 1/64 grid: differences far below machine precision would
    # collapse to an exact 0.5 tie after normalisation
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)),
                  elements=st.integers(-3200, 3200).map(lambda v: v / 64)),
           st.integers(-6400, 6400).map(lambda v: v / 64))
    def test_properties(self, z, shift):
        p = softmax_logits(z)
        assert np.all(np.abs(p.sum(axis=2) - 1) <= 1e-5)
        assert p.min() >= 0 and p.max() <= 1
        np.testing.assert_allclose(softmax_logits(z + shift), p, atol=1e-9)
        np.testing.assert_array_equal(argmax_classes(p), (z[..., 1] > z[..., 0]).astype(np.uint8))
