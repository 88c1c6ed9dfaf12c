from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_boxes
from tubeletkit.geometry import (
    Box,
    DeltaKind,
    MalformedDeltaError,
    MovementDelta,
    decode_array,
    decode_movement,
    encode_array,
    encode_movement,
    from_corners,
    iou,
    iou_matrix,
    smoothed_l1,
    smoothed_l1_grad,
    to_corners,
    validate_boxes,
)

coord = st.floats(-500, 500, allow_nan=False)
size = st.floats(0.5, 400, allow_nan=False)
boxes = st.builds(Box, coord, coord, size, size)


def brute_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


class TestBox:
    @pytest.mark.parametrize("w,h", [(0, 1), (1, 0), (-2, 3)])
    def test_rejects_non_positive_size(self, w, h):
        with pytest.raises(ValueError):
            Box(0, 0, w, h)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Box(float("nan"), 0, 1, 1)

    def test_corner_round_trip(self):
        b = Box(10, 20, 8, 4)
        assert b.corners() == (6, 18, 14, 22)
        assert Box.from_corners(*b.corners()) == b

    def test_array_corner_helpers(self, rng):
        a = random_boxes(rng, 20)
        np.testing.assert_allclose(from_corners(to_corners(a)), a, rtol=0, atol=1e-12)

    def test_validate_boxes(self):
        with pytest.raises(ValueError):
            validate_boxes(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            validate_boxes(np.array([[0, 0, 1, 0.0]]))


class TestIou:
    def test_identical_is_one(self):
        assert iou(Box(3, 4, 5, 6), Box(3, 4, 5, 6)) == 1.0

    def test_disjoint_is_zero(self):
        assert iou(Box(0, 0, 2, 2), Box(10, 10, 2, 2)) == 0.0

    def test_half_shift_is_one_third(self):
        # overlap 2, union 4 + 4 - 2
        assert iou(Box(0, 0, 2, 2), Box(1, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-15)

    def test_matrix_matches_brute_force(self, rng):
        a, b = random_boxes(rng, 15), random_boxes(rng, 9)
        want = np.array([[brute_iou(x, y) for y in b] for x in a])
        np.testing.assert_allclose(iou_matrix(a, b), want, rtol=0, atol=1e-13)

    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert v == pytest.approx(iou(b, a), abs=1e-12)


class TestCodec:
    def test_self_encoding_is_exact_zero(self):
        b = Box(12.3, 45.6, 7.8, 9.1)
        d = encode_movement(b, b)
        assert (d.dx, d.dy, d.dw, d.dh) == (0.0, 0.0, 0.0, 0.0)

    def test_hand_example(self):
        d = encode_movement(Box(10, 10, 20, 40), Box(14, 0, 40, 20))
        assert d.dx == pytest.approx(0.2)
        assert d.dy == pytest.approx(-0.25)
        assert d.dw == pytest.approx(math.log(2))
        assert d.dh == pytest.approx(-math.log(2))

    @settings(max_examples=300)
    @given(boxes, boxes)
    def test_round_trip(self, a, b):
        back = decode_movement(a, encode_movement(a, b))
        for got, want in zip(back.as_array(), b.as_array()):
            assert got == pytest.approx(want, rel=1e-9, abs=1e-9)

    def test_decode_cap_raises(self):
        with pytest.raises(MalformedDeltaError):
            decode_movement(Box(0, 0, 1, 1), MovementDelta(0, 0, 10.5, 0))

    def test_decode_requires_raw(self):
        with pytest.raises(ValueError):
            decode_movement(Box(0, 0, 1, 1), MovementDelta(0, 0, 0, 0, DeltaKind.NORMALIZED))

    def test_delta_rejects_non_finite(self):
        with pytest.raises(ValueError):
            MovementDelta(0, float("inf"), 0, 0)

    def test_array_codec_matches_scalar(self, rng):
        a, b = random_boxes(rng, 30), random_boxes(rng, 30)
        d = encode_array(a, b)
        for i in range(30):
            np.testing.assert_array_equal(d[i], encode_movement(Box.from_array(a[i]), Box.from_array(b[i])).as_array())
        back, capped = decode_array(a, d)
        assert not capped.any()
        np.testing.assert_allclose(back, b, rtol=1e-12, atol=1e-9)

    def test_array_decode_clips_and_flags(self):
        out, capped = decode_array(np.array([[0, 0, 1, 1.0]]), np.array([[0, 0, 12.0, -0.5]]), cap=10.0)
        assert capped.tolist() == [True]
        assert out[0, 2] == pytest.approx(math.exp(10.0))
        assert out[0, 3] == pytest.approx(math.exp(-0.5))


class TestSmoothedL1:
    @pytest.mark.parametrize("x,want", [(0.0, 0.0), (0.5, 0.125), (-0.5, 0.125), (1.0, 0.5), (3.0, 2.5), (-2.0, 1.5)])
    def test_values(self, x, want):
        assert smoothed_l1(x) == pytest.approx(want)

    @given(st.floats(-5, 5).filter(lambda v: abs(abs(v) - 1.0) > 1e-3))
    def test_gradient_matches_central_difference(self, x):
        eps = 1e-6
        num = (smoothed_l1(x + eps) - smoothed_l1(x - eps)) / (2 * eps)
        assert smoothed_l1_grad(x) == pytest.approx(num, abs=1e-6)

    def test_vectorized(self):
        np.testing.assert_array_equal(smoothed_l1(np.array([0.0, 2.0])), [0.0, 1.5])
