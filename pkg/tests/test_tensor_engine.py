"""Tensor primitives, the gradient tape and finite-difference checking."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from primitive_cases import CASE_NAMES, T, primitive_cases, rand
from shiftlic import ops
from shiftlic.gradcheck import finite_diff_check, param_grad_check
from shiftlic.nn import Conv1x1
from shiftlic.shift import ShiftSpec, spatial_shift
from shiftlic.tensor import (NonFiniteError, Parameter, ShapeError, Tape, TapeError,
                             backward, count_macs)

GRAD_TOL = 1e-4


class TestConv1x1:
    def test_hand_example(self):
        x = T([[[[1.0]], [[2.0]]]])
        out = ops.conv1x1(x, T([[1, 1], [0, 1]]), T([0, 0]))
        np.testing.assert_array_equal(out.data.reshape(-1), [3.0, 2.0])

    def test_identity_weight(self, rng):
        x = rand(rng, 2, 5, 3, 4)
        out = ops.conv1x1(x, T(np.eye(5)), T(np.zeros(5)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ops.conv1x1(rand(rng, 1, 3, 2, 2), rand(rng, 4, 2))

    def test_counts_weight_multiplies(self, rng):
        with count_macs() as c:
            ops.conv1x1(rand(rng, 2, 3, 4, 5), rand(rng, 6, 3), rand(rng, 6))
        assert c.total_macs == 2 * 4 * 5 * 6 * 3


class TestDepthwise:
    def test_hand_example(self):
        out = ops.depthwise_conv3x3(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 3, 3))), T([0.0]))
        assert out.data[0, 0, 1, 1] == 9
        assert out.data[0, 0, 0, 0] == 4
        assert out.data[0, 0, 0, 1] == 6

    def test_delta_kernel(self, rng):
        x = rand(rng, 2, 3, 5, 4)
        k = np.zeros((3, 3, 3))
        k[:, 1, 1] = 1
        np.testing.assert_array_equal(ops.depthwise_conv3x3(x, T(k), T(np.zeros(3))).data, x.data)

    def test_matches_scipy_correlation(self, rng):
        from scipy.signal import correlate2d
        x = rand(rng, 1, 2, 6, 5)
        w = rand(rng, 2, 3, 3)
        out = ops.depthwise_conv3x3(x, w)
        for c in range(2):
            ref = correlate2d(x.data[0, c], w.data[c], mode="same", boundary="fill")
            np.testing.assert_allclose(out.data[0, c], ref, atol=1e-12)


class TestResample:
    def test_down(self):
        out = ops.resample(T([[[[1, 3], [5, 7]]]]), 2, "down")
        assert out.data.reshape(-1).tolist() == [4.0]

    def test_up(self):
        out = ops.resample(T([[[[4.0]]]]), 2, "up")
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_constant_fixed_point(self):
        x = T(np.full((1, 2, 8, 8), 3.25))
        np.testing.assert_array_equal(ops.resample(ops.resample(x, 4, "down"), 4, "up").data, x.data)

    def test_indivisible(self, rng):
        with pytest.raises(ShapeError):
            ops.resample(rand(rng, 1, 1, 6, 6), 4, "down")


class TestPixelRearrange:
    def test_raster_order(self):
        out = ops.pixel_rearrange(T([[[[1, 2], [3, 4]]]]), 2, "space_to_channel")
        assert out.shape == (1, 4, 1, 1)
        assert out.data.reshape(-1).tolist() == [1, 2, 3, 4]

    @given(st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3),
           st.integers(0, 2**31 - 1))
    def test_inverse_pair(self, c, r, hb, wb, seed):
        x = T(np.random.default_rng(seed).standard_normal((2, c, r * hb, r * wb)))
        down = ops.pixel_rearrange(x, r, "space_to_channel")
        assert down.shape == (2, c * r * r, hb, wb)
        np.testing.assert_array_equal(ops.pixel_rearrange(down, r, "channel_to_space").data, x.data)

    def test_r1_identity(self, rng):
        x = rand(rng, 1, 3, 4, 4)
        np.testing.assert_array_equal(ops.pixel_rearrange(x, 1, "space_to_channel").data, x.data)

    def test_divisibility(self, rng):
        with pytest.raises(ShapeError):
            ops.pixel_rearrange(rand(rng, 1, 3, 4, 4), 2, "channel_to_space")
        with pytest.raises(ShapeError):
            ops.pixel_rearrange(rand(rng, 1, 3, 5, 4), 2, "space_to_channel")


class TestGelu:
    def test_values_against_erf(self):
        xs = np.array([-3.0, -1.0, 0.0, 0.5, 1.0, 10.0])
        ref = [x * 0.5 * (1 + math.erf(x / math.sqrt(2))) for x in xs]
        np.testing.assert_allclose(ops.gelu(T(xs)).data, ref, rtol=1e-12, atol=1e-15)

    def test_known_points(self):
        assert ops.gelu(T([0.0])).data[0] == 0.0
        assert abs(ops.gelu(T([1.0])).data[0] - 0.841345) < 1e-5
        assert abs(ops.gelu(T([10.0])).data[0] - 10.0) < 1e-6


class TestElementwise:
    def test_mul(self):
        assert ops.ew(T([2, 3]), T([4, 5]), "mul").data.tolist() == [8, 15]

    def test_add_zero(self, rng):
        x = rand(rng, 1, 2, 3, 3)
        np.testing.assert_array_equal(ops.ew(x, T(np.zeros(x.shape)), "add").data, x.data)

    def test_ew_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ops.ew(rand(rng, 1, 2, 3, 3), rand(rng, 1, 2, 3, 4), "add")

    @given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_concat_split_inverse(self, n, k, seed):
        x = T(np.random.default_rng(seed).standard_normal((1, n * k, 2, 3)))
        parts = ops.channel_split(x, n)
        assert len(parts) == n
        np.testing.assert_array_equal(ops.channel_concat(parts).data, x.data)

    def test_split_indivisible(self, rng):
        with pytest.raises(ShapeError):
            ops.channel_split(rand(rng, 1, 6, 2, 2), 4)




@pytest.mark.parametrize("name", CASE_NAMES)
def test_primitive_gradient_matches_finite_differences(name):
    fn, x = primitive_cases(np.random.default_rng(7))[name]
    assert finite_diff_check(fn, x) < GRAD_TOL


class TestFiniteDiffCheck:
    def test_gelu_is_tight(self, rng):
        assert finite_diff_check(ops.gelu, rand(rng, 1, 2, 3, 3)) < 1e-6

    def test_identity(self, rng):
        assert finite_diff_check(lambda t: ops.scale(t, 1.0), rand(rng, 1, 1, 2, 2)) < 1e-9

    def test_shift_is_tight(self, rng):
        assert finite_diff_check(lambda t: spatial_shift(t, ShiftSpec()), rand(rng, 1, 4, 4, 4)) < 1e-6


class TestTape:
    def test_sum_of_squares(self, rng):
        p = Parameter(rng.standard_normal((1, 2, 3, 3)))
        with Tape() as tape:
            loss = ops.sum_(ops.square(p))
        tape.backward(loss)
        np.testing.assert_allclose(p.grad, 2 * p.data)

    def test_module_backward_function(self, rng):
        p = Parameter(rng.standard_normal(4))
        with Tape():
            loss = ops.sum_(ops.scale(p, 3.0))
        backward(loss)
        np.testing.assert_array_equal(p.grad, np.full(4, 3.0))

    def test_unreached_parameter_stays_zero(self, rng):
        used, unused = Parameter(rng.standard_normal(3)), Parameter(rng.standard_normal(3))
        with Tape() as tape:
            loss = ops.sum_(used)
        tape.backward(loss)
        assert not unused.grad.any()

    def test_double_backward_rejected(self, rng):
        p = Parameter(rng.standard_normal(3))
        with Tape() as tape:
            loss = ops.sum_(p)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_non_scalar_loss_rejected(self, rng):
        p = Parameter(rng.standard_normal(3))
        with Tape() as tape:
            out = ops.scale(p, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(out)

    def test_untracked_loss_rejected(self):
        with Tape() as tape:
            loss = ops.sum_(T([1.0, 2.0]))
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_shared_input_accumulates(self, rng):
        p = Parameter(rng.standard_normal(3))
        with Tape() as tape:
            loss = ops.sum_(ops.mul(p, p))
        tape.backward(loss)
        np.testing.assert_allclose(p.grad, 2 * p.data)

    def test_non_finite_from_finite_inputs(self):
        with pytest.raises(NonFiniteError):
            ops.log(T([0.0, 1.0]))

    def test_param_grad_check_on_conv(self, rng):
        conv = Conv1x1(3, 2, rng).astype(np.float64)
        x = rand(rng, 1, 3, 2, 2)
        err = param_grad_check(lambda: ops.sum_(ops.square(conv(x))), conv.parameters())
        assert err < GRAD_TOL


@given(st.integers(1, 2), st.sampled_from([4, 8]), st.sampled_from([2, 4, 8]),
       st.sampled_from([2, 4, 8]), st.integers(0, 2**31 - 1))
def test_shape_algebra(b, c, h, w, seed):
    rng = np.random.default_rng(seed)
    x = T(rng.standard_normal((b, c, h, w)))
    assert ops.conv1x1(x, T(rng.standard_normal((3, c)))).shape == (b, 3, h, w)
    assert ops.depthwise_conv3x3(x, T(rng.standard_normal((c, 3, 3)))).shape == x.shape
    assert ops.resample(x, 2, "down").shape == (b, c, h // 2, w // 2)
    assert ops.resample(x, 2, "up").shape == (b, c, 2 * h, 2 * w)
    assert spatial_shift(x, ShiftSpec()).shape == x.shape


def test_forward_is_deterministic(rng):
    x = rand(rng, 1, 8, 8, 8)
    w = rand(rng, 8, 3, 3)
    a = ops.gelu(ops.depthwise_conv3x3(x, w)).data
    b = ops.gelu(ops.depthwise_conv3x3(x, w)).data
    assert a.tobytes() == b.tobytes()
