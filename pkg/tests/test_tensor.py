import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srfrn import kernels
from srfrn.tensor import (
    EXTENDED,
    STANDARD,
    ShapeError,
    Tensor,
    add,
    conv2d_backward,
    conv2d_forward,
    im2col,
    leaky_relu_backward,
    leaky_relu_forward,
    matmul,
)

from .oracles import central_difference, conv2d_loops, conv2d_shifted, max_relative_error


class TestConvForward:
    def test_zero_input_gives_constant_bias(self, rng):
        x = Tensor.zeros((1, 1, 4, 4))
        w = rng.standard_normal((2, 1, 3, 3)).astype(STANDARD)
        bias = np.array([3.5, -1.25], dtype=STANDARD)
        out = conv2d_forward(x, w, bias)
        assert np.array_equal(out.data[0, 0], np.full((4, 4), 3.5, STANDARD))
        assert np.array_equal(out.data[0, 1], np.full((4, 4), -1.25, STANDARD))

    def test_delta_kernel_is_identity(self, rng):
        x = np.zeros((1, 1, 3, 3), STANDARD)
        x[0, 0, 1, 1] = 1.0
        kernel = np.zeros((1, 1, 3, 3), STANDARD)
        kernel[0, 0, 1, 1] = 1.0
        out = conv2d_forward(Tensor(x), kernel, np.zeros(1, STANDARD))
        assert np.array_equal(out.data, x)

    def test_ones_kernel_center_window_sum(self):
        # central 3x3 window of 1..25 row-major: 7+8+9+12+13+14+17+18+19
        x = np.arange(1, 26, dtype=STANDARD).reshape(1, 1, 5, 5)
        out = conv2d_forward(Tensor(x), np.ones((1, 1, 3, 3), STANDARD), np.zeros(1, STANDARD))
        assert out.data[0, 0, 2, 2] == 117.0

    def test_matches_loop_oracle_small(self, rng):
        x = rng.standard_normal((2, 4, 8, 8))
        w = rng.standard_normal((3, 4, 3, 3))
        bias = rng.standard_normal(3)
        fast = conv2d_forward(Tensor(x.astype(STANDARD)), w.astype(STANDARD), bias.astype(STANDARD))
        assert np.abs(fast.data - conv2d_loops(x, w, bias)).max() < 1e-5

    def test_matches_shifted_oracle_large(self, rng):
        x = rng.standard_normal((4, 64, 32, 32))
        w = rng.standard_normal((16, 64, 3, 3)) * 0.1
        bias = rng.standard_normal(16)
        fast = conv2d_forward(Tensor(x.astype(STANDARD)), w.astype(STANDARD), bias.astype(STANDARD))
        assert np.abs(fast.data - conv2d_shifted(x, w, bias)).max() < 1e-5

    def test_shape_preserved(self, rng):
        x = Tensor(rng.standard_normal((3, 2, 7, 11)).astype(STANDARD))
        w = rng.standard_normal((5, 2, 3, 3)).astype(STANDARD)
        out = conv2d_forward(x, w, np.zeros(5, STANDARD))
        assert out.shape == (3, 5, 7, 11)

    def test_linearity(self, rng):
        x = rng.standard_normal((1, 2, 6, 6))
        y = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        zero = np.zeros(3)
        lhs = conv2d_forward(Tensor(2.5 * x - 1.5 * y), w, zero).data
        rhs = 2.5 * conv2d_forward(Tensor(x), w, zero).data - 1.5 * conv2d_forward(Tensor(y), w, zero).data
        assert max_relative_error(lhs, rhs, floor=1e-6) < 1e-5

    def test_channel_mismatch_names_dimension(self, rng):
        x = Tensor.zeros((1, 3, 4, 4))
        w = np.zeros((2, 2, 3, 3), STANDARD)
        with pytest.raises(ShapeError, match="in_channels"):
            conv2d_forward(x, w, np.zeros(2, STANDARD))

    def test_zero_spatial_input_rejected(self):
        x = Tensor(np.zeros((1, 1, 0, 4), STANDARD))
        with pytest.raises(ShapeError, match="spatial"):
            conv2d_forward(x, np.zeros((1, 1, 3, 3), STANDARD), np.zeros(1, STANDARD))

    def test_non_3x3_kernel_rejected(self):
        x = Tensor.zeros((1, 1, 4, 4))
        with pytest.raises(ShapeError, match="kernel size"):
            conv2d_forward(x, np.zeros((1, 1, 5, 5), STANDARD), np.zeros(1, STANDARD))


class TestConvBackward:
    def test_zero_cotangent_zero_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)).astype(STANDARD))
        w = rng.standard_normal((4, 3, 3, 3)).astype(STANDARD)
        gi, gw, gb = conv2d_backward(x, w, Tensor.zeros((2, 4, 5, 5)))
        assert not gi.data.any() and not gw.any() and not gb.any()

    def test_single_element_cotangent(self):
        # grad at one output pixel of an all-ones image: bias picks up 1,
        # each weight picks up 1 where its tap lands inside the image.
        x = Tensor(np.ones((1, 2, 4, 4), STANDARD))
        w = np.zeros((3, 2, 3, 3), STANDARD)
        g = np.zeros((1, 3, 4, 4), STANDARD)
        g[0, 1, 0, 0] = 1.0  # corner: taps reaching the zero padding get 0
        _, gw, gb = conv2d_backward(x, w, Tensor(g))
        assert np.array_equal(gb, [0.0, 1.0, 0.0])
        expected_tap = np.array([[0, 0, 0], [0, 1, 1], [0, 1, 1]], STANDARD)
        for i in range(2):
            assert np.array_equal(gw[1, i], expected_tap)
        assert not gw[0].any() and not gw[2].any()

    def test_gradients_match_finite_differences(self, rng):
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        bias = rng.standard_normal(3)
        g = rng.standard_normal((1, 3, 6, 6))

        gi, gw, gb = conv2d_backward(Tensor(x), w, Tensor(g))

        def loss_bias():
            return float((conv2d_forward(Tensor(x), w, bias).data * g).sum())

        fd_w = central_difference(lambda: float((conv2d_forward(Tensor(x), w, bias).data * g).sum()), w, eps=1e-5)
        fd_b = central_difference(loss_bias, bias, eps=1e-5)
        fd_x = central_difference(lambda: float((conv2d_forward(Tensor(x), w, bias).data * g).sum()), x, eps=1e-5)
        assert max_relative_error(fd_w, gw, floor=1e-8) < 1e-6
        assert max_relative_error(fd_b, gb, floor=1e-8) < 1e-6
        assert max_relative_error(fd_x, gi.data, floor=1e-8) < 1e-6

    def test_gradients_match_finite_differences_standard_precision(self, rng):
        # the pairing loss is linear in the weights, so f32 FD is exact up to
        # rounding; the standard-precision tolerance is 1e-3
        x = rng.standard_normal((1, 2, 5, 5)).astype(STANDARD)
        w = rng.standard_normal((3, 2, 3, 3)).astype(STANDARD)
        g = rng.standard_normal((1, 3, 5, 5)).astype(STANDARD)
        _, gw, _ = conv2d_backward(Tensor(x), w, Tensor(g))

        def loss():
            return float((conv2d_forward(Tensor(x), w, np.zeros(3, STANDARD)).data * g).sum())

        eps = np.float32(1e-2)
        flat = w.ravel()
        worst = 0.0
        for i in range(0, flat.size, 3):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss()
            flat[i] = orig - eps
            lm = loss()
            flat[i] = orig
            fd = (lp - lm) / (2 * float(eps))
            worst = max(worst, max_relative_error(np.array([fd]), np.array([gw.ravel()[i]]), floor=1e-3))
        assert worst < 1e-3

    def test_adjoint_consistency(self, rng):
        for dtype, tol in ((STANDARD, 1e-5), (EXTENDED, 1e-10)):
            x = rng.standard_normal((2, 3, 9, 7)).astype(dtype)
            w = rng.standard_normal((4, 3, 3, 3)).astype(dtype)
            g = rng.standard_normal((2, 4, 9, 7)).astype(dtype)
            out = conv2d_forward(Tensor(x), w, np.zeros(4, dtype))
            gi, _, _ = conv2d_backward(Tensor(x), w, Tensor(g))
            lhs = float((out.data.astype(np.float64) * g).sum())
            rhs = float((x.astype(np.float64) * gi.data).sum())
            assert abs(lhs - rhs) / max(abs(lhs), 1e-12) < tol

    def test_grad_output_shape_checked(self, rng):
        x = Tensor.zeros((1, 2, 4, 4))
        w = np.zeros((3, 2, 3, 3), STANDARD)
        with pytest.raises(ShapeError, match="grad_output"):
            conv2d_backward(x, w, Tensor.zeros((1, 3, 5, 4)))


class TestLeakyRelu:
    def test_pointwise_values(self):
        x = Tensor(np.array([2.0, -1.0, 0.0, -30.0], STANDARD).reshape(1, 1, 1, 4))
        out = leaky_relu_forward(x, 0.1)
        assert np.allclose(out.data.ravel(), [2.0, -0.1, 0.0, -3.0])

    def test_zeros_fixed_point(self):
        x = Tensor.zeros((2, 3, 4, 4))
        assert not leaky_relu_forward(x).data.any()

    def test_backward_negative_branch(self):
        x = Tensor(np.full((1, 1, 1, 1), -3.0, STANDARD))
        g = Tensor(np.full((1, 1, 1, 1), 4.0, STANDARD))
        out = leaky_relu_backward(x, g, 0.1)
        assert np.allclose(out.data, 0.4)

    def test_backward_at_zero_uses_unit_slope(self):
        x = Tensor.zeros((1, 1, 1, 1))
        g = Tensor(np.full((1, 1, 1, 1), 7.0, STANDARD))
        assert leaky_relu_backward(x, g).data[0, 0, 0, 0] == 7.0

    def test_slope_domain(self):
        x = Tensor.zeros((1, 1, 1, 1))
        for bad in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(ValueError):
                leaky_relu_forward(x, bad)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=32))
    @settings(max_examples=50, deadline=None)
    def test_equals_max_form(self, values):
        arr = np.array(values, STANDARD).reshape(1, 1, 1, -1)
        out = leaky_relu_forward(Tensor(arr), 0.1)
        assert np.array_equal(out.data, np.maximum(arr * np.float32(0.1), arr))


class TestAdd:
    def test_identity_and_inverse(self, rng):
        a = Tensor(rng.standard_normal((2, 1, 3, 3)).astype(STANDARD))
        assert np.array_equal(add(a, Tensor.zeros(a.shape)).data, a.data)
        assert not add(a, Tensor(-a.data)).data.any()

    def test_elementwise(self):
        a = Tensor(np.array([1.0, 2.0], STANDARD).reshape(1, 1, 1, 2))
        b = Tensor(np.array([3.0, 4.0], STANDARD).reshape(1, 1, 1, 2))
        assert np.array_equal(add(a, b).data.ravel(), [4.0, 6.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor.zeros((1, 1, 2, 2)), Tensor.zeros((1, 1, 2, 3)))


class TestIm2col:
    def test_2x2_hand_enumerated(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], STANDARD).reshape(1, 1, 2, 2))
        cols = im2col(x)
        assert cols.shape == (1, 9, 4)
        # window centered on each pixel, zero where it hangs over the border
        expected = np.array(
            [
                [0, 0, 0, 1],  # tap (-1,-1)
                [0, 0, 1, 2],  # tap (-1, 0)
                [0, 0, 2, 0],  # tap (-1,+1)
                [0, 1, 0, 3],  # tap ( 0,-1)
                [1, 2, 3, 4],  # tap ( 0, 0)
                [2, 0, 4, 0],  # tap ( 0,+1)
                [0, 3, 0, 0],  # tap (+1,-1)
                [3, 4, 0, 0],  # tap (+1, 0)
                [4, 0, 0, 0],  # tap (+1,+1)
            ],
            STANDARD,
        )
        assert np.array_equal(cols[0], expected)

    def test_matmul_identity(self, rng):
        b = rng.standard_normal((4, 7)).astype(STANDARD)
        assert np.array_equal(matmul(np.eye(4, dtype=STANDARD), b), b)

    def test_matmul_inner_dim_checked(self):
        with pytest.raises(ShapeError, match="inner"):
            matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_gemm_equivalence_is_conv(self, rng):
        x = rng.standard_normal((2, 4, 8, 8)).astype(STANDARD)
        w = rng.standard_normal((3, 4, 3, 3)).astype(STANDARD)
        bias = rng.standard_normal(3).astype(STANDARD)
        cols = im2col(Tensor(x))
        via_gemm = matmul(w.reshape(3, 36), cols).reshape(2, 3, 8, 8) + bias[None, :, None, None]
        direct = conv2d_forward(Tensor(x), w, bias).data
        assert np.abs(via_gemm - direct).max() < 1e-5


class TestBackends:
    def test_backends_bit_identical(self, rng):
        if "compiled" not in kernels.available_backends():
            pytest.skip("compiled kernels not built")
        old = kernels.backend_name()
        try:
            for dtype in (STANDARD, EXTENDED):
                x = rng.standard_normal((3, 5, 6, 7)).astype(dtype)
                g = rng.standard_normal((3, 45, 42)).astype(dtype)
                kernels.set_backend("compiled")
                cols_c = kernels.im2col_3x3(x).copy()
                back_c = kernels.col2im_3x3(g, x.shape).copy()
                kernels.set_backend("numpy")
                cols_n = kernels.im2col_3x3(x)
                back_n = kernels.col2im_3x3(g, x.shape)
                assert np.array_equal(cols_c, cols_n)
                assert np.array_equal(back_c, back_n)
        finally:
            kernels.set_backend(old)

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError):
            kernels.set_backend("cuda")


class TestTensorType:
    def test_rank_enforced(self):
        with pytest.raises(ShapeError, match="rank"):
            Tensor(np.zeros((2, 3)))

    def test_finite_check_active_in_tests(self):
        x = Tensor(np.full((1, 1, 2, 2), np.inf, STANDARD))
        with pytest.raises(FloatingPointError):
            add(x, x)
