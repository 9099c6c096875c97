"""Rank-4 tensors (batch, channels, height, width) and the conv/activation kernels.

Convolutions are fixed to 3x3 kernels, stride 1, zero-padding 1, so spatial
dimensions are always preserved. The forward/backward fast path goes through
im2col + one BLAS GEMM (see :mod:`srfrn.kernels` for backend selection).

Standard precision is float32; float64 ("extended") exists so finite-difference
gradient checks can resolve tolerances float32 cannot.
"""

from __future__ import annotations

import os

import numpy as np

from . import kernels

STANDARD = np.float32
EXTENDED = np.float64

# When enabled (tests/debug), every kernel output is checked for NaN/Inf.
CHECK_FINITE = os.environ.get("SRFRN_CHECK_FINITE", "") == "1"


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract.

    ``dimension`` names the offending dimension; ``expected``/``actual`` carry
    the mismatched values.
    """

    def __init__(self, dimension: str, expected, actual):
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__(f"{dimension}: expected {expected}, got {actual}")


class Tensor:
    """A rank-4 float array in (batch, channels, height, width) layout.

    Treated as immutable once handed to an operation; operations allocate
    fresh outputs.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError("rank", 4, arr.ndim)
        if arr.dtype not in (np.dtype(STANDARD), np.dtype(EXTENDED)):
            arr = arr.astype(STANDARD)
        self.data = np.ascontiguousarray(arr)

    @classmethod
    def zeros(cls, shape: tuple[int, int, int, int], dtype=STANDARD) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def _check_finite(arr: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise FloatingPointError(f"{op} produced non-finite values")


def _require_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(what, a.shape, b.shape)


def _validate_conv_args(x: Tensor, weights: np.ndarray, bias: np.ndarray | None):
    if weights.ndim != 4:
        raise ShapeError("kernel rank", 4, weights.ndim)
    out_ch, in_ch, kh, kw = weights.shape
    if (kh, kw) != (3, 3):
        raise ShapeError("kernel size", (3, 3), (kh, kw))
    if x.shape[1] != in_ch:
        raise ShapeError("in_channels", in_ch, x.shape[1])
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("spatial size", ">= 1x1", (x.shape[2], x.shape[3]))
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError("bias length", (out_ch,), bias.shape)
    return out_ch, in_ch


def conv2d_forward(x: Tensor, weights: np.ndarray, bias: np.ndarray) -> Tensor:
    """y[b,o] = bias[o] + sum_i weights[o,i] * x[b,i], 3x3 windows, pad 1.

    Output spatial size equals input spatial size.
    """
    out_ch, in_ch = _validate_conv_args(x, weights, bias)
    b, _, h, w = x.shape
    cols = kernels.im2col_3x3(
        x.data, out=kernels.scratch("im2col", (b, in_ch * 9, h * w), x.data.dtype)
    )
    w_mat = np.ascontiguousarray(weights.reshape(out_ch, in_ch * 9))
    out = np.matmul(w_mat, cols)
    out += bias[:, None]
    out = out.reshape(b, out_ch, h, w)
    _check_finite(out, "conv2d_forward")
    return Tensor(out)


def conv2d_backward(
    x: Tensor, weights: np.ndarray, grad_output: Tensor
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Analytic adjoint of conv2d_forward.

    Returns (grad_input, grad_weights, grad_bias) for the cotangent
    ``grad_output``. grad_input is the transposed convolution of grad_output
    with the 180-degree-rotated kernels, realized as GEMM + col2im.
    """
    out_ch, in_ch = _validate_conv_args(x, weights, None)
    b, _, h, w = x.shape
    if grad_output.shape != (b, out_ch, h, w):
        raise ShapeError("grad_output shape", (b, out_ch, h, w), grad_output.shape)

    g_mat = grad_output.data.reshape(b, out_ch, h * w)
    grad_bias = g_mat.sum(axis=(0, 2))

    cols = kernels.im2col_3x3(
        x.data, out=kernels.scratch("im2col", (b, in_ch * 9, h * w), x.data.dtype)
    )
    grad_w_mat = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_weights = grad_w_mat.reshape(out_ch, in_ch, 3, 3)

    w_mat_t = np.ascontiguousarray(weights.reshape(out_ch, in_ch * 9).T)
    grad_cols = kernels.scratch("grad_cols", (b, in_ch * 9, h * w), x.data.dtype)
    np.matmul(w_mat_t, g_mat, out=grad_cols)
    grad_input = kernels.col2im_3x3(grad_cols, x.shape)

    _check_finite(grad_input, "conv2d_backward")
    return Tensor(grad_input), grad_weights, grad_bias


def leaky_relu_forward(x: Tensor, slope: float = 0.1) -> Tensor:
    """Elementwise max(slope*x, x)."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must be in (0, 1), got {slope}")
    out = np.maximum(x.data * slope, x.data)
    _check_finite(out, "leaky_relu_forward")
    return Tensor(out)


def leaky_relu_backward(x: Tensor, grad_out: Tensor, slope: float = 0.1) -> Tensor:
    """Route grad_out through the active branch; derivative at exactly 0 is 1."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must be in (0, 1), got {slope}")
    _require_same_shape(x, grad_out, "leaky_relu grad shape")
    dtype = x.data.dtype
    grad = np.where(x.data >= 0, grad_out.data, grad_out.data * dtype.type(slope))
    return Tensor(grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; backward distributes the gradient unchanged to both."""
    _require_same_shape(a, b, "add operand shape")
    out = a.data + b.data
    _check_finite(out, "add")
    return Tensor(out)


def im2col(x: Tensor) -> np.ndarray:
    """Patch matrix (B, C*9, H*W); column j holds the 3x3 window centered on
    pixel j (row-major), zeros where the window hangs over the border."""
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("spatial size", ">= 1x1", (x.shape[2], x.shape[3]))
    return kernels.im2col_3x3(x.data)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    inner = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner:
        raise ShapeError("matmul inner dimension", a.shape[-1], inner)
    return np.matmul(a, b)
