"""The super-resolution network: feature extraction, residual blocks, reconstruction.

Layout: two 3x3 feature-extraction convolutions (1->64, 64->64, no activation),
``n_blocks`` residual blocks (three 64->64 convolutions, each followed by
Leaky ReLU with slope 0.1, third-layer output summed with first-layer output),
one 3x3 reconstruction convolution (64->1, no activation), and a global skip
that adds the interpolated input to the reconstruction output. The network
therefore learns only the interpolation residual.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    EXTENDED,
    STANDARD,
    ShapeError,
    Tensor,
    add,
    conv2d_backward,
    conv2d_forward,
    leaky_relu_backward,
    leaky_relu_forward,
)

CHANNELS = 64
LEAKY_SLOPE = 0.1

WEIGHT_MAGIC = b"SRFRNW01"


class WeightFormatError(ValueError):
    """Weight file is malformed, truncated, or inconsistent with its header."""


class ConvLayer:
    """One 3x3 convolution's parameters, gradient buffers, and Adam moments."""

    def __init__(self, in_ch: int, out_ch: int, dtype=STANDARD):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.weights = np.zeros((out_ch, in_ch, 3, 3), dtype=dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self.m_weights = np.zeros_like(self.weights)
        self.v_weights = np.zeros_like(self.weights)
        self.m_bias = np.zeros_like(self.bias)
        self.v_bias = np.zeros_like(self.bias)

    @property
    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    def zero_grad(self) -> None:
        self.grad_weights[:] = 0
        self.grad_bias[:] = 0


class RfrBlock:
    """Three stacked convolutions with Leaky ReLU and an intra-block fusion:
    output = act3 + act1 (no activation after the sum)."""

    def __init__(self, dtype=STANDARD):
        self.layers = [ConvLayer(CHANNELS, CHANNELS, dtype) for _ in range(3)]
        self.slope = LEAKY_SLOPE

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)


class SrfrnModel:
    """The full computation graph over single-channel planes.

    ``feat_activation`` optionally inserts Leaky ReLU after the two
    feature-extraction layers; default off (the layers are linear).

    Instances are single-writer: forward/backward/optimizer steps on one
    model must be externally serialized. Read-only inference on a loaded
    model is safe from multiple threads.
    """

    def __init__(self, n_blocks: int = 6, dtype=STANDARD, feat_activation: bool = False):
        if n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {n_blocks}")
        self.n_blocks = n_blocks
        self.dtype = np.dtype(dtype)
        self.feat_activation = feat_activation
        self.feat1 = ConvLayer(1, CHANNELS, dtype)
        self.feat2 = ConvLayer(CHANNELS, CHANNELS, dtype)
        self.blocks = [RfrBlock(dtype) for _ in range(n_blocks)]
        self.recon = ConvLayer(CHANNELS, 1, dtype)

    def layers(self):
        """All ConvLayers in canonical (serialization) order."""
        yield self.feat1
        yield self.feat2
        for block in self.blocks:
            yield from block.layers
        yield self.recon

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers())

    def zero_grad(self) -> None:
        for layer in self.layers():
            layer.zero_grad()

    def astype(self, dtype) -> "SrfrnModel":
        """Copy of the model with parameters cast; grad/moment buffers reset."""
        out = SrfrnModel(self.n_blocks, dtype=dtype, feat_activation=self.feat_activation)
        for src, dst in zip(self.layers(), out.layers()):
            dst.weights[:] = src.weights.astype(dtype)
            dst.bias[:] = src.bias.astype(dtype)
        return out


def param_count(n_blocks: int) -> int:
    """Total learnable parameters for a model with ``n_blocks`` blocks."""
    if n_blocks < 1:
        raise ValueError(f"n_blocks must be >= 1, got {n_blocks}")
    feat1 = CHANNELS * 1 * 9 + CHANNELS
    feat2 = CHANNELS * CHANNELS * 9 + CHANNELS
    recon = 1 * CHANNELS * 9 + 1
    per_block = 3 * feat2
    return feat1 + feat2 + recon + n_blocks * per_block


@dataclass
class BlockTape:
    r_in: Tensor
    z1: Tensor
    r1: Tensor
    z2: Tensor
    r2: Tensor
    z3: Tensor


@dataclass
class Tape:
    """Activation record from one forward pass, consumed by backward."""

    x: Tensor
    f1_pre: Tensor
    f1: Tensor
    f2_pre: Tensor
    f2: Tensor
    blocks: list[BlockTape] = field(default_factory=list)
    r_final: Tensor | None = None


def rfr_forward(block: RfrBlock, r_prev: Tensor) -> Tensor:
    """One residual block: act3(act2(act1(conv chain))) + act1 output."""
    out, _ = _rfr_forward_tape(block, r_prev)
    return out


def _rfr_forward_tape(block: RfrBlock, r_prev: Tensor) -> tuple[Tensor, BlockTape]:
    if r_prev.shape[1] != CHANNELS:
        raise ShapeError("block channels", CHANNELS, r_prev.shape[1])
    c1, c2, c3 = block.layers
    z1 = conv2d_forward(r_prev, c1.weights, c1.bias)
    r1 = leaky_relu_forward(z1, block.slope)
    z2 = conv2d_forward(r1, c2.weights, c2.bias)
    r2 = leaky_relu_forward(z2, block.slope)
    z3 = conv2d_forward(r2, c3.weights, c3.bias)
    r3 = leaky_relu_forward(z3, block.slope)
    return add(r3, r1), BlockTape(r_prev, z1, r1, z2, r2, z3)


def forward(model: SrfrnModel, x: Tensor) -> tuple[Tensor, Tape]:
    """Run the network on an interpolated input; returns (output, tape).

    Output = x + reconstruction(blocks(features(x))); same shape as x.
    """
    if x.shape[1] != 1:
        raise ShapeError("input channels", 1, x.shape[1])
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise ShapeError("spatial size", ">= 3x3", (x.shape[2], x.shape[3]))

    f1_pre = conv2d_forward(x, model.feat1.weights, model.feat1.bias)
    f1 = leaky_relu_forward(f1_pre, LEAKY_SLOPE) if model.feat_activation else f1_pre
    f2_pre = conv2d_forward(f1, model.feat2.weights, model.feat2.bias)
    f2 = leaky_relu_forward(f2_pre, LEAKY_SLOPE) if model.feat_activation else f2_pre

    tape = Tape(x, f1_pre, f1, f2_pre, f2)
    r = f2
    for block in model.blocks:
        r, block_tape = _rfr_forward_tape(block, r)
        tape.blocks.append(block_tape)
    tape.r_final = r

    i_c = conv2d_forward(r, model.recon.weights, model.recon.bias)
    return add(x, i_c), tape


def _accumulate(layer: ConvLayer, grad_w: np.ndarray, grad_b: np.ndarray) -> None:
    layer.grad_weights += grad_w
    layer.grad_bias += grad_b


def backward(model: SrfrnModel, tape: Tape, grad_out: Tensor) -> Tensor:
    """Populate every layer's grad buffers (accumulating); returns grad wrt input.

    The global skip feeds grad_out straight to the input path in addition to
    the conv-chain contribution; each block's fusion routes gradient to both
    its third-layer path and its first-layer output.
    """
    if tape.r_final is None:
        raise ValueError("backward called without a completed forward tape")
    if grad_out.shape != tape.x.shape:
        raise ShapeError("grad shape", tape.x.shape, grad_out.shape)

    g_r, gw, gb = conv2d_backward(tape.r_final, model.recon.weights, grad_out)
    _accumulate(model.recon, gw, gb)

    for block, bt in zip(reversed(model.blocks), reversed(tape.blocks)):
        c1, c2, c3 = block.layers
        g_z3 = leaky_relu_backward(bt.z3, g_r, block.slope)
        g_r2, gw, gb = conv2d_backward(bt.r2, c3.weights, g_z3)
        _accumulate(c3, gw, gb)
        g_z2 = leaky_relu_backward(bt.z2, g_r2, block.slope)
        g_r1, gw, gb = conv2d_backward(bt.r1, c2.weights, g_z2)
        _accumulate(c2, gw, gb)
        g_r1 = add(g_r1, g_r)  # fusion: gradient reaches r1 through the skip too
        g_z1 = leaky_relu_backward(bt.z1, g_r1, block.slope)
        g_r, gw, gb = conv2d_backward(bt.r_in, c1.weights, g_z1)
        _accumulate(c1, gw, gb)

    if model.feat_activation:
        g_r = leaky_relu_backward(tape.f2_pre, g_r, LEAKY_SLOPE)
    g_f1, gw, gb = conv2d_backward(tape.f1, model.feat2.weights, g_r)
    _accumulate(model.feat2, gw, gb)
    if model.feat_activation:
        g_f1 = leaky_relu_backward(tape.f1_pre, g_f1, LEAKY_SLOPE)
    g_x, gw, gb = conv2d_backward(tape.x, model.feat1.weights, g_f1)
    _accumulate(model.feat1, gw, gb)

    return add(g_x, grad_out)


def init_params(model: SrfrnModel, seed: int) -> SrfrnModel:
    """He-style init: weights ~ N(0, 2/(in_ch*9)), biases zero, seed-determined."""
    rng = np.random.default_rng(seed)
    for layer in model.layers():
        std = np.sqrt(2.0 / (layer.in_ch * 9))
        layer.weights[:] = rng.normal(0.0, std, size=layer.weights.shape).astype(model.dtype)
        layer.bias[:] = 0
    return model


def _precision_tag(dtype: np.dtype) -> int:
    return 64 if dtype == np.dtype(EXTENDED) else 32


def save_weights(model: SrfrnModel, path) -> None:
    """Write the little-endian binary weight format (magic SRFRNW01)."""
    tag = _precision_tag(model.dtype)
    fdtype = "<f8" if tag == 64 else "<f4"
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<II", model.n_blocks, tag))
        for layer in model.layers():
            fh.write(struct.pack("<II", layer.out_ch, layer.in_ch))
            fh.write(np.ascontiguousarray(layer.weights, dtype=fdtype).tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype=fdtype).tobytes())


def load_weights(path) -> SrfrnModel:
    """Read a weight file; raises WeightFormatError on any inconsistency."""
    with open(path, "rb") as fh:
        blob = fh.read()

    if len(blob) < 16:
        raise WeightFormatError(f"file too short to hold a header ({len(blob)} bytes)")
    if blob[:8] != WEIGHT_MAGIC:
        raise WeightFormatError(f"bad magic {blob[:8]!r}, expected {WEIGHT_MAGIC!r}")
    n_blocks, tag = struct.unpack_from("<II", blob, 8)
    if tag not in (32, 64):
        raise WeightFormatError(f"unknown precision tag {tag}")
    if n_blocks < 1:
        raise WeightFormatError(f"header n_blocks must be >= 1, got {n_blocks}")

    dtype = np.dtype("<f8") if tag == 64 else np.dtype("<f4")
    model = SrfrnModel(n_blocks, dtype=EXTENDED if tag == 64 else STANDARD)
    offset = 16
    for index, layer in enumerate(model.layers()):
        if offset + 8 > len(blob):
            raise WeightFormatError(
                f"truncated at layer {index}: header promises {n_blocks} blocks"
            )
        out_ch, in_ch = struct.unpack_from("<II", blob, offset)
        offset += 8
        if (out_ch, in_ch) != (layer.out_ch, layer.in_ch):
            raise WeightFormatError(
                f"layer {index} channels ({out_ch}, {in_ch}) do not match "
                f"expected ({layer.out_ch}, {layer.in_ch})"
            )
        nbytes = (out_ch * in_ch * 9 + out_ch) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise WeightFormatError(
                f"truncated at layer {index}: header promises {n_blocks} blocks"
            )
        w_count = out_ch * in_ch * 9
        flat = np.frombuffer(blob, dtype=dtype, count=w_count + out_ch, offset=offset)
        layer.weights[:] = flat[:w_count].reshape(out_ch, in_ch, 3, 3)
        layer.bias[:] = flat[w_count:]
        offset += nbytes

    if offset != len(blob):
        raise WeightFormatError(f"{len(blob) - offset} trailing bytes after last layer")
    return model
