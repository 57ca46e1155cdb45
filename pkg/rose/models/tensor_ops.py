"""
Differentiable array operators used by the ROSE network.

Every operator works on a single feature map laid out as (channels, height, width)
and comes with an explicit backward function. Operators are pure: they never mutate
their inputs and keep no state between calls, so the same weights can be shared by
concurrent inferences. The float dtype follows the inputs (float32 for training and
inference, float64 for gradient checks).
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import numpy as np
from scipy.special import expit

from rose.errors import NumericFault, StructuralError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvKernel:
    """Convolution weights (out, in, kh, kw) plus one bias per output channel."""
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise StructuralError(f"Kernel weight must be 4-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise StructuralError(
                f"Kernel bias shape {self.bias.shape} does not match {self.weight.shape[0]} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


class ConvGrads(NamedTuple):
    grad_input: np.ndarray
    grad_weight: np.ndarray
    grad_bias: np.ndarray


def _require_feature_map(x: np.ndarray, what: str) -> None:
    if x.ndim != 3:
        raise StructuralError(f"{what} must be (channels, height, width), got shape {x.shape}")
    if x.size == 0:
        raise StructuralError(f"{what} is empty: shape {x.shape}")


def ensure_finite(x: np.ndarray, layer: str) -> np.ndarray:
    """Return x unchanged, raising NumericFault if it holds NaN or Inf."""
    if not np.isfinite(x).all():
        logger.error(f"Non-finite values produced by {layer}")
        raise NumericFault(layer)
    return x


def conv2d(x: np.ndarray, kernel: ConvKernel, stride: int = 1) -> np.ndarray:
    """
    Same-padded 2-D cross-correlation.

    The output is accumulated one kernel tap at a time: for tap (i, j) the shifted
    window of the zero-padded input is multiplied by the (out, in) weight slice in a
    single matmul. Taps are summed in a fixed order.

    Args:
        x (np.ndarray): Input feature map (C, H, W)
        kernel (ConvKernel): Weights (O, C, kh, kw) with odd kh, kw
        stride (int): Must be 1

    Returns:
        np.ndarray: Output feature map (O, H, W)
    """
    _require_feature_map(x, 'conv2d input')
    if stride != 1:
        raise StructuralError(f"Only stride 1 is supported, got {stride}")
    channels, height, width = x.shape
    if kernel.in_channels != channels:
        raise StructuralError(
            f"Channel mismatch: kernel expects {kernel.in_channels} input channels, input has {channels}"
        )
    kh, kw = kernel.size
    if kh % 2 == 0 or kw % 2 == 0:
        raise StructuralError(f"Kernel dimensions must be odd, got {kh}x{kw}")

    dtype = np.result_type(x, kernel.weight)
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.astype(dtype, copy=False), ((0, 0), (ph, ph), (pw, pw)))
    pixels = height * width

    out = np.empty((kernel.out_channels, pixels), dtype=dtype)
    out[:] = kernel.bias.astype(dtype, copy=False)[:, None]
    for i in range(kh):
        for j in range(kw):
            window = padded[:, i:i + height, j:j + width].reshape(channels, pixels)
            out += kernel.weight[:, :, i, j].astype(dtype, copy=False) @ window
    return out.reshape(kernel.out_channels, height, width)


def conv2d_backward(x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray) -> ConvGrads:
    """
    Gradients of sum(grad_out * conv2d(x, kernel)) with respect to x, weight and bias.
    """
    _require_feature_map(x, 'conv2d_backward input')
    channels, height, width = x.shape
    expected = (kernel.out_channels, height, width)
    if grad_out.shape != expected:
        raise StructuralError(f"grad_out shape {grad_out.shape} does not match conv2d output {expected}")
    if kernel.in_channels != channels:
        raise StructuralError(
            f"Channel mismatch: kernel expects {kernel.in_channels} input channels, input has {channels}"
        )

    kh, kw = kernel.size
    dtype = np.result_type(x, kernel.weight, grad_out)
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.astype(dtype, copy=False), ((0, 0), (ph, ph), (pw, pw)))
    pixels = height * width
    g = grad_out.astype(dtype, copy=False).reshape(kernel.out_channels, pixels)

    grad_bias = g.sum(axis=1)
    grad_weight = np.empty(kernel.weight.shape, dtype=dtype)
    grad_padded = np.zeros_like(padded)
    for i in range(kh):
        for j in range(kw):
            window = padded[:, i:i + height, j:j + width].reshape(channels, pixels)
            grad_weight[:, :, i, j] = g @ window.T
            tap = kernel.weight[:, :, i, j].astype(dtype, copy=False)
            grad_padded[:, i:i + height, j:j + width] += (tap.T @ g).reshape(channels, height, width)
    grad_input = grad_padded[:, ph:ph + height, pw:pw + width].copy()
    return ConvGrads(grad_input, grad_weight, grad_bias)


def maxpool2x2(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Non-overlapping 2x2 max pooling.

    Returns the pooled map and, per output cell, the index (0..3, row-major inside the
    block) of the winning input. Ties go to the first index.
    """
    _require_feature_map(x, 'maxpool2x2 input')
    channels, height, width = x.shape
    if height % 2 or width % 2:
        raise StructuralError(f"maxpool2x2 needs even height and width, got {height}x{width}")
    blocks = (x.reshape(channels, height // 2, 2, width // 2, 2)
               .transpose(0, 1, 3, 2, 4)
               .reshape(channels, height // 2, width // 2, 4))
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2x2_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape: Tuple[int, int, int]) -> np.ndarray:
    channels, height, width = input_shape
    if grad_out.shape != (channels, height // 2, width // 2) or argmax.shape != grad_out.shape:
        raise StructuralError(
            f"maxpool2x2_backward shapes disagree: grad {grad_out.shape}, argmax {argmax.shape}, input {input_shape}"
        )
    blocks = np.zeros((channels, height // 2, width // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    return (blocks.reshape(channels, height // 2, width // 2, 2, 2)
                  .transpose(0, 1, 3, 2, 4)
                  .reshape(channels, height, width))


def channel_pool(x: np.ndarray) -> np.ndarray:
    """Stack the per-pixel channel mean (channel 0) and channel max (channel 1)."""
    _require_feature_map(x, 'channel_pool input')
    return np.stack([x.mean(axis=0), x.max(axis=0)])


def channel_pool_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _require_feature_map(x, 'channel_pool_backward input')
    channels = x.shape[0]
    if grad_out.shape != (2,) + x.shape[1:]:
        raise StructuralError(f"grad_out shape {grad_out.shape} does not match channel_pool output")
    grad = np.empty(x.shape, dtype=np.result_type(x, grad_out))
    grad[:] = grad_out[0] / channels
    winner = x.argmax(axis=0)
    hits = np.arange(channels)[:, None, None] == winner[None]
    grad += hits * grad_out[1][None]
    return grad


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, clipped so the output stays strictly inside (0, 1) for its dtype."""
    s = expit(x)
    info = np.finfo(s.dtype)
    return np.clip(s, info.tiny, 1 - info.epsneg)


def sigmoid_backward(s: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward pass given the sigmoid output s."""
    return grad_out * s * (1 - s)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return grad_out * (x > 0)


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour doubling: every pixel becomes a 2x2 block."""
    _require_feature_map(x, 'upsample2x input')
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    channels, height, width = grad_out.shape
    if height % 2 or width % 2:
        raise StructuralError(f"upsample2x_backward needs even dimensions, got {height}x{width}")
    return grad_out.reshape(channels, height // 2, 2, width // 2, 2).sum(axis=(2, 4))


def _check_multiply_shapes(a: np.ndarray, b: np.ndarray) -> None:
    _require_feature_map(a, 'multiply lhs')
    _require_feature_map(b, 'multiply rhs')
    if a.shape[1:] != b.shape[1:]:
        raise StructuralError(f"multiply needs equal spatial dims, got {a.shape} and {b.shape}")
    if b.shape[0] not in (1, a.shape[0]):
        raise StructuralError(
            f"multiply needs equal channel counts or a 1-channel rhs, got {a.shape[0]} and {b.shape[0]}"
        )


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; a 1-channel b is broadcast across the channels of a."""
    _check_multiply_shapes(a, b)
    return a * b


def multiply_backward(a: np.ndarray, b: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    _check_multiply_shapes(a, b)
    if grad_out.shape != a.shape:
        raise StructuralError(f"grad_out shape {grad_out.shape} does not match multiply output {a.shape}")
    grad_a = grad_out * b
    grad_b = grad_out * a
    if b.shape[0] != a.shape[0]:
        grad_b = grad_b.sum(axis=0, keepdims=True)
    return grad_a, grad_b
