"""
Three-channel ROSE network: a VGG-style feature extraction channel shared by a core
and a delta multi-scale spatial attention channel.

Per scale s = 1..5 the backbone applies two same-padded 3x3 convolutions, then each
attention channel runs a basic spatial attention module on the resulting features.
The core channel's refined features feed the backbone's max-pooling (or the average of
core and delta refined features, see NetworkConfig.pool_source). The five attention
maps of each channel are upsampled back to the input size and multiplied into one
fused probability map per singular-point kind.
"""
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np

from rose.errors import StructuralError
from rose.models.tensor_ops import (
    ConvKernel,
    channel_pool,
    channel_pool_backward,
    conv2d,
    conv2d_backward,
    ensure_finite,
    maxpool2x2,
    maxpool2x2_backward,
    multiply,
    multiply_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    upsample2x,
    upsample2x_backward,
)

logger = logging.getLogger(__name__)

KINDS = ('core', 'delta')
DEFAULT_FEATURE_WIDTHS = (32, 32, 64, 64, 128, 128, 256, 256, 512, 512)


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 1
    feature_widths: Tuple[int, ...] = DEFAULT_FEATURE_WIDTHS
    feature_kernel: int = 3
    attention_kernel: int = 5
    scales: int = 5
    # 'relu' or 'none'; 'none' leaves the backbone linear for ablation runs
    feature_activation: str = 'relu'
    # 'core' or 'averaged'
    pool_source: str = 'core'
    feature_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'feature_widths', tuple(int(w) for w in self.feature_widths))
        if self.scales != 5:
            raise StructuralError(f"The network has exactly 5 scales, got {self.scales}")
        widths = self.feature_widths
        if len(widths) != 2 * self.scales:
            raise StructuralError(f"feature_widths needs {2 * self.scales} entries, got {len(widths)}")
        if any(w < 1 for w in widths):
            raise StructuralError(f"feature_widths must be positive, got {widths}")
        if any(widths[i] != widths[i + 1] for i in range(0, len(widths), 2)):
            raise StructuralError(f"feature_widths must come in equal pairs, got {widths}")
        if self.input_channels < 1:
            raise StructuralError(f"input_channels must be positive, got {self.input_channels}")
        for name, k in (('feature_kernel', self.feature_kernel), ('attention_kernel', self.attention_kernel)):
            if k < 1 or k % 2 == 0:
                raise StructuralError(f"{name} must be a positive odd size, got {k}")
        if self.feature_activation not in ('relu', 'none'):
            raise StructuralError(f"feature_activation must be 'relu' or 'none', got {self.feature_activation!r}")
        if self.pool_source not in ('core', 'averaged'):
            raise StructuralError(f"pool_source must be 'core' or 'averaged', got {self.pool_source!r}")

    @property
    def min_divisor(self) -> int:
        """Input height and width must be multiples of this."""
        return 2 ** (self.scales - 1)


def parameter_shapes(config: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered tensor names and shapes: feature kernels, then core, then delta attention."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    in_channels = config.input_channels
    k = config.feature_kernel
    for index, width in enumerate(config.feature_widths, start=1):
        shapes[f'feature.{index}.weight'] = (width, in_channels, k, k)
        if config.feature_bias:
            shapes[f'feature.{index}.bias'] = (width,)
        in_channels = width
    a = config.attention_kernel
    for kind in KINDS:
        for scale in range(1, config.scales + 1):
            shapes[f'{kind}_attention.{scale}.weight'] = (1, 2, a, a)
            shapes[f'{kind}_attention.{scale}.bias'] = (1,)
    return shapes


class NetworkWeights(Mapping):
    """Ordered, named parameter tensors of the network (also used for their gradients)."""

    def __init__(self, tensors: Mapping, config: NetworkConfig):
        self._tensors: Dict[str, np.ndarray] = dict(tensors)
        self.config = config

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"NetworkWeights({len(self)} tensors, {self.parameter_count()} parameters)"

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self._tensors.values())).dtype

    def kernel(self, prefix: str) -> ConvKernel:
        weight = self._tensors[f'{prefix}.weight']
        bias = self._tensors.get(f'{prefix}.bias')
        if bias is None:
            bias = np.zeros(weight.shape[0], dtype=weight.dtype)
        return ConvKernel(weight, bias)

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def zeros_like(self) -> 'NetworkWeights':
        return NetworkWeights({n: np.zeros_like(t) for n, t in self._tensors.items()}, self.config)

    def copy(self) -> 'NetworkWeights':
        return NetworkWeights({n: t.copy() for n, t in self._tensors.items()}, self.config)

    def astype(self, dtype) -> 'NetworkWeights':
        return NetworkWeights({n: t.astype(dtype) for n, t in self._tensors.items()}, self.config)

    def validate(self) -> None:
        expected = parameter_shapes(self.config)
        if list(expected) != list(self._tensors):
            raise StructuralError(
                f"Tensor names {list(self._tensors)} do not match the network layout {list(expected)}"
            )
        for name, shape in expected.items():
            if self._tensors[name].shape != shape:
                raise StructuralError(f"Tensor '{name}' has shape {self._tensors[name].shape}, expected {shape}")
            ensure_finite(self._tensors[name], name)


def init_weights(config: NetworkConfig = NetworkConfig(), seed: int = 0, dtype=np.float32) -> NetworkWeights:
    """
    Uniform fan-in initialisation: every kernel weight is drawn from U(-b, b) with
    b = sqrt(6 / (in_channels * kh * kw)); biases start at zero.

    Args:
        config (NetworkConfig): Architecture
        seed (int): Seed for numpy's default generator
        dtype: Parameter dtype (float32 for training, float64 for gradient checks)

    Returns:
        NetworkWeights: Freshly initialised parameters
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith('.weight'):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    weights = NetworkWeights(tensors, config)
    logger.debug(f"Initialised {weights!r} with seed {seed}")
    return weights


@dataclass
class AttentionCache:
    pooled: np.ndarray
    attention: np.ndarray
    refined: Optional[np.ndarray] = None


class AttentionGrads(NamedTuple):
    grad_features: np.ndarray
    grad_weight: np.ndarray
    grad_bias: np.ndarray


def _attention_forward(features: np.ndarray, kernel: ConvKernel, refine: bool = True) -> AttentionCache:
    pooled = channel_pool(features)
    attention = sigmoid(conv2d(pooled, kernel))
    refined = multiply(features, attention) if refine else None
    return AttentionCache(pooled, attention, refined)


def spatial_attention(features: np.ndarray, kernel: ConvKernel) -> Tuple[np.ndarray, np.ndarray]:
    """
    Basic spatial attention module.

    Args:
        features (np.ndarray): Feature map F (C, H, W)
        kernel (ConvKernel): 1x2xkxk attention convolution

    Returns:
        Tuple[np.ndarray, np.ndarray]: Attention map A (1, H, W) in (0, 1) and refined
        features R = F * A (C, H, W)
    """
    if kernel.out_channels != 1 or kernel.in_channels != 2:
        raise StructuralError(f"Attention kernel must be 1x2xkxk, got {kernel.weight.shape}")
    cache = _attention_forward(features, kernel)
    return cache.attention, cache.refined


def spatial_attention_backward(features: np.ndarray, kernel: ConvKernel, cache: AttentionCache,
                               grad_attention: np.ndarray,
                               grad_refined: Optional[np.ndarray] = None) -> AttentionGrads:
    grad_a = grad_attention
    grad_f = None
    if grad_refined is not None:
        grad_f, grad_a_from_refined = multiply_backward(features, cache.attention, grad_refined)
        grad_a = grad_a + grad_a_from_refined
    grad_pre = sigmoid_backward(cache.attention, grad_a)
    conv_grads = conv2d_backward(cache.pooled, kernel, grad_pre)
    grad_from_pool = channel_pool_backward(features, conv_grads.grad_input)
    grad_f = grad_from_pool if grad_f is None else grad_f + grad_from_pool
    return AttentionGrads(grad_f, conv_grads.grad_weight, conv_grads.grad_bias)


@dataclass
class ScaleCache:
    inputs: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray
    pre2: np.ndarray
    features: np.ndarray
    core: AttentionCache
    delta: AttentionCache
    pool_argmax: Optional[np.ndarray] = None


@dataclass
class ForwardCache:
    weights: NetworkWeights
    config: NetworkConfig
    image_shape: Tuple[int, int, int]
    scales: List[ScaleCache] = field(default_factory=list)
    upsampled: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    upsample_count: Dict[str, int] = field(default_factory=dict)

    def attention_maps(self, kind: str) -> List[np.ndarray]:
        """Per-scale attention maps of one channel, before upsampling."""
        return [getattr(scale, kind).attention for scale in self.scales]


class ForwardResult(NamedTuple):
    p_core: np.ndarray
    p_delta: np.ndarray
    cache: ForwardCache


def _activate(config: NetworkConfig, x: np.ndarray) -> np.ndarray:
    return relu(x) if config.feature_activation == 'relu' else x


def _activate_backward(config: NetworkConfig, pre: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return relu_backward(pre, grad) if config.feature_activation == 'relu' else grad


def forward(image: np.ndarray, weights: NetworkWeights) -> ForwardResult:
    """
    Run the network on one image.

    Args:
        image (np.ndarray): (1, H, W) image in [0, 1]; H and W multiples of 16
        weights (NetworkWeights): Parameters (read-only)

    Returns:
        ForwardResult: Fused core map (H, W), fused delta map (H, W) and the cache
        needed by backward()
    """
    config = weights.config
    if image.ndim != 3 or image.shape[0] != config.input_channels:
        raise StructuralError(
            f"Image must be ({config.input_channels}, H, W), got shape {image.shape}"
        )
    _, height, width = image.shape
    divisor = config.min_divisor
    if height == 0 or width == 0 or height % divisor or width % divisor:
        raise StructuralError(f"Image dims {height}x{width} must be positive multiples of {divisor}")

    cache = ForwardCache(weights=weights, config=config, image_shape=image.shape)
    x = image.astype(weights.dtype, copy=False)
    for scale in range(1, config.scales + 1):
        first, second = 2 * scale - 1, 2 * scale
        pre1 = ensure_finite(conv2d(x, weights.kernel(f'feature.{first}')), f'feature.{first}')
        act1 = _activate(config, pre1)
        pre2 = ensure_finite(conv2d(act1, weights.kernel(f'feature.{second}')), f'feature.{second}')
        features = _activate(config, pre2)

        last = scale == config.scales
        core = _attention_forward(features, weights.kernel(f'core_attention.{scale}'), refine=not last)
        delta = _attention_forward(features, weights.kernel(f'delta_attention.{scale}'),
                                   refine=not last and config.pool_source == 'averaged')
        ensure_finite(core.attention, f'core_attention.{scale}')
        ensure_finite(delta.attention, f'delta_attention.{scale}')

        scale_cache = ScaleCache(x, pre1, act1, pre2, features, core, delta)
        if not last:
            pool_input = core.refined if config.pool_source == 'core' else 0.5 * (core.refined + delta.refined)
            x, scale_cache.pool_argmax = maxpool2x2(pool_input)
        cache.scales.append(scale_cache)
        logger.debug(f"scale {scale}: features {features.shape}, attention {core.attention.shape}")

    fused = {}
    for kind in KINDS:
        maps = []
        count = 0
        for scale_cache in cache.scales:
            upsampled = getattr(scale_cache, kind).attention
            while upsampled.shape[1] < height:
                upsampled = upsample2x(upsampled)
                count += 1
            maps.append(upsampled)
        product = maps[0]
        for m in maps[1:]:
            product = multiply(product, m)
        fused[kind] = ensure_finite(product, f'{kind}_fusion')
        cache.upsampled[kind] = maps
        cache.upsample_count[kind] = count
    return ForwardResult(fused['core'][0], fused['delta'][0], cache)


def backward(cache: ForwardCache, grad_core: np.ndarray, grad_delta: np.ndarray) -> NetworkWeights:
    """
    Gradients of a scalar loss with respect to every parameter, given the loss
    gradients on the two fused maps.

    Args:
        cache (ForwardCache): Cache returned by forward()
        grad_core (np.ndarray): dL/dP_core (H, W)
        grad_delta (np.ndarray): dL/dP_delta (H, W)

    Returns:
        NetworkWeights: Gradients in the same order and shapes as the weights
    """
    config = cache.config
    weights = cache.weights
    _, height, width = cache.image_shape
    for name, grad in (('core', grad_core), ('delta', grad_delta)):
        if grad.shape != (height, width):
            raise StructuralError(f"dL/dP_{name} has shape {grad.shape}, expected {(height, width)}")

    grads = {name: np.zeros_like(t) for name, t in weights.items()}

    grad_attention: Dict[str, List[np.ndarray]] = {}
    for kind, grad in (('core', grad_core), ('delta', grad_delta)):
        maps = cache.upsampled[kind]
        g = grad[None].astype(weights.dtype, copy=False)
        per_scale = []
        for s in range(len(maps)):
            others = None
            for t, m in enumerate(maps):
                if t != s:
                    others = m if others is None else others * m
            g_s = g * others
            for _ in range(s):
                g_s = upsample2x_backward(g_s)
            per_scale.append(g_s)
        grad_attention[kind] = per_scale

    grad_next = None
    for scale in range(config.scales, 0, -1):
        sc = cache.scales[scale - 1]
        grad_refined = {'core': None, 'delta': None}
        if grad_next is not None:
            grad_pool = maxpool2x2_backward(grad_next, sc.pool_argmax, sc.features.shape)
            if config.pool_source == 'core':
                grad_refined['core'] = grad_pool
            else:
                grad_refined['core'] = grad_refined['delta'] = 0.5 * grad_pool

        grad_features = np.zeros_like(sc.features)
        for kind in KINDS:
            prefix = f'{kind}_attention.{scale}'
            ag = spatial_attention_backward(sc.features, weights.kernel(prefix), getattr(sc, kind),
                                            grad_attention[kind][scale - 1], grad_refined[kind])
            grad_features += ag.grad_features
            grads[f'{prefix}.weight'] = ag.grad_weight
            grads[f'{prefix}.bias'] = ag.grad_bias

        first, second = 2 * scale - 1, 2 * scale
        grad_pre2 = _activate_backward(config, sc.pre2, grad_features)
        cg2 = conv2d_backward(sc.act1, weights.kernel(f'feature.{second}'), grad_pre2)
        grad_pre1 = _activate_backward(config, sc.pre1, cg2.grad_input)
        cg1 = conv2d_backward(sc.inputs, weights.kernel(f'feature.{first}'), grad_pre1)
        for index, cg in ((first, cg1), (second, cg2)):
            grads[f'feature.{index}.weight'] = cg.grad_weight
            if f'feature.{index}.bias' in grads:
                grads[f'feature.{index}.bias'] = cg.grad_bias
        grad_next = cg1.grad_input

    for name, grad in grads.items():
        ensure_finite(grad, name)
    return NetworkWeights(grads, weights.config)
