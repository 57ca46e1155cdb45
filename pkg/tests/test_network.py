import numpy as np
import pytest

from gradcheck import numerical_gradient, relative_error
from rose.errors import NumericFault, StructuralError
from rose.models.network import (
    DEFAULT_FEATURE_WIDTHS, NetworkConfig, NetworkWeights, backward, forward, init_weights,
    parameter_shapes, spatial_attention, spatial_attention_backward, _attention_forward,
)
from rose.models.detector import Detector
from rose.models.tensor_ops import ConvKernel


def zero_attention(weights: NetworkWeights) -> NetworkWeights:
    tensors = {n: (np.zeros_like(t) if 'attention' in n else t) for n, t in weights.items()}
    return NetworkWeights(tensors, weights.config)


class TestNetworkConfig:
    def test_defaults(self):
        config = NetworkConfig()
        assert config.feature_widths == DEFAULT_FEATURE_WIDTHS
        assert config.min_divisor == 16

    @pytest.mark.parametrize('kwargs', [
        {'feature_widths': (4,) * 8},
        {'feature_widths': (2, 3, 4, 4, 4, 4, 4, 4, 4, 4)},
        {'feature_widths': (0,) * 10},
        {'feature_activation': 'tanh'},
        {'pool_source': 'delta'},
        {'attention_kernel': 4},
        {'scales': 4},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(StructuralError):
            NetworkConfig(**kwargs)

    def test_parameter_layout(self):
        shapes = parameter_shapes(NetworkConfig())
        assert len(shapes) == 40
        names = list(shapes)
        assert names[0] == 'feature.1.weight'
        assert names[20] == 'core_attention.1.weight'
        assert names[30] == 'delta_attention.1.weight'
        assert shapes['feature.1.weight'] == (32, 1, 3, 3)
        assert shapes['feature.10.weight'] == (512, 512, 3, 3)
        assert shapes['delta_attention.5.weight'] == (1, 2, 5, 5)

    def test_layout_without_feature_bias(self):
        shapes = parameter_shapes(NetworkConfig(feature_bias=False))
        assert len(shapes) == 30
        assert 'feature.1.bias' not in shapes


class TestInitWeights:
    def test_seeded(self, small_config):
        a = init_weights(small_config, seed=3)
        b = init_weights(small_config, seed=3)
        c = init_weights(small_config, seed=4)
        assert all(np.array_equal(a[n], b[n]) for n in a)
        assert not np.array_equal(a['feature.1.weight'], c['feature.1.weight'])

    def test_fan_in_bound(self, small_config):
        weights = init_weights(small_config, seed=0)
        for name, tensor in weights.items():
            if name.endswith('.weight'):
                bound = np.sqrt(6.0 / np.prod(tensor.shape[1:]))
                assert np.abs(tensor).max() <= bound * (1 + 1e-6)
            else:
                assert not tensor.any()

    def test_validate_rejects_nan(self, small_config):
        weights = init_weights(small_config)
        weights['core_attention.2.weight'][0, 0, 0, 0] = np.nan
        with pytest.raises(NumericFault):
            weights.validate()


class TestSpatialAttention:
    def test_zero_kernel_gives_half(self, rng):
        features = rng.standard_normal((3, 6, 6))
        kernel = ConvKernel(np.zeros((1, 2, 5, 5)), np.zeros(1))
        attention, refined = spatial_attention(features, kernel)
        assert attention.shape == (1, 6, 6)
        assert (attention == 0.5).all()
        np.testing.assert_array_equal(refined, 0.5 * features)

    def test_zero_features_give_bias_sigmoid(self, rng):
        kernel = ConvKernel(rng.standard_normal((1, 2, 5, 5)), np.array([1.0]))
        attention, _ = spatial_attention(np.zeros((2, 4, 4)), kernel)
        np.testing.assert_allclose(attention, 1 / (1 + np.exp(-1.0)))

    def test_rejects_wrong_kernel(self, rng):
        with pytest.raises(StructuralError):
            spatial_attention(rng.standard_normal((2, 4, 4)), ConvKernel(np.zeros((2, 2, 5, 5)), np.zeros(2)))

    def test_backward_matches_finite_differences(self, rng):
        features = rng.standard_normal((3, 6, 6))
        weight = rng.standard_normal((1, 2, 5, 5)) * 0.3
        bias = rng.standard_normal(1)
        g_attention = rng.standard_normal((1, 6, 6))
        g_refined = rng.standard_normal((3, 6, 6))

        def loss():
            attention, refined = spatial_attention(features, ConvKernel(weight, bias))
            return float((g_attention * attention).sum() + (g_refined * refined).sum())

        kernel = ConvKernel(weight, bias)
        cache = _attention_forward(features, kernel)
        grads = spatial_attention_backward(features, kernel, cache, g_attention, g_refined)
        assert relative_error(grads.grad_weight, numerical_gradient(loss, weight)) < 1e-4
        assert relative_error(grads.grad_bias, numerical_gradient(loss, bias)) < 1e-4
        assert relative_error(grads.grad_features, numerical_gradient(loss, features, eps=1e-6)) < 1e-4


class TestForward:
    def test_zero_attention_fuses_to_half_to_the_fifth(self, small_config, rng):
        weights = zero_attention(init_weights(small_config, seed=1))
        result = forward(rng.random((1, 64, 64)).astype(np.float32), weights)
        assert result.p_core.shape == (64, 64)
        np.testing.assert_array_equal(result.p_core, np.float32(0.03125))
        np.testing.assert_array_equal(result.p_delta, np.float32(0.03125))

    def test_scale_pyramid(self, small_config, rng):
        weights = init_weights(small_config, seed=0)
        result = forward(rng.random((1, 256, 256)).astype(np.float32), weights)
        for kind in ('core', 'delta'):
            sizes = [a.shape[1:] for a in result.cache.attention_maps(kind)]
            assert sizes == [(256, 256), (128, 128), (64, 64), (32, 32), (16, 16)]
            assert result.cache.upsample_count[kind] == 10
            assert all(m.shape == (1, 256, 256) for m in result.cache.upsampled[kind])

    def test_rectangular_input(self, small_config, rng):
        result = forward(rng.random((1, 48, 80)), init_weights(small_config, dtype=np.float64))
        assert result.p_core.shape == (48, 80)
        assert result.p_delta.shape == (48, 80)

    def test_output_is_probability_and_repeatable(self, small_config, rng):
        weights = init_weights(small_config, seed=2)
        image = rng.random((1, 32, 32)).astype(np.float32)
        first = forward(image, weights)
        second = forward(image, weights)
        assert ((first.p_core > 0) & (first.p_core < 1)).all()
        assert np.array_equal(first.p_core, second.p_core)
        assert np.array_equal(first.p_delta, second.p_delta)

    @pytest.mark.parametrize('shape', [(1, 100, 100), (1, 0, 16), (2, 32, 32), (32, 32)])
    def test_rejects_bad_image(self, small_config, shape):
        with pytest.raises(StructuralError):
            forward(np.zeros(shape, dtype=np.float32), init_weights(small_config))

    def test_nan_weights_report_layer(self, small_config, rng):
        weights = init_weights(small_config)
        weights['feature.1.weight'][:] = np.nan
        with pytest.raises(NumericFault) as excinfo:
            forward(rng.random((1, 32, 32)).astype(np.float32), weights)
        assert excinfo.value.layer == 'feature.1'


class TestBackward:
    def test_zero_incoming_gradient(self, small_config, rng):
        weights = init_weights(small_config, seed=0)
        result = forward(rng.random((1, 32, 32)).astype(np.float32), weights)
        grads = backward(result.cache, np.zeros((32, 32)), np.zeros((32, 32)))
        assert list(grads) == list(weights)
        assert all(not g.any() for g in grads.values())

    def test_rejects_wrong_gradient_shape(self, small_config, rng):
        result = forward(rng.random((1, 32, 32)).astype(np.float32), init_weights(small_config))
        with pytest.raises(StructuralError):
            backward(result.cache, np.zeros((16, 16)), np.zeros((32, 32)))

    def test_core_loss_leaves_delta_attention_untouched(self, small_config, rng):
        weights = init_weights(small_config, seed=0, dtype=np.float64)
        result = forward(rng.random((1, 32, 32)), weights)
        grads = backward(result.cache, rng.standard_normal((32, 32)), np.zeros((32, 32)))
        for scale in range(1, 6):
            assert not grads[f'delta_attention.{scale}.weight'].any()
            assert not grads[f'delta_attention.{scale}.bias'].any()
        assert grads['core_attention.1.weight'].any()
        assert grads['feature.1.weight'].any()

    def test_delta_loss_reaches_core_attention_only_through_pooling(self, small_config, rng):
        weights = init_weights(small_config, seed=0, dtype=np.float64)
        result = forward(rng.random((1, 32, 32)), weights)
        grads = backward(result.cache, np.zeros((32, 32)), rng.standard_normal((32, 32)))
        # the last core attention feeds nothing but the core map
        assert not grads['core_attention.5.weight'].any()
        assert grads['core_attention.1.weight'].any()
        assert grads['delta_attention.5.weight'].any()

    @pytest.mark.parametrize('overrides', [
        {},
        {'pool_source': 'averaged'},
        {'feature_activation': 'none'},
    ])
    def test_matches_finite_differences(self, small_config, rng, overrides):
        config = NetworkConfig(feature_widths=small_config.feature_widths, **overrides)
        weights = init_weights(config, seed=5, dtype=np.float64)
        # random biases move pre-activations off the ReLU kink and vary the fused maps
        for name in weights:
            if name.endswith('.bias'):
                weights[name][:] = rng.uniform(-0.5, 0.5, size=weights[name].shape)
        image = rng.random((1, 32, 32))
        g_core = rng.standard_normal((32, 32))
        g_delta = rng.standard_normal((32, 32))

        def loss():
            result = forward(image, weights)
            return float((g_core * result.p_core).sum() + (g_delta * result.p_delta).sum())

        grads = backward(forward(image, weights).cache, g_core, g_delta)
        for name in weights:
            numeric = numerical_gradient(loss, weights[name], eps=1e-6)
            assert relative_error(grads[name], numeric) < 1e-3, name


def test_default_widths_run_end_to_end(rng):
    weights = init_weights(seed=0)
    result = forward(rng.random((1, 32, 32)).astype(np.float32), weights)
    grads = backward(result.cache, np.ones((32, 32)), np.ones((32, 32)))
    assert grads['feature.10.weight'].shape == (512, 512, 3, 3)
    assert grads.parameter_count() == weights.parameter_count()


@pytest.mark.slow
def test_detection_speed_on_cpu(rng):
    detector = Detector(init_weights(seed=0))
    output = detector.detect(rng.random((512, 512)).astype(np.float32))
    assert output.time_ms < 5000.0
