import math

import numpy as np
import pytest
from pydantic import ValidationError

from vflunlearn.exceptions import ArgumentError, DimensionError, NumericError
from vflunlearn.numcore import (
    LayerSpec,
    Network,
    ascent_step,
    backward,
    conv,
    dropout,
    fc,
    forward,
    l2_distance,
    maxpool,
    output_shape,
    project_to_ball,
    relu,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)
from vflunlearn.protocol import alexnet_party_layers, build_architecture, cnn_party_layers


def _check_gradients(net, x, finite_difference, training=False, seed=0):
    rng = np.random.default_rng(42)
    params = net.init_params(rng) + rng.normal(0, 0.01, net.num_params)
    x = x.copy()
    out, _ = forward(net, params, x, training, np.random.default_rng(seed))
    projection = rng.normal(size=out.shape)

    def loss():
        y, _ = forward(net, params, x, training, np.random.default_rng(seed))
        return float((y * projection).sum())

    _, cache = forward(net, params, x, training, np.random.default_rng(seed))
    grad_params, grad_input = backward(net, params, cache, projection)
    np.testing.assert_allclose(
        grad_params, finite_difference(loss, params), rtol=1e-4, atol=1e-7
    )
    np.testing.assert_allclose(grad_input, finite_difference(loss, x), rtol=1e-4, atol=1e-7)


class TestShapes:
    def test_cnn_party_maps_mnist_half_to_1344_features(self):
        assert output_shape(cnn_party_layers(1), (1, 28, 14)) == (64, 7, 3)

    def test_cnn_coordinator_takes_2688_inputs(self):
        arch = build_architecture("cnn", (1, 28, 14), (1, 28, 14))
        assert arch.coordinator.input_shape == (2688,)
        assert arch.coordinator.output_shape == (10,)

    def test_alexnet_party_and_coordinator_widths(self):
        assert output_shape(alexnet_party_layers(3), (3, 32, 16)) == (256, 4, 2)
        arch = build_architecture("alexnet", (3, 32, 16), (3, 32, 16))
        assert arch.coordinator.input_shape == (4096,)

    def test_fc_rejects_wrong_width(self):
        with pytest.raises(DimensionError):
            output_shape([fc(10, 4)], (3, 3))

    def test_conv_rejects_wrong_channels(self):
        with pytest.raises(DimensionError):
            Network([conv(3, 4, 3)], (1, 8, 8))


class TestLayerSpec:
    def test_conv_needs_kernel(self):
        with pytest.raises(ValidationError):
            LayerSpec(kind="conv", in_channels=1, out_channels=2)

    def test_dropout_probability_below_one(self):
        with pytest.raises(ValidationError):
            dropout(1.0)

    def test_dimensions_positive(self):
        with pytest.raises(ValidationError):
            fc(0, 3)


class TestParamLayout:
    def test_unflatten_then_flatten_is_identity(self):
        net = Network([conv(2, 3, 3), relu(), fc(3 * 4 * 4, 5)], (2, 6, 6))
        values = np.arange(net.num_params, dtype=np.float64)
        assert np.array_equal(net.layout.flatten(net.layout.unflatten(values)), values)

    def test_vectors_of_same_architecture_are_aligned(self):
        net = Network([fc(4, 3), relu(), fc(3, 2)], (4,))
        a = net.init_params(np.random.default_rng(0))
        b = net.init_params(np.random.default_rng(1))
        assert a.shape == b.shape == (4 * 3 + 3 + 3 * 2 + 2,)

    def test_biases_start_at_zero(self):
        net = Network([fc(4, 3)], (4,))
        params = net.layout.unflatten(net.init_params(np.random.default_rng(0)))
        assert np.all(params[0]["bias"] == 0)
        bound = math.sqrt(6 / 7)
        assert np.all(np.abs(params[0]["weight"]) <= bound)

    def test_wrong_size_rejected(self):
        net = Network([fc(4, 3)], (4,))
        with pytest.raises(DimensionError):
            net.layout.unflatten(np.zeros(3))


class TestGradients:
    def test_fc(self, finite_difference):
        net = Network([fc(6, 4)], (6,))
        _check_gradients(net, np.random.default_rng(1).normal(size=(3, 6)), finite_difference)

    def test_conv_with_padding(self, finite_difference):
        net = Network([conv(2, 3, 3, padding=1)], (2, 5, 5))
        _check_gradients(net, np.random.default_rng(2).normal(size=(2, 2, 5, 5)), finite_difference)

    def test_conv_with_stride(self, finite_difference):
        net = Network([conv(1, 2, 3, stride=2)], (1, 7, 7))
        _check_gradients(net, np.random.default_rng(3).normal(size=(2, 1, 7, 7)), finite_difference)

    def test_maxpool_and_relu(self, finite_difference):
        net = Network([conv(1, 2, 3, padding=1), relu(), maxpool(2)], (1, 6, 6))
        _check_gradients(net, np.random.default_rng(4).normal(size=(2, 1, 6, 6)), finite_difference)

    def test_overlapping_maxpool(self, finite_difference):
        net = Network([maxpool(3, stride=1), fc(2 * 3 * 3, 2)], (2, 5, 5))
        _check_gradients(net, np.random.default_rng(5).normal(size=(2, 2, 5, 5)), finite_difference)

    def test_dropout_in_training(self, finite_difference):
        net = Network([fc(5, 6), dropout(0.5), relu(), fc(6, 3)], (5,))
        _check_gradients(
            net,
            np.random.default_rng(6).normal(size=(4, 5)),
            finite_difference,
            training=True,
            seed=9,
        )

    def test_small_cnn_stack(self, finite_difference):
        layers = [conv(1, 2, 3, padding=1), relu(), maxpool(2), fc(2 * 3 * 2, 4), relu(), fc(4, 3)]
        net = Network(layers, (1, 6, 4))
        assert net.num_params <= 1000
        _check_gradients(net, np.random.default_rng(7).normal(size=(3, 1, 6, 4)), finite_difference)


class TestForward:
    def test_shape_mismatch(self):
        net = Network([fc(4, 2)], (4,))
        with pytest.raises(DimensionError):
            forward(net, np.zeros(net.num_params), np.zeros((2, 5)))

    def test_non_finite_output(self):
        net = Network([fc(4, 2)], (4,))
        params = np.full(net.num_params, np.inf)
        with pytest.raises(NumericError):
            forward(net, params, np.ones((1, 4)))

    def test_dropout_is_identity_at_inference(self):
        net = Network([dropout(0.5)], (6,))
        x = np.random.default_rng(0).normal(size=(3, 6))
        out, _ = forward(net, np.zeros(0), x, training=False)
        assert np.array_equal(out, x)

    def test_maxpool_tie_routes_gradient_to_first_element(self):
        net = Network([maxpool(2)], (1, 2, 2))
        x = np.ones((1, 1, 2, 2))
        _, cache = forward(net, np.zeros(0), x)
        _, grad = backward(net, np.zeros(0), cache, np.ones((1, 1, 1, 1)))
        assert grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_backward_rejects_foreign_cache(self):
        net_a = Network([fc(4, 2)], (4,))
        net_b = Network([fc(4, 3)], (4,))
        _, cache = forward(net_a, np.zeros(net_a.num_params), np.ones((1, 4)))
        with pytest.raises(DimensionError):
            backward(net_b, np.zeros(net_b.num_params), cache, np.ones((1, 3)))


class TestCrossEntropy:
    def test_single_sample_gradient(self):
        z = np.array([1.0, 2.0, 0.5])
        loss, grad = softmax_cross_entropy(z, 1)
        expected = softmax(z) - np.eye(3)[1]
        np.testing.assert_allclose(grad, expected, atol=1e-12)
        assert loss == pytest.approx(-math.log(softmax(z)[1]))

    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((4, 10)), [0, 1, 2, 3])
        assert loss == pytest.approx(math.log(10))

    def test_large_logits_stay_finite(self):
        loss, grad = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(grad))

    def test_batch_gradient_is_mean(self, finite_difference):
        z = np.random.default_rng(0).normal(size=(3, 4))
        labels = [0, 3, 2]
        _, grad = softmax_cross_entropy(z, labels)
        numeric = finite_difference(lambda: softmax_cross_entropy(z, labels)[0], z)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)

    def test_label_out_of_range(self):
        with pytest.raises(ArgumentError):
            softmax_cross_entropy(np.zeros(3), 3)


class TestVectorOps:
    def test_steps(self):
        p, g = np.array([1.0, 2.0]), np.array([0.5, -1.0])
        assert sgd_step(p, g, 0.1).tolist() == pytest.approx([0.95, 2.1])
        assert ascent_step(p, g, 0.1).tolist() == pytest.approx([1.05, 1.9])

    def test_misaligned_vectors(self):
        with pytest.raises(DimensionError):
            l2_distance(np.zeros(2), np.zeros(3))

    def test_projection_inside_ball_is_unchanged(self):
        p = np.array([0.3, 0.4])
        assert np.array_equal(project_to_ball(p, np.zeros(2), 1.0), p)

    def test_projection_lands_on_sphere(self):
        projected = project_to_ball(np.array([3.0, 4.0]), np.zeros(2), 1.0)
        np.testing.assert_allclose(projected, [0.6, 0.8])
        assert l2_distance(projected, np.zeros(2)) == pytest.approx(1.0)

    def test_projection_is_idempotent(self):
        rng = np.random.default_rng(0)
        center = rng.normal(size=20)
        once = project_to_ball(rng.normal(size=20) * 10, center, 0.7)
        assert np.array_equal(project_to_ball(once, center, 0.7), once)

    def test_radius_must_be_positive(self):
        with pytest.raises(ArgumentError, match="radius must be positive"):
            project_to_ball(np.ones(2), np.zeros(2), 0.0)

    def test_distance_beyond_the_square_overflow(self):
        assert l2_distance(np.array([1e200]), np.zeros(1)) == 1e200
        assert l2_distance(np.array([3e200, 4e200]), np.zeros(2)) == pytest.approx(5e200)
        assert l2_distance(np.array([3e-200, 4e-200]), np.zeros(2)) == pytest.approx(5e-200)

    def test_projection_of_a_huge_offset(self):
        np.testing.assert_allclose(project_to_ball(np.array([1e200]), np.zeros(1), 1.0), [1.0])
        projected = project_to_ball(np.array([3e200, -4e200]), np.ones(2), 2.0)
        np.testing.assert_allclose(projected, [1.0 + 1.2, 1.0 - 1.6])

    def test_triangle_inequality(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a, b, c = rng.normal(size=(3, 30)) * rng.uniform(0.1, 100)
            assert l2_distance(a, c) <= l2_distance(a, b) + l2_distance(b, c) + 1e-12


class TestBackward:
    def test_zero_upstream_gradient(self):
        net = Network(
            [conv(1, 2, 3, padding=1), relu(), maxpool(2), fc(2 * 3 * 3, 4)], (1, 6, 6)
        )
        rng = np.random.default_rng(0)
        params = net.init_params(rng)
        _, cache = forward(net, params, rng.normal(size=(2, 1, 6, 6)))
        grad_params, grad_input = backward(net, params, cache, np.zeros((2, 4)))
        assert not grad_params.any()
        assert not grad_input.any()
        assert grad_input.shape == (2, 1, 6, 6)


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_gradient_on_ten_logits(seed, finite_difference):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 2, size=10)
    label = int(rng.integers(10))
    _, grad = softmax_cross_entropy(z, label)
    numeric = finite_difference(lambda: softmax_cross_entropy(z, label)[0], z)
    np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-8)
