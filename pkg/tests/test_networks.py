"""Dense network forward/backward tests against finite differences."""

import numpy as np
import pytest

from structsense.errors import ShapeMismatchError
from structsense.networks import (
    DenseNetwork,
    GradientBundle,
    backward,
    backward_cached,
    fd_jacobian,
    forward,
    forward_cached,
    init_dense,
)


def small_net(seed=0, sizes=(3, 8, 2), activate_output=False):
    rng = np.random.default_rng(seed)
    return init_dense(sizes, rng, activate_output=activate_output)


class TestForward:
    def test_identity_single_layer(self):
        net = DenseNetwork([np.eye(3)], [np.zeros(3)])
        x = np.array([0.3, -0.2, 1.1])
        # final layer is linear by default, so this is the identity
        np.testing.assert_array_equal(forward(net, x), x)

    def test_known_affine_map(self):
        w = np.array([[2.0], [-1.0]])
        net = DenseNetwork([w], [np.array([0.5])])
        out = forward(net, np.array([3.0, 4.0]))
        assert out[0] == pytest.approx(2.0 * 3.0 - 4.0 + 0.5)

    def test_leaky_slope_applied_on_hidden_layer(self):
        # hidden layer maps to -1, leaky slope 0.01 turns it into -0.01
        net = DenseNetwork(
            [np.array([[1.0]]), np.array([[1.0]])],
            [np.array([-2.0]), np.array([0.0])],
        )
        out = forward(net, np.array([1.0]))
        assert out[0] == pytest.approx(-0.01)

    def test_batch_matches_loop(self):
        net = small_net()
        rng = np.random.default_rng(3)
        batch = rng.standard_normal((7, 3))
        stacked = forward(net, batch)
        for row in range(7):
            np.testing.assert_allclose(stacked[row], forward(net, batch[row]))

    def test_wrong_input_size_rejected(self):
        with pytest.raises(ShapeMismatchError):
            forward(small_net(), np.zeros(4))


class TestBackward:
    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("activate_output", [False, True])
    def test_input_gradient_matches_fd(self, seed, activate_output):
        net = small_net(seed, activate_output=activate_output)
        rng = np.random.default_rng(100 + seed)
        # keep away from the leaky kinks where the derivative jumps
        x = rng.uniform(0.2, 1.0, size=3) * rng.choice([-1.0, 1.0], size=3)
        upstream = rng.standard_normal(2)
        grads = backward(net, x, upstream)
        jac = fd_jacobian(lambda q: forward(net, q), x, h=1e-6)
        np.testing.assert_allclose(grads.input_grad, upstream @ jac, atol=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_weight_gradients_match_fd(self, seed):
        net = small_net(seed)
        rng = np.random.default_rng(200 + seed)
        x = rng.uniform(0.2, 1.0, size=3)
        upstream = rng.standard_normal(2)
        grads = backward(net, x, upstream)
        for layer in range(net.n_layers):
            w0 = net.weights[layer]

            def loss_of(w_flat):
                saved = net.weights[layer]
                net.weights[layer] = w_flat.reshape(w0.shape)
                try:
                    return np.array([float(upstream @ forward(net, x))])
                finally:
                    net.weights[layer] = saved

            fd = fd_jacobian(loss_of, w0.reshape(-1), h=1e-6).reshape(w0.shape)
            np.testing.assert_allclose(grads.weight_grads[layer], fd, atol=1e-6)
            b0 = net.biases[layer]

            def loss_of_b(b_flat):
                saved = net.biases[layer]
                net.biases[layer] = b_flat
                try:
                    return np.array([float(upstream @ forward(net, x))])
                finally:
                    net.biases[layer] = saved

            fd_b = fd_jacobian(loss_of_b, b0, h=1e-6).reshape(-1)
            np.testing.assert_allclose(grads.bias_grads[layer], fd_b, atol=1e-6)

    def test_batch_gradients_sum_over_rows(self):
        net = small_net(1)
        rng = np.random.default_rng(9)
        batch = rng.uniform(0.2, 1.0, size=(5, 3))
        upstream = rng.standard_normal((5, 2))
        batched = backward(net, batch, upstream)
        total = GradientBundle.zeros_like(net)
        for row in range(5):
            total.add_(backward(net, batch[row], upstream[row]))
        for layer in range(net.n_layers):
            np.testing.assert_allclose(batched.weight_grads[layer],
                                       total.weight_grads[layer], atol=1e-12)
        np.testing.assert_allclose(batched.input_grad[2],
                                   backward(net, batch[2], upstream[2]).input_grad)

    def test_cached_equals_recomputed(self):
        net = small_net(2)
        x = np.array([0.4, -0.6, 0.9])
        upstream = np.array([1.0, -2.0])
        _, cache = forward_cached(net, x)
        a = backward_cached(net, cache, upstream)
        b = backward(net, x, upstream)
        np.testing.assert_array_equal(a.input_grad, b.input_grad)
        for layer in range(net.n_layers):
            np.testing.assert_array_equal(a.weight_grads[layer],
                                          b.weight_grads[layer])


class TestInit:
    def test_final_scale_shrinks_last_layer_only(self):
        a = init_dense((3, 8, 2), np.random.default_rng(0))
        b = init_dense((3, 8, 2), np.random.default_rng(0), final_scale=1e-2)
        np.testing.assert_array_equal(a.weights[0], b.weights[0])
        np.testing.assert_allclose(b.weights[1], 1e-2 * a.weights[1])

    def test_biases_start_at_zero(self):
        net = init_dense((4, 6, 3), np.random.default_rng(1))
        for b in net.biases:
            np.testing.assert_array_equal(b, 0.0)

    def test_needs_two_sizes(self):
        with pytest.raises(ValueError):
            init_dense((5,), np.random.default_rng(0))

    def test_glorot_bound_respected(self):
        net = init_dense((10, 20), np.random.default_rng(2))
        bound = np.sqrt(6.0 / 30.0)
        assert np.abs(net.weights[0]).max() <= bound
