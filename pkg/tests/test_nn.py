import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forgelab import nn
from forgelab.data import MiniBatch, one_hot
from forgelab.nn import FcnArchitecture, FcnParams, Gradient
from oracles import finite_difference_grad, random_params


def _batch(rng, d, n, b):
    return MiniBatch(rng.uniform(-1, 1, (d, b)), one_hot(rng.integers(0, n, b), n))


def test_architecture_validation():
    with pytest.raises(ValueError):
        FcnArchitecture((4,))
    with pytest.raises(ValueError):
        FcnArchitecture((4, 0, 3))
    with pytest.raises(ValueError):
        FcnArchitecture((4, 3), "tanh")
    arch = FcnArchitecture((4, 5, 3))
    assert (arch.depth, arch.n_inputs, arch.n_classes, arch.n_params) == (2, 4, 3, 4 * 5 + 5 + 5 * 3 + 3)


def test_params_validation():
    with pytest.raises(ValueError):
        FcnParams([np.zeros((3, 2))], [np.zeros(3)])
    with pytest.raises(ValueError):
        FcnParams([np.zeros((3, 2)), np.zeros((3, 2))], [np.zeros(2), np.zeros(2)])
    with pytest.raises(ValueError):
        FcnParams([np.full((3, 2), np.inf)], [np.zeros(2)])


class TestForward:
    def test_zero_params_uniform(self):
        p = FcnParams([np.zeros((4, 3))], [np.zeros(3)])
        np.testing.assert_allclose(nn.forward(p, np.ones((4, 2))).probabilities, np.full((3, 2), 1 / 3))

    def test_linear_softmax(self, rng):
        p = random_params(rng, (4, 3), "identity")
        x = rng.standard_normal((4, 1))
        z = p.weights[0].T @ x + p.biases[0][:, None]
        expected = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(nn.forward(p, x).probabilities, expected, rtol=1e-12)

    def test_batch_equals_columns(self, rng):
        p = random_params(rng, (5, 6, 3))
        X = rng.standard_normal((5, 7))
        full = nn.forward(p, X).probabilities
        for k in range(7):
            np.testing.assert_allclose(full[:, k], nn.forward(p, X[:, [k]]).probabilities[:, 0], rtol=1e-14)

    def test_softmax_columns_sum_to_one(self, rng):
        p = random_params(rng, (5, 6, 4))
        P = nn.forward(p, 50 * rng.standard_normal((5, 40))).probabilities
        assert np.all(P >= 0)
        assert np.max(np.abs(P.sum(axis=0) - 1)) <= 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            nn.forward(random_params(rng, (5, 3)), np.zeros((4, 2)))


class TestLoss:
    def test_uniform_prediction(self):
        p = FcnParams([np.zeros((2, 3))], [np.zeros(3)])
        assert nn.batch_loss(p, np.ones((2, 1)), one_hot([1], 3)) == pytest.approx(math.log(3), abs=1e-7)
        assert math.log(3) == pytest.approx(1.0986123, abs=1e-7)

    def test_confident_limit(self):
        p = FcnParams([np.zeros((1, 2))], [np.array([60.0, -60.0])])
        assert nn.batch_loss(p, np.zeros((1, 1)), one_hot([0], 2)) < 1e-40

    def test_mean_of_two(self, rng):
        p = random_params(rng, (3, 4, 2))
        X, Y = rng.standard_normal((3, 2)), one_hot([0, 1], 2)
        single = [nn.batch_loss(p, X[:, [k]], Y[:, [k]]) for k in range(2)]
        assert nn.batch_loss(p, X, Y) == pytest.approx(np.mean(single), rel=1e-14)

    def test_label_shape_mismatch(self, rng):
        p = random_params(rng, (3, 2))
        with pytest.raises(ValueError):
            nn.loss(nn.forward(p, np.zeros((3, 2))), np.zeros((3, 2)))


class TestGradExample:
    def test_perfect_prediction_vanishes(self):
        p = FcnParams([np.zeros((2, 2))], [np.array([80.0, -80.0])])
        g = nn.grad_example(p, [0.3, 0.4], [1.0, 0.0])
        assert np.max(np.abs(g.flatten())) < 1e-30

    def test_single_layer_formula(self, rng):
        p = random_params(rng, (4, 3), "identity")
        x, y = rng.standard_normal(4), np.array([0.0, 1.0, 0.0])
        y_hat = nn.forward(p, x[:, None]).probabilities[:, 0]
        g = nn.grad_example(p, x, y)
        np.testing.assert_allclose(g.d_weights[0], np.outer(x, y_hat - y), rtol=1e-13)

    def test_finite_differences_two_layers(self, rng):
        p = random_params(rng, (4, 5, 3))
        x = rng.uniform(-1, 1, (4, 1))
        while np.min(np.abs(nn.forward(p, x).pre_activations[0])) < 1e-4:
            x = rng.uniform(-1, 1, (4, 1))
        y = one_hot([2], 3)
        analytic = nn.grad_example(p, x[:, 0], y[:, 0]).flatten()
        assert np.max(np.abs(analytic - finite_difference_grad(p, x, y))) <= 1e-6

    def test_shape_mismatch(self, rng):
        p = random_params(rng, (4, 3))
        with pytest.raises(ValueError):
            nn.grad_example(p, np.ones(3), np.ones(3))
        with pytest.raises(ValueError):
            nn.grad_example(p, np.ones(4), np.ones(2))


class TestGradBatch:
    def test_single_example(self, rng):
        p = random_params(rng, (4, 6, 3))
        batch = _batch(rng, 4, 3, 1)
        np.testing.assert_array_equal(nn.grad_batch(p, batch).flatten(),
                                      nn.grad_example(p, batch.X[:, 0], batch.Y[:, 0]).flatten())

    def test_duplicate(self, rng):
        p = random_params(rng, (4, 6, 3))
        one = _batch(rng, 4, 3, 1)
        two = MiniBatch(np.hstack([one.X, one.X]), np.hstack([one.Y, one.Y]))
        np.testing.assert_allclose(nn.grad_batch(p, two).flatten(), nn.grad_batch(p, one).flatten(),
                                   rtol=0, atol=1e-15)

    def test_matches_looped_mean(self, rng):
        p = random_params(rng, (5, 7, 4, 3))
        batch = _batch(rng, 5, 3, 8)
        loop = sum(nn.grad_example(p, batch.X[:, k], batch.Y[:, k]).flatten() for k in range(8)) / 8
        assert np.max(np.abs(nn.grad_batch(p, batch).flatten() - loop)) <= 1e-12

    def test_matrix_path_agrees(self, rng):
        p = random_params(rng, (5, 7, 3))
        batch = _batch(rng, 5, 3, 8)
        a = nn.grad_batch(p, batch).flatten()
        b = nn.grad_batch_matrix(p, batch).flatten()
        assert np.max(np.abs(a - b)) <= 1e-12

    def test_plan_hook(self, rng):
        class Reverse:
            def reduce(self, rows):
                return nn.sequential_sum(rows, range(rows.shape[0] - 1, -1, -1))
        p = random_params(rng, (5, 7, 3))
        batch = _batch(rng, 5, 3, 8)
        np.testing.assert_allclose(nn.grad_batch(p, batch, Reverse()).flatten(),
                                   nn.grad_batch(p, batch).flatten(), atol=1e-15)


class TestErrorMatrices:
    def test_row_sums_zero(self, rng):
        p = random_params(rng, (5, 6, 4))
        D = nn.error_matrices(p, _batch(rng, 5, 4, 10))[-1]
        assert np.max(np.abs(D.sum(axis=1))) <= 1e-12

    def test_single_layer_cross_check(self, rng):
        p = random_params(rng, (5, 3))
        batch = _batch(rng, 5, 3, 6)
        D = nn.error_matrices(p, batch)[0]
        np.testing.assert_allclose(batch.X @ D / 6, nn.grad_batch(p, batch).d_weights[0], atol=1e-15)

    def test_one_hot_rows(self, rng):
        p = random_params(rng, (5, 3))
        batch = _batch(rng, 5, 3, 4)
        D = nn.error_matrices(p, batch)[0]
        yh = nn.forward(p, batch.X).probabilities
        np.testing.assert_allclose(D, (yh - batch.Y).T)

    def test_shapes(self, rng):
        p = random_params(rng, (5, 7, 4, 3))
        assert [D.shape for D in nn.error_matrices(p, _batch(rng, 5, 3, 9))] == [(9, 7), (9, 4), (9, 3)]


class TestDistance:
    def test_self_and_zero(self, rng):
        p = random_params(rng, (4, 5, 3))
        g = nn.grad_batch(p, _batch(rng, 4, 3, 3))
        zero = Gradient([np.zeros_like(w) for w in g.d_weights], [np.zeros_like(b) for b in g.d_biases])
        assert nn.l2_distance(g, g) == 0
        assert nn.l2_distance(zero, g) == pytest.approx(np.linalg.norm(g.flatten()))

    def test_flatten_order(self):
        p = FcnParams([np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])], [[5.0, 6.0], [7.0]])
        np.testing.assert_array_equal(p.flatten(), [1, 2, 5, 6, 3, 4, 7])
        g = Gradient.from_flat(p.flatten(), p)
        np.testing.assert_array_equal(g.flatten(), p.flatten())
        np.testing.assert_array_equal(nn.params_from_flat(p.flatten(), p).weights[1], p.weights[1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.l2_distance(np.zeros(3), np.zeros(4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_triangle_inequality(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = (r.standard_normal(7) for _ in range(3))
        assert nn.l2_distance(a, c) <= nn.l2_distance(a, b) + nn.l2_distance(b, c) + 1e-12


class TestInversion:
    def test_round_trip(self, rng):
        p = random_params(rng, (6, 16, 3))
        x = rng.uniform(0, 1, 6)
        g = nn.grad_example(p, x, [0.0, 1.0, 0.0])
        x_rec, delta = nn.invert_single_example(g)
        assert np.max(np.abs(x_rec - x)) <= 1e-9
        np.testing.assert_allclose(np.outer(x_rec, delta), g.d_weights[0], atol=1e-9)

    def test_zero_gradient_degenerate(self, rng):
        p = random_params(rng, (4, 3))
        g = nn.grad_example(p, np.zeros(4), np.zeros(3))
        g = Gradient([np.zeros_like(w) for w in g.d_weights], [np.zeros_like(b) for b in g.d_biases])
        assert nn.invert_single_example(g) is None

    def test_distinct_examples_distinct_gradients(self, rng):
        p = random_params(rng, (6, 16, 3))
        for _ in range(1000):
            x1, x2 = rng.uniform(0, 1, (2, 6))
            y1, y2 = one_hot(rng.integers(0, 3, 2), 3).T
            g1, g2 = nn.grad_example(p, x1, y1), nn.grad_example(p, x2, y2)
            assert nn.l2_distance(g1, g2) > 0

    def test_dead_relu_units_collide(self):
        # all hidden units inactive: the gradient no longer depends on x
        p = FcnParams([np.full((2, 3), -1.0), np.ones((3, 2))], [np.full(3, -0.5), np.array([0.2, -0.1])])
        g1 = nn.grad_example(p, [0.1, 0.2], [1.0, 0.0])
        g2 = nn.grad_example(p, [0.7, 0.4], [1.0, 0.0])
        assert nn.l2_distance(g1, g2) == 0
        assert nn.invert_single_example(g1) is None


def test_relu_derivative_at_zero_is_zero():
    p = FcnParams([np.zeros((1, 1)), np.ones((1, 2))], [np.zeros(1), np.zeros(2)])
    g = nn.grad_example(p, [1.0], [1.0, 0.0])
    assert g.d_weights[0][0, 0] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 2, 3]))
def test_zero_row_sums_real_labels(seed, depth):
    r = np.random.default_rng(seed)
    dims = tuple(int(v) for v in r.integers(1, 8, depth + 1))
    p = random_params(r, dims)
    b = int(r.integers(1, 9))
    batch = MiniBatch(r.standard_normal((dims[0], b)), 3 * r.standard_normal((dims[-1], b)))
    D = nn.error_matrices(p, batch)[-1]
    assert np.max(np.abs(D.sum(axis=1))) <= 1e-12
