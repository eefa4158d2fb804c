"""Cross-entropy surrogate, its sensitivity, and private output training."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcdbn.errors import EmptyBatch, NonPositiveBudget, ShapeMismatch
from dpcdbn.softmax import (
    SoftmaxParams,
    clamp_features,
    clip_quadratic,
    cross_entropy,
    descend_quadratic,
    perturb_surrogate,
    predict_label,
    predict_proba,
    softmax_sensitivity,
    surrogate_minimizer,
    taylor_surrogate_coeffs,
    train_private_softmax,
    train_private_softmax_multiclass,
)


def toy_separable(n=400, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = np.empty((n, 2))
    x[:, 0] = np.where(y == 1, 0.9, 0.1) + rng.normal(0, 0.02, n)
    x[:, 1] = np.where(y == 1, 0.1, 0.9) + rng.normal(0, 0.02, n)
    return np.clip(x, 0, 1), y


class TestCrossEntropy:
    def test_zero_weights(self, rng):
        x = rng.random((7, 3))
        y = rng.integers(0, 2, 7)
        loss = cross_entropy(x, y, SoftmaxParams(np.zeros(3)))
        assert loss == pytest.approx(7 * math.log(2.0), rel=1e-12)

    def test_saturated_correct_prediction(self):
        x = np.array([[1.0]])
        loss = cross_entropy(x, np.array([1]), SoftmaxParams(np.array([1000.0])))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_scalar_value(self):
        loss = cross_entropy(
            np.array([[1.0]]), np.array([1]), SoftmaxParams(np.array([1.0]))
        )
        assert loss == pytest.approx(math.log(1 + math.exp(-1.0)), rel=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            cross_entropy(rng.random((3, 2)), np.zeros(3), SoftmaxParams(np.zeros(5)))

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            cross_entropy(np.empty((0, 2)), np.empty(0), SoftmaxParams(np.zeros(2)))


class TestSurrogate:
    def test_coefficients_match_loss_derivatives_at_zero(self, rng):
        x = rng.random((20, 3))
        y = rng.integers(0, 2, 20)
        surr = taylor_surrogate_coeffs(x, y)
        assert surr.constant == pytest.approx(20 * math.log(2.0), rel=1e-12)
        # directional derivatives of the true loss at w = 0
        h = 1e-5
        for _ in range(5):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            fp = cross_entropy(x, y, SoftmaxParams(h * d))
            fm = cross_entropy(x, y, SoftmaxParams(-h * d))
            f0 = cross_entropy(x, y, SoftmaxParams(np.zeros(3)))
            assert surr.linear @ d == pytest.approx((fp - fm) / (2 * h), abs=1e-5)
            assert 2 * d @ surr.quadratic @ d == pytest.approx(
                (fp - 2 * f0 + fm) / h**2, abs=1e-4
            )

    def test_label_flip_flips_linear_term_only(self, rng):
        x = rng.random((10, 2))
        y = rng.integers(0, 2, 10)
        a = taylor_surrogate_coeffs(x, y)
        b = taylor_surrogate_coeffs(x, 1 - y)
        assert a.linear == pytest.approx(-b.linear)
        assert a.quadratic == pytest.approx(b.quadratic)
        assert a.constant == pytest.approx(b.constant)

    def test_exactly_quadratic(self, rng):
        # third finite difference along any direction vanishes
        x = rng.random((15, 3))
        y = rng.integers(0, 2, 15)
        surr = taylor_surrogate_coeffs(x, y)
        d = rng.normal(size=3)
        h = 0.1
        values = [surr.value(t * h * d) for t in range(4)]
        third = values[3] - 3 * values[2] + 3 * values[1] - values[0]
        assert abs(third) <= 1e-9 * max(1.0, max(abs(v) for v in values))

    def test_tracks_true_loss_near_origin(self, rng):
        x = rng.random((30, 2))
        y = rng.integers(0, 2, 30)
        surr = taylor_surrogate_coeffs(x, y)
        w = rng.normal(size=2)
        w *= 0.05 / np.linalg.norm(w)
        margins = np.abs(x @ w)
        budget = float(np.sum(margins**3) / 6.0) + 1e-9
        gap = abs(surr.value(w) - cross_entropy(x, y, SoftmaxParams(w)))
        assert gap <= budget


class TestSensitivity:
    def test_unit_bound(self):
        assert softmax_sensitivity(1.0) == pytest.approx(1.25)

    def test_width_25(self):
        assert softmax_sensitivity(25.0) == pytest.approx(181.25)

    def test_strictly_increasing(self):
        assert softmax_sensitivity(2.0) > softmax_sensitivity(1.0)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            softmax_sensitivity(0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(min_value=1e-3, max_value=1e3))
    def test_formula(self, bound):
        assert softmax_sensitivity(bound) == pytest.approx(bound + bound**2 / 4.0)


class TestPerturbation:
    def test_draw_count(self, rng):
        x = rng.random((10, 4))
        y = rng.integers(0, 2, 10)
        surr = taylor_surrogate_coeffs(x, y)
        d = 4
        _, draws = perturb_surrogate(surr, 1.0, 1.0, rng)
        assert draws == 1 + d + d * (d + 1) // 2

    def test_noisy_quadratic_stays_symmetric(self, rng):
        x = rng.random((10, 3))
        y = rng.integers(0, 2, 10)
        noisy, _ = perturb_surrogate(taylor_surrogate_coeffs(x, y), 5.0, 0.1, rng)
        assert noisy.quadratic == pytest.approx(noisy.quadratic.T)

    def test_eigenvalue_floor(self, rng):
        x = rng.random((10, 3))
        y = rng.integers(0, 2, 10)
        noisy, _ = perturb_surrogate(taylor_surrogate_coeffs(x, y), 50.0, 0.01, rng)
        floored = clip_quadratic(noisy)
        assert np.linalg.eigvalsh(floored.quadratic).min() >= 1e-6 - 1e-12

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.random((12, 3))
        y = rng.integers(0, 2, 12)
        noisy, _ = perturb_surrogate(taylor_surrogate_coeffs(x, y), 2.0, 0.5, rng)
        w = rng.normal(size=3)
        g = noisy.gradient(w)
        h = 1e-6
        for idx in range(3):
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            fd = (noisy.value(wp) - noisy.value(wm)) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-5 * max(1.0, abs(g[idx]))


class TestTraining:
    def test_clamping(self):
        clamped = clamp_features(np.array([[-0.2, 0.5, 1.7]]))
        assert clamped == pytest.approx(np.array([[0.0, 0.5, 1.0]]))

    def test_high_epsilon_recovers_noiseless_minimizer(self):
        x, y = toy_separable()
        params, _, _ = train_private_softmax(
            x, y, epsilon=1e9, epochs=20_000, lr=0.05, rng=np.random.default_rng(2)
        )
        w_star = surrogate_minimizer(taylor_surrogate_coeffs(x, y))
        assert np.linalg.norm(params.weights - w_star) <= 1e-6

    def test_separable_toy_set_with_moderate_budget(self):
        x, y = toy_separable()
        params, delta, draws = train_private_softmax(
            x, y, epsilon=8.0, epochs=200, lr=0.05, rng=np.random.default_rng(1)
        )
        assert delta == pytest.approx(softmax_sensitivity(2.0))
        assert draws == 1 + 2 + 3
        assert np.mean(predict_label(x, params) == y) >= 0.95

    def test_determinism(self):
        x, y = toy_separable()
        a, _, _ = train_private_softmax(x, y, 1.0, 50, 0.05, np.random.default_rng(3))
        b, _, _ = train_private_softmax(x, y, 1.0, 50, 0.05, np.random.default_rng(3))
        assert np.array_equal(a.weights, b.weights)

    def test_nonpositive_epsilon_rejected(self):
        x, y = toy_separable(20)
        with pytest.raises(NonPositiveBudget):
            train_private_softmax(x, y, 0.0, 10, 0.05, np.random.default_rng(0))

    def test_multiclass_one_vs_rest(self, rng):
        n = 300
        y = rng.integers(0, 3, n)
        x = np.zeros((n, 3))
        x[np.arange(n), y] = 0.9
        x += rng.normal(0, 0.02, x.shape)
        x = np.clip(x, 0, 1)
        params, _, draws = train_private_softmax_multiclass(
            x, y, 3, epsilon=24.0, epochs=400, lr=0.05, rng=np.random.default_rng(4)
        )
        assert params.weights.shape == (3, 3)
        assert draws == 3 * (1 + 3 + 6)
        assert np.mean(predict_label(x, params) == y) >= 0.9

    def test_descend_from_origin_tracks_linear_term(self, rng):
        # a single step from 0 moves exactly along the linear coefficient
        x = rng.random((10, 2))
        y = rng.integers(0, 2, 10)
        surr = taylor_surrogate_coeffs(x, y)
        w = descend_quadratic(surr, 1, 0.01)
        assert w == pytest.approx(-0.01 * surr.linear)


class TestPrediction:
    def test_zero_weights_give_half(self, rng):
        proba = predict_proba(rng.random((5, 3)), SoftmaxParams(np.zeros(3)))
        assert proba == pytest.approx(0.5)

    def test_label_threshold(self):
        params = SoftmaxParams(np.array([1.0, -1.0]))
        labels = predict_label(np.array([[0.9, 0.1], [0.1, 0.9]]), params)
        assert list(labels) == [1, 0]

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            predict_proba(rng.random((2, 3)), SoftmaxParams(np.zeros(4)))
