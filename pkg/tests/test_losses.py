"""Tests for softmax, cross-entropy and the SGD optimizer."""

import math

import numpy as np
import pytest

from src.core.exceptions import BackwardBeforeForwardError, LabelRangeError, ShapeMismatchError
from src.nn.gradcheck import numerical_gradient, relative_error
from src.nn.losses import SoftmaxCrossEntropy, log_softmax, softmax, softmax_cross_entropy
from src.nn.optim import SGD


class TestSoftmaxCrossEntropy:

    def test_uniform_logits(self):
        value = softmax_cross_entropy(np.zeros(5), 2)
        assert value.loss == pytest.approx(math.log(5))

    def test_gradient_rows_sum_to_zero(self, rng):
        value = softmax_cross_entropy(rng.standard_normal((4, 3)), np.array([0, 1, 2, 1]))
        np.testing.assert_allclose(value.grad.sum(axis=1), 0.0, atol=1e-12)

    def test_batch_mean(self, rng):
        logits = rng.standard_normal((3, 4))
        labels = np.array([3, 0, 1])
        value = softmax_cross_entropy(logits, labels)
        singles = [softmax_cross_entropy(logits[i], labels[i]).loss for i in range(3)]
        assert value.loss == pytest.approx(np.mean(singles))
        np.testing.assert_allclose(value.per_example, singles)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((3, 5))
        labels = rng.integers(0, 5, 3)
        analytic = softmax_cross_entropy(logits, labels).grad
        numeric = numerical_gradient(lambda: softmax_cross_entropy(logits, labels).loss, logits, 1e-6)
        assert relative_error(analytic, numeric) < 1e-6

    def test_shift_invariance(self, rng):
        logits = rng.standard_normal((2, 4))
        a = softmax_cross_entropy(logits, np.array([1, 3]))
        b = softmax_cross_entropy(logits + 100.0, np.array([1, 3]))
        assert a.loss == pytest.approx(b.loss)

    def test_large_logits_stay_finite(self):
        value = softmax_cross_entropy(np.array([1000.0, -1000.0]), 1)
        assert value.loss == pytest.approx(2000.0)
        assert np.all(np.isfinite(value.grad))

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_confident_prediction_keeps_tiny_loss(self, dtype):
        value = softmax_cross_entropy(np.array([10.0, -10.0], dtype=dtype), 0)
        assert value.loss == pytest.approx(-math.log(1.0 / (1.0 + math.exp(-20.0))), rel=1e-6)
        assert value.loss > 0.0
        assert value.grad.dtype == dtype

    def test_label_out_of_range(self):
        with pytest.raises(LabelRangeError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_label_count_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0]))

    def test_loss_layer(self):
        loss = SoftmaxCrossEntropy()
        with pytest.raises(BackwardBeforeForwardError):
            loss.backward()
        loss.forward(np.zeros((1, 2)), np.array([0]))
        np.testing.assert_allclose(loss.backward(2.0), [[-1.0, 1.0]])


class TestSoftmax:

    def test_rows_sum_to_one(self, rng):
        probs = softmax(rng.standard_normal((5, 7)) * 10)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_log_softmax_consistency(self, rng):
        logits = rng.standard_normal((3, 4))
        np.testing.assert_allclose(np.exp(log_softmax(logits)), softmax(logits))


class TestSGD:

    def test_momentum_update(self):
        param = np.array([1.0])
        grad = np.array([0.5])
        opt = SGD([(param, grad)], learning_rate=0.1, momentum=0.9)
        opt.step()
        np.testing.assert_allclose(param, [0.95])
        opt.step()
        # v = 0.9 * -0.05 - 0.05
        np.testing.assert_allclose(param, [0.95 - 0.095])

    def test_zero_gradient_leaves_parameter(self):
        param = np.array([2.0, 3.0])
        opt = SGD([(param, np.zeros(2))], learning_rate=1.0)
        for _ in range(3):
            opt.step()
        np.testing.assert_array_equal(param, [2.0, 3.0])
        assert not opt.velocity[0].any()

    def test_rejects_non_positive_learning_rate(self):
        with pytest.raises(ValueError):
            SGD([], learning_rate=0.0)
