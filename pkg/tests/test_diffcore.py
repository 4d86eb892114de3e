import math

import numpy as np
import pytest

from sparsecbm.diffcore import (
    Block,
    ParamVector,
    affine,
    finite_difference_check,
    log_softmax,
    sigmoid,
    softmax_cross_entropy,
)


class TestAffine:
    def test_identity(self):
        out = affine(np.eye(2), np.zeros(2), np.array([1.0, 2.0]))
        assert np.array_equal(out, [1.0, 2.0])

    def test_zero_weights_return_bias(self):
        out = affine(np.zeros((1, 3)), np.array([3.0]), np.array([9.0, -2.0, 4.0]))
        assert np.array_equal(out, [3.0])

    def test_hand_computed(self):
        out = affine(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2), np.array([1.0, 1.0]))
        assert np.array_equal(out, [3.0, 7.0])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            affine(np.eye(2), np.zeros(2), np.array([1.0, 2.0, 3.0]))
        with pytest.raises(ValueError):
            affine(np.eye(2), np.zeros(3), np.array([1.0, 2.0]))


class TestSigmoid:
    def test_zero_is_half(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5

    def test_symmetry_identity(self):
        x = 2.5
        assert sigmoid(np.array([-x]))[0] == pytest.approx(1 - sigmoid(np.array([x]))[0], abs=1e-15)

    def test_log3_gives_three_quarters(self):
        assert sigmoid(np.array([math.log(3.0)]))[0] == pytest.approx(0.75, abs=1e-14)

    def test_extreme_values_saturate_without_overflow(self):
        out = sigmoid(np.array([709.0, -709.0, 1e4, -1e4]))
        assert out[0] == 1.0 and out[2] == 1.0
        assert out[1] == pytest.approx(0.0, abs=1e-300)
        assert np.all(np.isfinite(out))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        for label in range(5):
            assert softmax_cross_entropy(np.zeros(5), label) == pytest.approx(math.log(5), abs=1e-12)

    def test_saturated(self):
        assert softmax_cross_entropy(np.array([1000.0, 0.0]), 0) == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed(self):
        # -log softmax([1,2,3])[2] = log(1 + e^-1 + e^-2)
        expected = math.log(1 + math.exp(-1) + math.exp(-2))
        assert softmax_cross_entropy(np.array([1.0, 2.0, 3.0]), 2) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.40761, abs=1e-5)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros(3), 3)
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros(3), -1)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            logits = rng.normal(0, 5, size=7)
            c = rng.normal(0, 100)
            a = softmax_cross_entropy(logits, 4)
            b = softmax_cross_entropy(logits + c, 4)
            assert a == pytest.approx(b, abs=1e-12)


class TestParamVector:
    def test_blocks_must_be_contiguous(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(6), [Block("a", 0, 1, 2), Block("b", 3, 1, 3)])

    def test_size_must_match(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(5), [Block("a", 0, 2, 3)])

    def test_view_is_writable(self):
        pv = ParamVector(np.zeros(6), [Block("a", 0, 2, 3)])
        pv.view("a")[1, 2] = 7.0
        assert pv.values[5] == 7.0


class TestFiniteDifference:
    def test_quadratic_is_near_exact(self):
        # linear model, quadratic loss: central differences are exact up to
        # roundoff
        a = np.array([2.0, -3.0, 0.5])

        def loss(x):
            return float(0.5 * np.sum((a * x) ** 2))

        x0 = np.array([1.0, 2.0, -1.0])
        analytic = a * a * x0
        report = finite_difference_check(loss, x0, analytic, eps=1e-6)
        assert report.max_rel_err <= 1e-9

    def test_eps_zero_rejected(self):
        with pytest.raises(ValueError):
            finite_difference_check(lambda x: 0.0, np.zeros(1), np.zeros(1), eps=0.0)

    def test_detects_wrong_gradient(self):
        def loss(x):
            return float(np.sum(x**2))

        x0 = np.ones(3)
        report = finite_difference_check(loss, x0, np.zeros(3), eps=1e-6)
        assert report.max_rel_err > 0.9


def test_log_softmax_matches_direct():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 3, size=(4, 6))
    direct = np.log(np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True))
    assert np.allclose(log_softmax(logits), direct, atol=1e-12)
