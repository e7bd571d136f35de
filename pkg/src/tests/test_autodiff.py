import numpy as np
from unittest import TestCase

import autodiff
import util
from autodiff import Tensor, UnsupportedOperationError, grad, parameter, stop_gradient


def numeric_gradient(fn, x, step=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        g[i] = (fn(up) - fn(down)) / (2 * step)
    return g


class TestAutodiff(TestCase):
    def test_polynomial(self):
        x = parameter(3.0)
        (g,) = grad(x * x * x + 2.0 * x, [x])
        assert np.isclose(g, 29.0)

    def test_stop_gradient(self):
        # d/dx [x * sg(2x)] at x = 3 is sg(2x) = 6
        x = parameter(3.0)
        (g,) = grad(x * stop_gradient(2.0 * x), [x])
        assert np.isclose(g, 6.0)

    def test_matmul_and_elementary_functions_match_finite_differences(self):
        rng = np.random.default_rng(1)
        w_value = rng.normal(size=(3, 2))
        x_value = rng.normal(size=(4, 2))

        def loss(w):
            if isinstance(w, Tensor):
                z = Tensor(x_value) @ w.T
                return (util.tanh(z) * util.sin(z) + util.exp(0.1 * z)).sum()
            z = x_value @ w.T
            return float((np.tanh(z) * np.sin(z) + np.exp(0.1 * z)).sum())

        w = parameter(w_value)
        (g,) = grad(loss(w), [w])
        assert np.allclose(g, numeric_gradient(loss, w_value), atol=1e-6)

    def test_broadcast_gradient_is_summed(self):
        b = parameter(np.zeros(3))
        x = Tensor(np.ones((5, 3)))
        (g,) = grad((x + b).sum(), [b])
        assert g.tolist() == [5.0, 5.0, 5.0]

    def test_indexing_and_stacking(self):
        x = parameter(np.array([1.0, 2.0]))
        y = autodiff.stack([x[0] * x[1], x[1]])
        (g,) = grad(y.sum(), [x])
        assert g.tolist() == [2.0, 2.0]

    def test_softmax_gradient(self):
        a_value = np.array([0.2, -0.5, 1.0])
        weights = np.array([1.0, 2.0, 3.0])
        a = parameter(a_value)
        (g,) = grad((util.softmax(a) * weights).sum(), [a])
        expected = numeric_gradient(lambda v: float(util.softmax(v) @ weights), a_value)
        assert np.allclose(g, expected, atol=1e-6)

    def test_unused_input_gets_zero_gradient(self):
        x, y = parameter(1.0), parameter(np.ones(2))
        _, gy = grad(x * 2.0, [x, y])
        assert gy.tolist() == [0.0, 0.0]

    def test_non_scalar_output_rejected(self):
        x = parameter(np.ones(2))
        with self.assertRaises(util.UsageError):
            grad(x * 2.0, [x])

    def test_unsupported_operations(self):
        x = parameter(np.ones(2))
        with self.assertRaises(UnsupportedOperationError):
            np.floor(x)
        with self.assertRaises(UnsupportedOperationError):
            util.clip(x, -1.0, 1.0)
        with self.assertRaises(UnsupportedOperationError):
            x ** parameter(2.0)
