#!/usr/bin/env python

"""Tensor and gradient tape tests."""

from unittest import TestCase, main

import numpy as np

from tensor_core import (
    TEST_DTYPE, TRAIN_DTYPE, GradTape, NonFiniteError, ShapeError, Tensor, add, concat, from_data,
    gradient_errors, make_output, matmul, mean, mul, numeric_gradient, ones, relative_error, relu,
    reshape, resolve_dtype, sigmoid, stack, sum_all, take, tanh, transpose, zeros
)

# == TEST CASE =================================================================================== #

class TensorTestCase(TestCase):
    """Test cases for tensor construction."""

    def test_constructors(self):
        """Tests the zeros, ones, and from_data functions."""

        t = zeros((2, 3))
        self.assertEqual(t.shape, (2, 3))
        self.assertEqual(t.data.sum(), 0)
        self.assertEqual(t.dtype, np.float64)

        self.assertEqual(ones((4,), "f32").dtype, np.float32)
        self.assertEqual(ones((2, 2)).data.sum(), 4)

        t = from_data((2, 2), [1, 2, 3, 4])
        self.assertEqual(t.data[1, 0], 3)
        self.assertTrue(t.is_leaf)

        self.assertEqual(zeros((0, 3)).size, 0)

        self.assertRaises(ShapeError, from_data, (2, 2), [1, 2, 3])
        self.assertRaises(ShapeError, zeros, (2, -1))
        self.assertRaises(ValueError, zeros, (2,), "int32")

    def test_dtypes(self):
        """Tests the resolve_dtype function."""

        self.assertEqual(resolve_dtype(None), TEST_DTYPE)
        self.assertEqual(resolve_dtype("float32"), TRAIN_DTYPE)
        self.assertEqual(resolve_dtype(np.float64), TEST_DTYPE)

    def test_item(self):
        """Tests the Tensor.item method."""

        self.assertEqual(from_data((1, 1), [2.5]).item(), 2.5)
        self.assertRaises(ShapeError, zeros((2,)).item)

class OperatorTestCase(TestCase):
    """Test cases for the elementwise, matrix, and shape operators."""

    def setUp(self) -> None:
        super().setUp()
        self.rng = np.random.default_rng(0)

    def leaf(self, *shape) -> Tensor:
        return Tensor(self.rng.uniform(-1, 1, shape), requires_grad=True)

    def weighted_sum(self, out: Tensor, seed: int = 99) -> Tensor:
        weights = np.random.default_rng(seed).uniform(-1, 1, out.shape)
        return sum_all(mul(out, Tensor(weights)))

    def test_activations(self):
        """Tests the relu, sigmoid, and tanh functions."""

        self.assertEqual(relu(from_data((1,), [-1.5])).item(), 0.0)
        self.assertEqual(relu(from_data((1,), [2.0])).item(), 2.0)
        self.assertEqual(sigmoid(from_data((1,), [0.0])).item(), 0.5)
        self.assertAlmostEqual(sigmoid(from_data((1,), [-800.0])).item(), 0.0)
        self.assertAlmostEqual(sigmoid(from_data((1,), [800.0])).item(), 1.0)

        x = Tensor(np.array([0.3]), requires_grad=True)
        with GradTape() as tape:
            y = sum_all(tanh(x))
        tape.backward(y)

        h = 1e-5
        numeric = (np.tanh(0.3 + h) - np.tanh(0.3 - h)) / (2 * h)
        self.assertLess(abs(x.grad[0] - numeric), 1e-8)

    def test_matmul(self):
        """Tests the matmul function."""

        a = from_data((1, 2), [1, 2])
        b = from_data((2, 1), [3, 4])
        self.assertEqual(matmul(a, b).item(), 11)

        identity = Tensor(np.eye(3))
        m = self.leaf(3, 3)
        np.testing.assert_array_equal(matmul(identity, m).data, m.data)

        a, b = self.leaf(4, 5), self.leaf(5, 3)
        expected = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += a.data[i, k] * b.data[k, j]
        self.assertLess(np.abs(matmul(a, b).data - expected).max(), 1e-12)

        self.assertRaises(ShapeError, matmul, self.leaf(2, 3), self.leaf(2, 3))
        self.assertRaises(ShapeError, matmul, self.leaf(3), self.leaf(3, 2))

    def test_broadcast(self):
        """Tests the add and mul functions."""

        x = from_data((3,), [1, 2, 3])
        np.testing.assert_array_equal(add(x, 1.0).data, [2, 3, 4])
        np.testing.assert_array_equal((x * 2.0).data, [2, 4, 6])
        np.testing.assert_array_equal((x + x).data, [2, 4, 6])

        self.assertRaises(ShapeError, add, zeros((2, 3)), zeros((3, 2)))
        self.assertRaises(ShapeError, mul, zeros((2,)), zeros((3,)))

    def test_shape_operators(self):
        """Tests the reshape, transpose, take, stack, and concat functions."""

        x = from_data((2, 3), range(6))
        self.assertEqual(reshape(x, (3, 2)).shape, (3, 2))
        self.assertRaises(ShapeError, reshape, x, (4, 2))

        np.testing.assert_array_equal(transpose(x, (1, 0)).data, x.data.T)
        np.testing.assert_array_equal(take(x, 1, axis=0).data, [3, 4, 5])
        np.testing.assert_array_equal(take(x, 2, axis=1).data, [2, 5])
        self.assertRaises(ShapeError, take, x, 3, 1)

        self.assertEqual(stack([x, x], axis=0).shape, (2, 2, 3))
        self.assertEqual(concat([x, x], axis=-1).shape, (2, 6))
        self.assertRaises(ShapeError, stack, [x, zeros((3, 2))])
        self.assertRaises(ShapeError, stack, [])

        self.assertAlmostEqual(mean(x).item(), 2.5)
        self.assertRaises(ShapeError, mean, zeros((0,)))

    def test_gradients(self):
        """Tests every operator's backward function against central differences."""

        a, b = self.leaf(3, 4), self.leaf(3, 4)
        s = self.leaf(1)
        m = self.leaf(4, 2)

        cases = {
            "add": (lambda: self.weighted_sum(add(a, b)), [a, b]),
            "add scalar": (lambda: self.weighted_sum(add(a, s)), [a, s]),
            "mul": (lambda: self.weighted_sum(mul(a, b)), [a, b]),
            "mul scalar": (lambda: self.weighted_sum(mul(a, s)), [a, s]),
            "relu": (lambda: self.weighted_sum(relu(a)), [a]),
            "sigmoid": (lambda: self.weighted_sum(sigmoid(a)), [a]),
            "tanh": (lambda: self.weighted_sum(tanh(a)), [a]),
            "matmul": (lambda: self.weighted_sum(matmul(a, m)), [a, m]),
            "reshape": (lambda: self.weighted_sum(reshape(a, (2, 6))), [a]),
            "transpose": (lambda: self.weighted_sum(transpose(a, (1, 0))), [a]),
            "take": (lambda: self.weighted_sum(take(a, 1, axis=1)), [a]),
            "stack": (lambda: self.weighted_sum(stack([a, b], axis=1)), [a, b]),
            "concat": (lambda: self.weighted_sum(concat([a, b], axis=0)), [a, b]),
            "mean": (lambda: mean(mul(a, b)), [a, b]),
        }

        for name, (loss_fn, tensors) in cases.items():
            with self.subTest(name):
                for error in gradient_errors(loss_fn, tensors):
                    self.assertLess(error, 1e-3)

class GradTapeTestCase(TestCase):
    """Test cases for the gradient tape."""

    def test_untracked(self):
        """Tests that operators on non-differentiable inputs are not recorded."""

        x = from_data((2,), [1, 2])
        with GradTape() as tape:
            y = tanh(x)

        self.assertEqual(len(tape), 0)
        self.assertFalse(y.requires_grad)

    def test_accumulation(self):
        """Tests that repeated backward passes add into leaf gradients."""

        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with GradTape() as tape:
            loss = sum_all(mul(x, x))

        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, -4.0])

        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, -8.0])

        x.zero_grad()
        self.assertIsNone(x.grad)

    def test_shared_input(self):
        """Tests that a tensor used twice receives both contributions."""

        x = Tensor(np.array([3.0]), requires_grad=True)
        with GradTape() as tape:
            loss = sum_all(add(mul(x, 2.0), tanh(x)))
        tape.backward(loss)

        self.assertAlmostEqual(x.grad[0], 2.0 + 1 - np.tanh(3.0) ** 2, places=12)

    def test_seed(self):
        """Tests the seed argument of GradTape.backward."""

        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with GradTape() as tape:
            loss = sum_all(x)
        tape.backward(loss, seed=0.5)

        np.testing.assert_array_equal(x.grad, [0.5, 0.5])

    def test_non_finite(self):
        """Tests that a non-finite forward result raises."""

        self.assertRaises(NonFiniteError, make_output, "bad", np.array([np.nan]), (),
            lambda upstream: ()
        )
        self.assertRaises(NonFiniteError, mul, from_data((1,), [1e200]), 1e200)

class FiniteDifferenceTestCase(TestCase):
    """Test cases for the finite difference helpers."""

    def test_numeric_gradient(self):
        """Tests the numeric_gradient function."""

        x = Tensor(np.array([1.0, 2.0, 3.0]))
        grad = numeric_gradient(lambda: float((x.data ** 2).sum()), x)

        np.testing.assert_allclose(grad, [2.0, 4.0, 6.0], rtol=1e-8)
        np.testing.assert_array_equal(x.data, [1.0, 2.0, 3.0])

        grad = numeric_gradient(lambda: float((x.data ** 2).sum()), x, indices=[(1,)])
        self.assertEqual(grad[0], 0.0)
        self.assertAlmostEqual(grad[1], 4.0, places=6)

    def test_relative_error(self):
        """Tests the relative_error function."""

        self.assertEqual(relative_error(np.array([1.0]), np.array([1.0])), 0.0)
        self.assertAlmostEqual(relative_error(np.array([1.0]), np.array([2.0])), 0.5)
        self.assertEqual(relative_error(np.zeros(3), np.zeros(3)), 0.0)
        self.assertEqual(relative_error(np.zeros(0), np.zeros(0)), 0.0)

    def test_detects_wrong_backward(self):
        """Tests that gradient_errors flags an operator with an incorrect backward."""

        x = Tensor(np.array([0.5, -1.5]), requires_grad=True)

        def bad_square():
            return sum_all(make_output("bad_square", x.data ** 2, (x,),
                lambda upstream: (upstream[0] * x.data,)
            ))

        (error,) = gradient_errors(bad_square, [x])
        self.assertGreater(error, 0.4)

if __name__ == "__main__":
    main()
