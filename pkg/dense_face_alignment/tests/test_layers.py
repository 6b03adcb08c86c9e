"""
Tests for the convolution kernels and their gradients.
"""

import unittest

import numpy as np

from dense_face_alignment.layers import (
    conv2d,
    conv2d_backward,
    conv_output_size,
    deconv2d,
    deconv2d_backward,
    relu,
    relu_backward,
    softmax2,
)


def naive_conv(x, w, b, stride):
    c_out = w.shape[0]
    _, height, width = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out_h, out_w = conv_output_size(height, stride), conv_output_size(width, stride)
    out = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                window = padded[:, i * stride:i * stride + 3, j * stride:j * stride + 3]
                out[o, i, j] = np.sum(w[o] * window) + b[o]
    return out


def naive_deconv(x, w, b):
    c_out = w.shape[0]
    _, height, width = x.shape
    full = np.zeros((c_out, 2 * height + 2, 2 * width + 2))
    for i in range(height):
        for j in range(width):
            for ky in range(4):
                for kx in range(4):
                    full[:, 2 * i + ky, 2 * j + kx] += w[:, :, ky, kx] @ x[:, i, j]
    return full[:, 1:-1, 1:-1] + b[:, None, None]


def numeric_gradient(fn, array, h=1e-6):
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + h
        plus = fn()
        flat[k] = saved - h
        minus = fn()
        flat[k] = saved
        grad.reshape(-1)[k] = (plus - minus) / (2 * h)
    return grad


class TestConvolution(unittest.TestCase):
    """Test cases for 3x3 convolutions."""

    def setUp(self):
        """Set up test fixtures."""
        rng = np.random.default_rng(0)
        self.x = rng.normal(size=(2, 6, 5))
        self.w = rng.normal(size=(3, 2, 3, 3))
        self.b = rng.normal(size=3)

    def test_matches_direct_sum(self):
        """Test that both strides agree with an explicit window sum."""
        for stride in (1, 2):
            np.testing.assert_allclose(conv2d(self.x, self.w, self.b, stride),
                                       naive_conv(self.x, self.w, self.b, stride), rtol=1e-12, atol=1e-12)

    def test_output_size(self):
        """Test that stride 2 halves sizes rounding up."""
        self.assertEqual(conv2d(self.x, self.w, self.b, 2).shape, (3, 3, 3))
        self.assertEqual(conv_output_size(16, 2), 8)

    def test_gradients(self):
        """Test analytic input, kernel and bias gradients against central differences."""
        for stride in (1, 2):
            dout = np.random.default_rng(stride).normal(size=conv2d(self.x, self.w, self.b, stride).shape)

            def objective():
                return float(np.sum(conv2d(self.x, self.w, self.b, stride) * dout))

            dx, dw, db = conv2d_backward(dout, self.x, self.w, stride)
            np.testing.assert_allclose(dx, numeric_gradient(objective, self.x), rtol=1e-6, atol=1e-7)
            np.testing.assert_allclose(dw, numeric_gradient(objective, self.w), rtol=1e-6, atol=1e-7)
            np.testing.assert_allclose(db, numeric_gradient(objective, self.b), rtol=1e-6, atol=1e-7)


class TestTransposedConvolution(unittest.TestCase):
    """Test cases for 4x4 stride-2 transposed convolutions."""

    def setUp(self):
        """Set up test fixtures."""
        rng = np.random.default_rng(1)
        self.x = rng.normal(size=(3, 4, 3))
        self.w = rng.normal(size=(2, 3, 4, 4))
        self.b = rng.normal(size=2)

    def test_doubles_size(self):
        """Test that the output is exactly twice the input size."""
        self.assertEqual(deconv2d(self.x, self.w, self.b).shape, (2, 8, 6))

    def test_matches_scatter(self):
        """Test against an explicit per-pixel scatter."""
        np.testing.assert_allclose(deconv2d(self.x, self.w, self.b), naive_deconv(self.x, self.w, self.b),
                                   rtol=1e-12, atol=1e-12)

    def test_gradients(self):
        """Test analytic input, kernel and bias gradients against central differences."""
        dout = np.random.default_rng(2).normal(size=(2, 8, 6))

        def objective():
            return float(np.sum(deconv2d(self.x, self.w, self.b) * dout))

        dx, dw, db = deconv2d_backward(dout, self.x, self.w)
        np.testing.assert_allclose(dx, numeric_gradient(objective, self.x), rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(dw, numeric_gradient(objective, self.w), rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(db, numeric_gradient(objective, self.b), rtol=1e-6, atol=1e-7)


class TestActivations(unittest.TestCase):
    """Test cases for ReLU and the two-class softmax."""

    def test_relu(self):
        """Test that ReLU and its gradient gate on the pre-activation sign."""
        pre = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(relu(pre), [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(relu_backward(np.ones(3), pre), [0.0, 0.0, 1.0])

    def test_softmax2(self):
        """Test that the class-1 probability equals the explicit softmax and stays finite."""
        logits = np.array([[[0.3, -800.0]], [[1.1, 800.0]]])
        p = softmax2(logits)
        expected = np.exp(1.1) / (np.exp(0.3) + np.exp(1.1))
        self.assertAlmostEqual(p[0, 0], expected, places=12)
        self.assertEqual(p[0, 1], 1.0)


if __name__ == "__main__":
    unittest.main()
