"""
Tests for the correspondence network: shapes, loss, gradients and weight files.
"""

import os
import tempfile
import unittest

import numpy as np

from dense_face_alignment.errors import ConfigError, DataError, NumericalFault
from dense_face_alignment.flownet import (
    NetworkSpec,
    Weights,
    backward,
    forward,
    loss,
    loss_and_gradient,
    parameter_count,
    predict,
    read_weights,
    write_weights,
)
from dense_face_alignment.tests.fixtures import tiny_model

SMALL = NetworkSpec(input_size=(16, 16), base_channels=2)


def random_example(spec: NetworkSpec, seed: int = 0):
    rng = np.random.default_rng(seed)
    width, height = spec.input_size
    source = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    target = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    gt_flow = rng.normal(scale=2.0, size=(height, width, 2))
    gt_mask = (rng.random((height, width)) > 0.4).astype(np.float64)
    return source, target, gt_flow, gt_mask


class TestForward(unittest.TestCase):
    """Test cases for the forward pass."""

    def setUp(self):
        """Set up test fixtures."""
        self.weights = Weights.initialize(SMALL, seed=3)
        self.source, self.target, _, _ = random_example(SMALL)

    def test_output_shapes(self):
        """Test that flow and matchability come out at the input resolution."""
        flow, match, _ = forward(self.weights, self.source, self.target)
        self.assertEqual(flow.shape, (16, 16, 2))
        self.assertEqual(match.shape, (16, 16))
        self.assertTrue(np.all((match >= 0.0) & (match <= 1.0)))

    def test_wrong_image_size(self):
        """Test that an image of the wrong size is rejected."""
        with self.assertRaises(ValueError):
            forward(self.weights, self.source[:8], self.target)

    def test_unshared_copy_computes_the_same(self):
        """Test that duplicating a shared encoder leaves the outputs unchanged."""
        unshared = self.weights.unshared()
        self.assertFalse(unshared.spec.share_encoders)
        self.assertGreater(parameter_count(unshared.spec), parameter_count(SMALL))
        flow_a, match_a, _ = forward(self.weights, self.source, self.target)
        flow_b, match_b, _ = forward(unshared, self.source, self.target)
        np.testing.assert_array_equal(flow_a, flow_b)
        np.testing.assert_array_equal(match_a, match_b)

    def test_non_finite_activation_names_layer(self):
        """Test that a NaN weight is reported with the first layer it poisons."""
        broken = self.weights.copy()
        broken.param("enc.0.w")[0, 0, 0, 0] = np.nan
        with self.assertRaises(NumericalFault) as ctx:
            forward(broken, self.source, self.target)
        self.assertIn("enc.0", str(ctx.exception))

    def test_backward_needs_cache(self):
        """Test that backward without a forward cache is a numerical fault."""
        with self.assertRaises(NumericalFault):
            backward(None, np.zeros((16, 16, 2)), np.zeros((16, 16)))

    def test_predict_against_template(self):
        """Test that prediction runs against the model template and records its time."""
        spec = NetworkSpec(input_size=(32, 32), base_channels=1, share_encoders=False)
        weights = Weights.initialize(spec, seed=0)
        image = np.full((32, 32, 3), 128, dtype=np.uint8)
        timings = []
        flow, match = predict(weights, image, tiny_model(), timings)
        self.assertEqual(flow.shape, (32, 32, 2))
        self.assertEqual(match.shape, (32, 32))
        self.assertEqual(len(timings), 1)


class TestLoss(unittest.TestCase):
    """Test cases for the training loss."""

    def test_matches_scalar_reference(self):
        """Test the loss against a per-pixel reference computation."""
        rng = np.random.default_rng(8)
        pred_flow = rng.normal(size=(3, 4, 2))
        gt_flow = rng.normal(size=(3, 4, 2))
        pred_match = rng.random((3, 4))
        gt_mask = (rng.random((3, 4)) > 0.5).astype(np.float64)
        flow_term = 0.0
        match_term = 0.0
        for y in range(3):
            for x in range(4):
                m = gt_mask[y, x]
                p = pred_match[y, x]
                du, dv = pred_flow[y, x] - gt_flow[y, x]
                flow_term += m * (du * du + dv * dv)
                match_term -= m * np.log(p) + (1 - m) * np.log(1 - p)
        result = loss(pred_flow, pred_match, gt_flow, gt_mask, lam=0.5)
        self.assertAlmostEqual(result.flow_term, flow_term, places=10)
        self.assertAlmostEqual(result.match_term, match_term, places=10)
        self.assertAlmostEqual(result.total, flow_term + 0.5 * match_term, places=10)

    def test_clamped_matchability(self):
        """Test that certain but wrong matchability gives a large finite loss."""
        result = loss(np.zeros((1, 1, 2)), np.array([[0.0]]), np.zeros((1, 1, 2)), np.array([[1.0]]))
        self.assertAlmostEqual(result.match_term, -np.log(1e-7), places=6)

    def test_rejects_bad_inputs(self):
        """Test that a soft mask, mismatched planes and NaN matchability are rejected."""
        flow = np.zeros((2, 2, 2))
        with self.assertRaises(ValueError):
            loss(flow, np.full((2, 2), 0.5), flow, np.full((2, 2), 0.5))
        with self.assertRaises(ValueError):
            loss(flow, np.full((2, 3), 0.5), flow, np.ones((2, 2)))
        with self.assertRaises(NumericalFault):
            loss(flow, np.full((2, 2), np.nan), flow, np.ones((2, 2)))

    def test_normalized_loss(self):
        """Test that normalization divides both terms by the pixel count."""
        rng = np.random.default_rng(9)
        args = (rng.normal(size=(4, 4, 2)), rng.random((4, 4)), rng.normal(size=(4, 4, 2)), np.ones((4, 4)))
        plain = loss(*args)
        normalized = loss(*args, normalize=True)
        self.assertAlmostEqual(normalized.flow_term * 16, plain.flow_term, places=9)
        self.assertAlmostEqual(normalized.match_term * 16, plain.match_term, places=9)


class TestGradients(unittest.TestCase):
    """Test cases for analytic parameter gradients."""

    def setUp(self):
        """Set up test fixtures."""
        self.weights = Weights.initialize(SMALL, seed=1)
        self.example = random_example(SMALL, seed=2)

    def total(self, weights: Weights, lam: float = 1.0) -> float:
        flow, match, _ = forward(weights, self.example[0], self.example[1])
        return loss(flow, match, self.example[2], self.example[3], lam).total

    def test_finite_differences(self):
        """Test selected parameters of every head against central differences."""
        _, grad = loss_and_gradient(self.weights, *self.example)
        names = ["enc.0.w", "enc.3.w", "enc.7.b", "flow.0a.w", "flow.1b.w", "flow.2up.w",
                 "flow.out2.w", "flow.out2.b", "match.0a.w", "match.3up.w", "match.out.w", "match.out.b"]
        h = 1e-6
        for name in names:
            offset, _ = self.weights.layout[name]
            perturbed = self.weights.copy()
            saved = perturbed.vector[offset]
            perturbed.vector[offset] = saved + h
            plus = self.total(perturbed)
            perturbed.vector[offset] = saved - h
            minus = self.total(perturbed)
            numeric = (plus - minus) / (2 * h)
            self.assertTrue(np.isclose(grad[offset], numeric, rtol=1e-4, atol=1e-5),
                            f"{name}: analytic {grad[offset]} vs numeric {numeric}")

    def test_match_gradient_scales_with_lambda(self):
        """Test that doubling lambda exactly doubles the matchability-head gradient."""
        _, grad_one = loss_and_gradient(self.weights, *self.example, lam=1.0)
        _, grad_two = loss_and_gradient(self.weights, *self.example, lam=2.0)
        for name, (offset, shape) in self.weights.layout.items():
            if name.startswith("match."):
                size = int(np.prod(shape))
                np.testing.assert_array_equal(grad_two[offset:offset + size], 2.0 * grad_one[offset:offset + size])

    def test_flow_head_ignores_lambda(self):
        """Test that lambda leaves the flow-head gradient untouched."""
        _, grad_one = loss_and_gradient(self.weights, *self.example, lam=1.0)
        _, grad_two = loss_and_gradient(self.weights, *self.example, lam=3.0)
        offset, shape = self.weights.layout["flow.out2.w"]
        size = int(np.prod(shape))
        np.testing.assert_array_equal(grad_one[offset:offset + size], grad_two[offset:offset + size])


class TestNetworkSpec(unittest.TestCase):
    """Test cases for network settings."""

    def test_from_dict(self):
        """Test that a scalar input size expands to a square."""
        spec = NetworkSpec.from_dict({"input_size": 32, "base_channels": 4})
        self.assertEqual(spec.input_size, (32, 32))
        self.assertEqual(NetworkSpec.from_dict(spec.to_dict()), spec)

    def test_rejects_invalid(self):
        """Test that sizes off the multiple of 16 and unknown keys are rejected."""
        with self.assertRaises(ConfigError):
            NetworkSpec.from_dict({"input_size": 24})
        with self.assertRaises(ConfigError):
            NetworkSpec.from_dict({"depth": 3})
        with self.assertRaises(ConfigError):
            NetworkSpec.from_dict({"base_channels": 0})


class TestWeightFiles(unittest.TestCase):
    """Test cases for DCWT weight files."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "weights.dcwt")
        self.weights = Weights.initialize(SMALL, seed=4)

    def tearDown(self):
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def test_readback(self):
        """Test that weights read back at float32 precision with their spec."""
        write_weights(self.path, self.weights)
        loaded = read_weights(self.path)
        self.assertEqual(loaded.spec, SMALL)
        np.testing.assert_array_equal(loaded.vector, self.weights.vector.astype(np.float32).astype(np.float64))

    def test_corrupt_files(self):
        """Test that truncated, short and missing files are data errors."""
        write_weights(self.path, self.weights)
        with open(self.path, "rb") as f:
            payload = f.read()
        for cut in (2, 4):
            with open(self.path, "wb") as f:
                f.write(payload[:-cut])
            with self.assertRaises(DataError):
                read_weights(self.path)
        with self.assertRaises(DataError):
            read_weights(os.path.join(self.tmp.name, "absent.dcwt"))

    def test_wrong_vector_size(self):
        """Test that a parameter vector of the wrong length is rejected."""
        with self.assertRaises(ValueError):
            Weights(SMALL, np.zeros(parameter_count(SMALL) + 1))


if __name__ == "__main__":
    unittest.main()
