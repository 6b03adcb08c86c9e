"""
Tests for the morphable model, rotations and projection.
"""

import math
import unittest

import numpy as np

from dense_face_alignment.facemodel import (
    CameraPose,
    ShapeCoefficients,
    euler_to_rotation,
    frontal_pose,
    orthonormalize,
    project,
    rotation_to_euler,
    synthesize_shape,
    transform_points,
)
from dense_face_alignment.tests.fixtures import default_model, tiny_model


class TestShapeSynthesis(unittest.TestCase):
    """Test cases for synthesize_shape."""

    def setUp(self):
        """Set up test fixtures."""
        self.model = tiny_model()

    def test_zero_coefficients_give_mean_shape(self):
        """Test that zero coefficients reproduce the mean shape exactly."""
        shape = synthesize_shape(self.model, self.model.zero_coefficients())
        np.testing.assert_array_equal(shape, self.model.mean_vertices())

    def test_shape_is_linear_in_coefficients(self):
        """Test that the shape offset doubles when the coefficients double."""
        coeffs = ShapeCoefficients([0.1, -0.2], [0.05, 0.0])
        doubled = ShapeCoefficients(2 * coeffs.alpha_id, 2 * coeffs.alpha_exp)
        mean = self.model.mean_vertices()
        offset = synthesize_shape(self.model, coeffs) - mean
        np.testing.assert_allclose(synthesize_shape(self.model, doubled) - mean, 2 * offset, atol=1e-12)

    def test_wrong_coefficient_length(self):
        """Test that a coefficient vector of the wrong length is rejected."""
        with self.assertRaises(ValueError):
            synthesize_shape(self.model, ShapeCoefficients([0.1], [0.0, 0.0]))

    def test_model_arrays_are_read_only(self):
        """Test that the model cannot be mutated through its arrays."""
        with self.assertRaises(ValueError):
            self.model.mean_shape[0] = 1.0


class TestRotations(unittest.TestCase):
    """Test cases for the Euler convention."""

    def test_round_trip(self):
        """Test that decomposing a built rotation returns the angles."""
        euler = rotation_to_euler(euler_to_rotation(0.3, -0.2, 0.1))
        self.assertAlmostEqual(euler.yaw, 0.3, places=12)
        self.assertAlmostEqual(euler.pitch, -0.2, places=12)
        self.assertAlmostEqual(euler.roll, 0.1, places=12)
        self.assertFalse(euler.degenerate)

    def test_quarter_yaw_maps_z_to_x(self):
        """Test that a yaw of pi/2 maps +z onto +x."""
        rotated = euler_to_rotation(np.pi / 2, 0.0, 0.0) @ np.array([0.0, 0.0, 1.0])
        np.testing.assert_allclose(rotated, [1.0, 0.0, 0.0], atol=1e-12)

    def test_gimbal_lock_is_flagged(self):
        """Test that a pitch of pi/2 is reported as degenerate with zero roll."""
        euler = rotation_to_euler(euler_to_rotation(0.4, np.pi / 2, 0.2))
        self.assertTrue(euler.degenerate)
        self.assertEqual(euler.roll, 0.0)

    def test_orthonormalize_repairs_drift(self):
        """Test that a perturbed rotation is projected back to a proper rotation."""
        r = euler_to_rotation(0.2, 0.1, -0.3) + 1e-6
        fixed = orthonormalize(r)
        np.testing.assert_allclose(fixed.T @ fixed, np.eye(3), atol=1e-12)
        self.assertAlmostEqual(np.linalg.det(fixed), 1.0, places=12)


class TestCameraPose(unittest.TestCase):
    """Test cases for CameraPose validation."""

    def test_non_positive_focal_length(self):
        """Test that f <= 0 is rejected."""
        with self.assertRaises(ValueError):
            CameraPose(0.0, np.eye(3), np.zeros(3))

    def test_reflection_is_rejected(self):
        """Test that a matrix with determinant -1 is rejected."""
        with self.assertRaises(ValueError):
            CameraPose(100.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_euler_view(self):
        """Test that the Euler view of a pose matches its construction angles."""
        pose = CameraPose.from_euler(100.0, 0.5, 0.1, -0.2, [0.0, 0.0, 5.0])
        self.assertAlmostEqual(pose.yaw, 0.5, places=12)
        self.assertAlmostEqual(pose.pitch, 0.1, places=12)
        self.assertAlmostEqual(pose.roll, -0.2, places=12)


class TestProjection(unittest.TestCase):
    """Test cases for perspective projection."""

    def test_optical_axis_hits_principal_point(self):
        """Test that a point on the optical axis projects to the image centre."""
        pose = CameraPose(80.0, np.eye(3), [0.0, 0.0, 4.0])
        projection = project(np.array([[0.0, 0.0, 1.0]]), pose, (64, 48))
        np.testing.assert_allclose(projection.points[0], [32.0, 24.0])
        self.assertTrue(projection.valid[0])
        self.assertAlmostEqual(projection.depth[0], 5.0)

    def test_pinhole_formula(self):
        """Test x = f X / Z + W/2 and y = f Y / Z + H/2."""
        pose = CameraPose(50.0, np.eye(3), [0.0, 0.0, 0.0])
        projection = project(np.array([[1.0, -2.0, 10.0]]), pose, (40, 40))
        np.testing.assert_allclose(projection.points[0], [25.0, 10.0])

    def test_composition_matches_reference_projector(self):
        """Test that projecting under composed poses equals applying them in turn and a per-point pinhole."""
        rng = np.random.default_rng(6)
        vertices = rng.normal(size=(30, 3))
        first = CameraPose.from_euler(70.0, 0.4, -0.2, 0.1, [0.2, -0.1, 1.0])
        second = CameraPose.from_euler(70.0, -0.3, 0.25, -0.15, [0.1, 0.3, 8.0])
        composed = CameraPose(70.0, second.rotation @ first.rotation,
                              second.rotation @ first.translation + second.translation)
        direct = project(vertices, composed, (64, 48))
        in_turn = project(transform_points(vertices, first), second, (64, 48))
        np.testing.assert_array_equal(direct.valid, in_turn.valid)
        np.testing.assert_allclose(direct.points, in_turn.points, rtol=1e-12, atol=1e-9)

        def rotate(v, yaw, pitch, roll):
            x, y, z = v
            x, y = x * math.cos(roll) - y * math.sin(roll), x * math.sin(roll) + y * math.cos(roll)
            y, z = y * math.cos(pitch) - z * math.sin(pitch), y * math.sin(pitch) + z * math.cos(pitch)
            x, z = x * math.cos(yaw) + z * math.sin(yaw), -x * math.sin(yaw) + z * math.cos(yaw)
            return x, y, z

        for v, point in zip(vertices, direct.points):
            x, y, z = rotate(v, 0.4, -0.2, 0.1)
            x, y, z = rotate((x + 0.2, y - 0.1, z + 1.0), -0.3, 0.25, -0.15)
            x, y, z = x + 0.1, y + 0.3, z + 8.0
            self.assertGreater(z, 0.0)
            self.assertAlmostEqual(point[0], 70.0 * x / z + 32.0, places=9)
            self.assertAlmostEqual(point[1], 70.0 * y / z + 24.0, places=9)

    def test_points_behind_camera_are_invalid(self):
        """Test that points with z <= 0 are flagged and carry NaN coordinates."""
        pose = CameraPose(50.0, np.eye(3), [0.0, 0.0, 0.0])
        projection = project(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), pose, (32, 32))
        np.testing.assert_array_equal(projection.valid, [False, False, True])
        self.assertTrue(np.all(np.isnan(projection.points[:2])))

    def test_transform_points(self):
        """Test that camera-space positions are R v + t."""
        pose = CameraPose.from_euler(10.0, 0.3, 0.0, 0.0, [1.0, 2.0, 3.0])
        v = np.array([[0.5, -0.5, 0.25]])
        np.testing.assert_allclose(transform_points(v, pose)[0], pose.rotation @ v[0] + pose.translation)


class TestFrontalPose(unittest.TestCase):
    """Test cases for the canonical frontal framing."""

    def test_frontal_pose_frames_the_mean_face(self):
        """Test that the frontal pose keeps the whole mean face in front of the camera and in view."""
        model = default_model()
        pose = frontal_pose(model, (64, 64), 0.6)
        np.testing.assert_array_equal(pose.rotation, np.eye(3))
        self.assertEqual(pose.f, 64.0)
        projection = project(model.mean_vertices(), pose, (64, 64))
        self.assertTrue(np.all(projection.valid))
        self.assertTrue(np.all(projection.points >= 0.0))
        self.assertTrue(np.all(projection.points <= 63.0))


if __name__ == "__main__":
    unittest.main()
