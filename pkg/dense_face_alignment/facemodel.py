"""
Linear morphable face model: shape synthesis and perspective projection.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, NamedTuple, Tuple

import numpy as np

from dense_face_alignment.landmarks import LANDMARKS_21

logger = logging.getLogger(__name__)

# Tolerance for det(R) = 1 and R^T R = I
ROTATION_TOLERANCE = 1e-9

# Minimum |cos(pitch)| before the Euler decomposition is declared degenerate
GIMBAL_GUARD = np.sin(1e-6)

Shape3D = np.ndarray
"""(V, 3) array of vertex positions in model units."""


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """
    Mean shape plus identity and expression bases.

    Attributes:
        mean_shape: (3V,) vertex coordinates, x0 y0 z0 x1 ...
        identity_basis: (3V, K_id) matrix A_id
        expression_basis: (3V, K_exp) matrix A_exp
        sigma_id: (K_id,) standard deviation per identity column
        sigma_exp: (K_exp,) standard deviation per expression column
        triangles: (T, 3) vertex indices
        uv_coords: (V, 2) surface parameterization in [0, 1]^2
        landmark_indices: landmark name -> vertex index
    """

    mean_shape: np.ndarray
    identity_basis: np.ndarray
    expression_basis: np.ndarray
    sigma_id: np.ndarray
    sigma_exp: np.ndarray
    triangles: np.ndarray
    uv_coords: np.ndarray
    landmark_indices: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "mean_shape", np.array(self.mean_shape, dtype=np.float64).reshape(-1))
        n = self.mean_shape.size
        object.__setattr__(
            self, "identity_basis", np.array(self.identity_basis, dtype=np.float64).reshape(n, -1)
        )
        object.__setattr__(
            self, "expression_basis", np.array(self.expression_basis, dtype=np.float64).reshape(n, -1)
        )
        object.__setattr__(self, "sigma_id", np.array(self.sigma_id, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "sigma_exp", np.array(self.sigma_exp, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "triangles", np.array(self.triangles, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "uv_coords", np.array(self.uv_coords, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(
            self, "landmark_indices", {str(k): int(v) for k, v in self.landmark_indices.items()}
        )
        for array in (self.mean_shape, self.identity_basis, self.expression_basis,
                      self.sigma_id, self.sigma_exp, self.uv_coords):
            array.setflags(write=False)
        self.triangles.setflags(write=False)
        self.validate()

    def validate(self) -> None:
        """
        Check the structural invariants of the model.

        Raises:
            ValueError: If any invariant is violated
        """
        if self.mean_shape.size % 3 != 0:
            raise ValueError(f"mean_shape length {self.mean_shape.size} is not a multiple of 3")
        v = self.num_vertices
        if v < 3:
            raise ValueError(f"model needs at least 3 vertices, got {v}")
        if self.identity_basis.shape[1] != self.sigma_id.size:
            raise ValueError(
                f"identity basis has {self.identity_basis.shape[1]} columns but "
                f"{self.sigma_id.size} sigmas"
            )
        if self.expression_basis.shape[1] != self.sigma_exp.size:
            raise ValueError(
                f"expression basis has {self.expression_basis.shape[1]} columns but "
                f"{self.sigma_exp.size} sigmas"
            )
        for name, basis in (("identity", self.identity_basis), ("expression", self.expression_basis)):
            if not np.all(np.isfinite(basis)):
                raise ValueError(f"{name} basis contains non-finite entries")
        if not np.all(np.isfinite(self.mean_shape)):
            raise ValueError("mean_shape contains non-finite entries")
        if np.any(self.sigma_id <= 0) or np.any(self.sigma_exp <= 0):
            raise ValueError("all sigma values must be positive")
        if self.uv_coords.shape[0] != v:
            raise ValueError(f"uv_coords has {self.uv_coords.shape[0]} rows, expected {v}")
        if np.any(self.uv_coords < 0.0) or np.any(self.uv_coords > 1.0):
            raise ValueError("uv coordinates must lie in [0, 1]^2")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= v):
            raise ValueError("triangle index out of range")
        missing = [name for name in LANDMARKS_21 if name not in self.landmark_indices]
        if missing:
            raise ValueError(f"landmark table lacks required landmarks: {', '.join(missing)}")
        bad = [name for name, idx in self.landmark_indices.items() if not 0 <= idx < v]
        if bad:
            raise ValueError(f"landmark vertex index out of range for: {', '.join(bad)}")

    @property
    def num_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def num_identity(self) -> int:
        return self.identity_basis.shape[1]

    @property
    def num_expression(self) -> int:
        return self.expression_basis.shape[1]

    @cached_property
    def fingerprint(self) -> str:
        """Content hash used to key render caches."""
        digest = hashlib.sha1()
        for array in (self.mean_shape, self.identity_basis, self.expression_basis,
                      self.sigma_id, self.sigma_exp, self.triangles, self.uv_coords):
            digest.update(np.ascontiguousarray(array).tobytes())
        for name in sorted(self.landmark_indices):
            digest.update(f"{name}={self.landmark_indices[name]};".encode("utf-8"))
        return digest.hexdigest()

    def zero_coefficients(self) -> "ShapeCoefficients":
        return ShapeCoefficients(np.zeros(self.num_identity), np.zeros(self.num_expression))

    def mean_vertices(self) -> Shape3D:
        return self.mean_shape.reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class ShapeCoefficients:
    """Identity and expression coefficients (alpha_id, alpha_exp)."""

    alpha_id: np.ndarray
    alpha_exp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha_id", np.asarray(self.alpha_id, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "alpha_exp", np.asarray(self.alpha_exp, dtype=np.float64).reshape(-1))


class EulerAngles(NamedTuple):
    """Yaw / pitch / roll in radians, with a flag for gimbal-locked decompositions."""

    yaw: float
    pitch: float
    roll: float
    degenerate: bool = False


def euler_to_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """
    Build R = Ry(yaw) @ Rx(pitch) @ Rz(roll).

    Positive yaw turns the face so that its left side (model +x) moves toward the camera;
    (pi/2, 0, 0) maps +z onto +x.

    Args:
        yaw: Rotation about the vertical axis in radians
        pitch: Rotation about the horizontal axis in radians
        roll: Rotation about the optical axis in radians

    Returns:
        3x3 rotation matrix
    """
    if not all(np.isfinite([yaw, pitch, roll])):
        raise ValueError("Euler angles must be finite")
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


def rotation_to_euler(rotation: np.ndarray) -> EulerAngles:
    """
    Decompose a rotation built by euler_to_rotation.

    Near pitch = +-pi/2 the decomposition is flagged degenerate and roll is set to 0.
    """
    r = np.asarray(rotation, dtype=np.float64)
    pitch = float(np.arcsin(np.clip(-r[1, 2], -1.0, 1.0)))
    cos_pitch = np.hypot(r[0, 2], r[2, 2])
    if cos_pitch < GIMBAL_GUARD:
        yaw = float(np.arctan2(-r[2, 0], r[0, 0]))
        return EulerAngles(yaw, pitch, 0.0, True)
    yaw = float(np.arctan2(r[0, 2], r[2, 2]))
    roll = float(np.arctan2(r[1, 0], r[1, 1]))
    return EulerAngles(yaw, pitch, roll, False)


def check_rotation(rotation: np.ndarray, tolerance: float = ROTATION_TOLERANCE) -> None:
    """
    Raises:
        ValueError: If the matrix is not a proper rotation within tolerance
    """
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(r.T @ r - np.eye(3))) > tolerance:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tolerance:
        raise ValueError("rotation determinant is not +1")


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Closest proper rotation in the Frobenius sense."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True, eq=False)
class CameraPose:
    """
    Pinhole camera pose: focal length in pixels, rotation R and translation t.

    A model point v maps to camera space as R @ v + t; the camera looks down +z.
    """

    f: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "f", float(self.f))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        check_rotation(self.rotation)

    @classmethod
    def from_euler(cls, f: float, yaw: float, pitch: float, roll: float, translation) -> "CameraPose":
        return cls(f, euler_to_rotation(yaw, pitch, roll), translation)

    @property
    def euler(self) -> EulerAngles:
        return rotation_to_euler(self.rotation)

    @property
    def yaw(self) -> float:
        return self.euler.yaw

    @property
    def pitch(self) -> float:
        return self.euler.pitch

    @property
    def roll(self) -> float:
        return self.euler.roll


class Projection(NamedTuple):
    """Projected points (V, 2) with NaN rows where valid is False, and camera-space depth."""

    points: np.ndarray
    valid: np.ndarray
    depth: np.ndarray


def synthesize_shape(model: MorphableModel, coeffs: ShapeCoefficients) -> Shape3D:
    """
    Evaluate S = S_mean + A_id @ alpha_id + A_exp @ alpha_exp.

    Args:
        model: Morphable model
        coeffs: Coefficients whose lengths match the basis ranks

    Returns:
        (V, 3) vertex array

    Raises:
        ValueError: If the coefficient lengths do not match the model
    """
    if coeffs.alpha_id.size != model.num_identity:
        raise ValueError(
            f"alpha_id has length {coeffs.alpha_id.size}, model has {model.num_identity} identity columns"
        )
    if coeffs.alpha_exp.size != model.num_expression:
        raise ValueError(
            f"alpha_exp has length {coeffs.alpha_exp.size}, model has {model.num_expression} expression columns"
        )
    shape = model.mean_shape + model.identity_basis @ coeffs.alpha_id + model.expression_basis @ coeffs.alpha_exp
    return shape.reshape(-1, 3)


def transform_points(shape: Shape3D, pose: CameraPose) -> np.ndarray:
    """Camera-space positions R @ v + t for every vertex."""
    return np.asarray(shape, dtype=np.float64) @ pose.rotation.T + pose.translation


def project(shape: Shape3D, pose: CameraPose, image_size: Tuple[int, int]) -> Projection:
    """
    Perspective projection with the principal point at the image centre.

    Args:
        shape: (V, 3) vertices
        pose: Camera pose
        image_size: (W, H) in pixels

    Returns:
        Projection with pixel coordinates (x, y); vertices with camera z <= 0 are flagged
        invalid and carry NaN coordinates.
    """
    if not pose.f > 0:
        raise ValueError(f"focal length must be positive, got {pose.f}")
    check_rotation(pose.rotation)
    width, height = image_size
    cam = transform_points(shape, pose)
    depth = cam[:, 2]
    valid = depth > 0
    points = np.full((cam.shape[0], 2), np.nan)
    z = depth[valid]
    points[valid, 0] = pose.f * cam[valid, 0] / z + width / 2.0
    points[valid, 1] = pose.f * cam[valid, 1] / z + height / 2.0
    if not np.all(valid):
        logger.debug(f"{int(np.sum(~valid))} vertices behind the camera")
    return Projection(points, valid, depth)


def frontal_pose(model: MorphableModel, image_size: Tuple[int, int], fraction: float) -> CameraPose:
    """
    Identity rotation, focal length W, mean shape centred in the image and spanning ``fraction``
    of the image height.
    """
    width, height = image_size
    vertices = model.mean_vertices()
    f = float(width)
    low, high = int(np.argmin(vertices[:, 1])), int(np.argmax(vertices[:, 1]))
    span = vertices[high, 1] - vertices[low, 1]
    reference_z = 0.5 * (vertices[low, 2] + vertices[high, 2])
    t_z = f * span / (fraction * height) - reference_z
    x_mid = 0.5 * (vertices[:, 0].min() + vertices[:, 0].max())
    y_mid = 0.5 * (vertices[low, 1] + vertices[high, 1])
    return CameraPose(f, np.eye(3), np.array([-x_mid, -y_mid, t_z]))
