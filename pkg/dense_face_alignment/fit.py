"""
Morphable-model alignment from dense correspondences.

Predicted flow to the frontal template is turned into 2D-3D correspondences, and camera pose,
focal length, identity and expression coefficients are fitted by block-alternating damped
Gauss-Newton on

    E = sum_i w_i |p_i - proj(R S_qi + t)|^2 + w_id sum (a_id / s_id)^2 + w_exp sum (a_exp / s_exp)^2

The pose step can carry the coefficients along (a joint step with the exact Jacobian), and the
coefficient blocks hold each point's depth fixed at the current iterate.
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from dense_face_alignment.datagen import compute_gt_correspondence
from dense_face_alignment.errors import ConfigError, DataError
from dense_face_alignment.facemodel import (
    CameraPose,
    MorphableModel,
    ShapeCoefficients,
    frontal_pose,
    orthonormalize,
)
from dense_face_alignment.raster import (
    ProjectedLandmark,
    RenderedFace,
    project_landmarks,
    rasterize_attributes,
    render_target_template,
)

logger = logging.getLogger(__name__)

POSE_BLOCK = "pose"
IDENTITY_BLOCK = "identity"
EXPRESSION_BLOCK = "expression"
JOINT_BLOCK = "joint"
PARAMETER_BLOCKS = (POSE_BLOCK, IDENTITY_BLOCK, EXPRESSION_BLOCK)
POSE_SIZE = 7

MIN_CORRESPONDENCES = 6
MAX_ATTEMPTS = 10


@dataclass(frozen=True, eq=False)
class FitParameters:
    """The fitted state: camera pose (f, R, t) and shape coefficients."""

    pose: CameraPose
    coeffs: ShapeCoefficients

    @property
    def f(self) -> float:
        return self.pose.f

    @property
    def rotation(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def translation(self) -> np.ndarray:
        return self.pose.translation

    def to_dict(self) -> Dict[str, Any]:
        euler = self.pose.euler
        return {
            "f": float(self.f),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "yaw": float(euler.yaw),
            "pitch": float(euler.pitch),
            "roll": float(euler.roll),
            "alpha_id": self.coeffs.alpha_id.tolist(),
            "alpha_exp": self.coeffs.alpha_exp.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FitParameters":
        if "rotation" in data:
            rotation = np.asarray(data["rotation"], dtype=np.float64)
        else:
            rotation = CameraPose.from_euler(1.0, data["yaw"], data["pitch"], data["roll"], np.zeros(3)).rotation
        pose = CameraPose(data["f"], rotation, data["translation"])
        return cls(pose, ShapeCoefficients(data["alpha_id"], data["alpha_exp"]))


def initial_parameters(model: MorphableModel, image_size: Tuple[int, int], fraction: float = 0.6) -> FitParameters:
    """Frontal mean face, f = image width, spanning ``fraction`` of the image height."""
    return FitParameters(frontal_pose(model, image_size, fraction), model.zero_coefficients())


def write_parameters(path: str, params: FitParameters) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(params.to_dict(), f, indent=1)


def read_parameters(path: str) -> FitParameters:
    """
    Raises:
        DataError: If the file is missing or invalid
    """
    if not os.path.exists(path):
        raise DataError(f"Fit parameter file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return FitParameters.from_dict(json.load(f))
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"Invalid fit parameters in {path}: {str(e)}")


@dataclass(eq=False)
class CorrespondenceSet:
    """
    2D-3D correspondences: source pixels, model vertex indices and non-negative weights.

    Attributes:
        points: (N, 2) pixel positions
        vertices: (N,) vertex indices
        weights: (N,) weights
        image_size: (W, H) of the source image
        dropped: endpoints discarded because they missed the template face
    """

    points: np.ndarray
    vertices: np.ndarray
    weights: np.ndarray
    image_size: Tuple[int, int]
    dropped: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.vertices = np.asarray(self.vertices, dtype=np.int64).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        n = self.points.shape[0]
        if self.vertices.size != n or self.weights.size != n:
            raise ValueError(
                f"correspondence arrays disagree: {n} points, {self.vertices.size} vertices, {self.weights.size} weights"
            )
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("correspondence weights must be finite and non-negative")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("correspondence points must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_weights(self, weights: np.ndarray) -> "CorrespondenceSet":
        return CorrespondenceSet(self.points, self.vertices, weights, self.image_size, self.dropped)

    def write_text(self, path: str) -> None:
        """One ``px py q w`` line per correspondence after a ``# W H`` header."""
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# {self.image_size[0]} {self.image_size[1]}\n")
            for (x, y), q, w in zip(self.points, self.vertices, self.weights):
                f.write(f"{x:.6f} {y:.6f} {q} {w:.9g}\n")

    @classmethod
    def read_text(cls, path: str) -> "CorrespondenceSet":
        """
        Raises:
            DataError: If the file is missing or malformed
        """
        if not os.path.exists(path):
            raise DataError(f"Correspondence file not found: {path}")
        image_size = (0, 0)
        rows = []
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, 1):
                parts = line.split()
                if not parts:
                    continue
                try:
                    if parts[0] == "#":
                        image_size = (int(parts[1]), int(parts[2]))
                    else:
                        rows.append((float(parts[0]), float(parts[1]), int(parts[2]), float(parts[3])))
                except (ValueError, IndexError):
                    raise DataError(f"Malformed correspondence line {line_number} in {path}: {line.strip()}")
        data = np.array(rows, dtype=np.float64).reshape(-1, 4)
        return cls(data[:, :2], data[:, 2].astype(np.int64), data[:, 3], image_size)


def flow_to_correspondences(flow: np.ndarray, match: np.ndarray, template: RenderedFace, model: MorphableModel,
                            match_threshold: float = 0.5, stride: int = 2) -> CorrespondenceSet:
    """
    Keep source pixels (on a ``stride`` grid) with matchability >= threshold whose rounded flow
    endpoint lands on the template face, and pair each with the dominant barycentric vertex of
    the template pixel it hits.

    Raises:
        ValueError: If the planes do not share the template resolution
        DataError: If no usable correspondence remains
    """
    width, height = template.image_size
    if flow.shape != (height, width, 2) or match.shape != (height, width):
        raise ValueError(f"flow {flow.shape} / match {match.shape} do not match template size {width}x{height}")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    rows, cols = np.mgrid[0:height:stride, 0:width:stride]
    rows, cols = rows.reshape(-1), cols.reshape(-1)
    confident = match[rows, cols] >= match_threshold
    rows, cols = rows[confident], cols[confident]
    end_x = np.rint(cols + flow[rows, cols, 0].astype(np.float64)).astype(np.int64)
    end_y = np.rint(rows + flow[rows, cols, 1].astype(np.float64)).astype(np.int64)
    inside = (end_x >= 0) & (end_x < width) & (end_y >= 0) & (end_y < height)
    hits = np.zeros_like(inside)
    hits[inside] = template.face_mask[end_y[inside], end_x[inside]]
    dropped = int(np.sum(~hits))
    rows, cols, end_x, end_y = rows[hits], cols[hits], end_x[hits], end_y[hits]
    if rows.size == 0:
        raise DataError(f"No usable correspondences ({dropped} endpoints missed the template face)")
    triangles = template.triangle_index[end_y, end_x]
    corners = np.argmax(template.barycentric[end_y, end_x], axis=1)
    vertices = model.triangles[triangles, corners]
    if dropped:
        logger.debug(f"Dropped {dropped} correspondences whose endpoints missed the template face")
    return CorrespondenceSet(
        points=np.stack([cols, rows], axis=1),
        vertices=vertices,
        weights=match[rows, cols].astype(np.float64),
        image_size=(width, height),
        dropped=dropped,
    )


@dataclass
class SolverOptions:
    """Solver settings (config section ``fit``)."""

    max_iters: int = 50
    w_id: float = 2.5e-5
    w_exp: float = 1000.0
    f_min: float = 50.0
    f_max: float = 5000.0
    initial_damping: float = 1e-3
    rel_tol: float = 1e-8
    step_tol: float = 1e-10
    max_escalations: int = 5
    irls: bool = False
    huber_delta: float = 2.0
    depth_model: str = "fixed"
    joint_pose_step: bool = True
    affine_init: bool = True
    match_threshold: float = 0.5
    stride: int = 2
    init_face_fraction: float = 0.6
    uv_threshold: float = 0.015

    DEPTH_MODELS = ("exact", "fixed")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "SolverOptions":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown fit configuration keys: {', '.join(unknown)}")
        options = cls(**values)
        options.validate()
        return options

    def validate(self) -> None:
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if self.w_id < 0 or self.w_exp < 0:
            raise ConfigError("prior weights must be non-negative")
        if not 0 < self.f_min < self.f_max:
            raise ConfigError("focal bounds must satisfy 0 < f_min < f_max")
        if self.depth_model not in self.DEPTH_MODELS:
            raise ConfigError(f"depth_model must be one of {', '.join(self.DEPTH_MODELS)}")
        if not 0.0 <= self.match_threshold <= 1.0:
            raise ConfigError("match_threshold must lie in [0, 1]")
        if self.stride < 1:
            raise ConfigError("stride must be at least 1")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be positive")
        if self.initial_damping <= 0:
            raise ConfigError("initial_damping must be positive")
        if self.max_escalations < 0:
            raise ConfigError("max_escalations must be non-negative")


@dataclass
class FitReport:
    """
    Solver trace.

    Attributes:
        energies: (E_data, E_reg, E) at the start and after every iteration
        rms: final unweighted reprojection RMS in pixels
        iterations: outer iterations run
        converged: a tolerance was met before max_iters
        stalled: an iteration rejected every block step; not counted as convergence
        degenerate: damping escalation gave up on a singular system
        focal_clamped: f hit a bound
        wall_ms: solve time
    """

    energies: List[Tuple[float, float, float]] = field(default_factory=list)
    rms: float = float("nan")
    iterations: int = 0
    converged: bool = False
    stalled: bool = False
    degenerate: bool = False
    focal_clamped: bool = False
    wall_ms: float = 0.0

    @property
    def final_energy(self) -> float:
        return self.energies[-1][2] if self.energies else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "energies": [[float(v) for v in e] for e in self.energies],
            "rms": float(self.rms),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "stalled": bool(self.stalled),
            "degenerate": bool(self.degenerate),
            "focal_clamped": bool(self.focal_clamped),
            "wall_ms": float(self.wall_ms),
        }


def _skew_rows(a: np.ndarray) -> np.ndarray:
    """Cross-product matrices [a]x for every row of (N, 3)."""
    s = np.zeros((a.shape[0], 3, 3))
    s[:, 0, 1], s[:, 0, 2] = -a[:, 2], a[:, 1]
    s[:, 1, 0], s[:, 1, 2] = a[:, 2], -a[:, 0]
    s[:, 2, 0], s[:, 2, 1] = -a[:, 1], a[:, 0]
    return s


class FitProblem:
    """
    Residuals and Jacobians of the alignment energy for a fixed correspondence set.

    The residual vector stacks sqrt(w_i) (p_i - proj_i) as (x, y) pairs, then the identity and
    expression prior terms. Pose increments are (df, rotation vector, dt), with the rotation
    composed on the left; coefficient increments are additive.
    """

    def __init__(self, correspondences: CorrespondenceSet, model: MorphableModel, options: SolverOptions):
        if np.any(correspondences.vertices < 0) or np.any(correspondences.vertices >= model.num_vertices):
            raise ValueError("correspondence vertex index out of range")
        self.model = model
        self.options = options
        self.points = correspondences.points
        self.sqrt_w = np.sqrt(correspondences.weights)
        self.centre = np.array([correspondences.image_size[0] / 2.0, correspondences.image_size[1] / 2.0])
        v = model.num_vertices
        idx = correspondences.vertices
        self.mean = model.mean_vertices()[idx]
        self.basis_id = model.identity_basis.reshape(v, 3, -1)[idx]
        self.basis_exp = model.expression_basis.reshape(v, 3, -1)[idx]
        self.prior_id = np.sqrt(options.w_id) / model.sigma_id
        self.prior_exp = np.sqrt(options.w_exp) / model.sigma_exp

    def block_size(self, block: str) -> int:
        if block == POSE_BLOCK:
            return POSE_SIZE
        if block == IDENTITY_BLOCK:
            return self.model.num_identity
        if block == JOINT_BLOCK:
            return POSE_SIZE + self.model.num_identity + self.model.num_expression
        return self.model.num_expression

    def shape(self, params: FitParameters) -> np.ndarray:
        return (self.mean + self.basis_id @ params.coeffs.alpha_id
                + self.basis_exp @ params.coeffs.alpha_exp)

    def camera_points(self, params: FitParameters) -> np.ndarray:
        return self.shape(params) @ params.rotation.T + params.translation

    def project(self, params: FitParameters) -> np.ndarray:
        cam = self.camera_points(params)
        return params.f * cam[:, :2] / cam[:, 2:3] + self.centre

    def residuals(self, params: FitParameters) -> np.ndarray:
        data = self.sqrt_w[:, None] * (self.points - self.project(params))
        return np.concatenate([
            data.reshape(-1),
            self.prior_id * params.coeffs.alpha_id,
            self.prior_exp * params.coeffs.alpha_exp,
        ])

    def energy(self, params: FitParameters) -> Tuple[float, float]:
        """(E_data, E_reg); E_data is +inf when a point falls behind the camera."""
        cam = self.camera_points(params)
        if np.any(cam[:, 2] <= 0):
            return float("inf"), 0.0
        proj = params.f * cam[:, :2] / cam[:, 2:3] + self.centre
        data = self.sqrt_w[:, None] * (self.points - proj)
        e_reg = float(np.sum((self.prior_id * params.coeffs.alpha_id) ** 2)
                      + np.sum((self.prior_exp * params.coeffs.alpha_exp) ** 2))
        return float(np.sum(data * data)), e_reg

    def jacobian(self, params: FitParameters, block: Optional[str] = None,
                 depth_model: Optional[str] = None) -> np.ndarray:
        """
        Jacobian of ``residuals`` w.r.t. one block, or all of them (pose, identity, expression
        in that column order) when ``block`` is None or the joint block.

        Args:
            params: Linearization point
            block: Parameter block name
            depth_model: "fixed" drops the depth terms from the coefficient columns, "exact"
                keeps them; defaults to the solver option. The pose and joint blocks are always exact.
        """
        if block is None or block == JOINT_BLOCK:
            depth_model = "exact" if block == JOINT_BLOCK else depth_model
            return np.concatenate([self.jacobian(params, b, depth_model) for b in PARAMETER_BLOCKS], axis=1)
        depth_model = depth_model or self.options.depth_model
        shape = self.shape(params)
        rotated = shape @ params.rotation.T
        cam = rotated + params.translation
        n = cam.shape[0]
        inv_z = 1.0 / cam[:, 2]
        f = params.f
        d_proj = np.zeros((n, 2, 3))
        d_proj[:, 0, 0] = f * inv_z
        d_proj[:, 1, 1] = f * inv_z
        if block == POSE_BLOCK or depth_model == "exact":
            d_proj[:, 0, 2] = -f * cam[:, 0] * inv_z ** 2
            d_proj[:, 1, 2] = -f * cam[:, 1] * inv_z ** 2
        k_id, k_exp = self.model.num_identity, self.model.num_expression

        if block == POSE_BLOCK:
            d_f = (cam[:, :2] * inv_z[:, None])[:, :, None]
            d_rot = d_proj @ -_skew_rows(rotated)
            data = np.concatenate([d_f, d_rot, d_proj], axis=2)
            prior = np.zeros((k_id + k_exp, POSE_SIZE))
        elif block == IDENTITY_BLOCK:
            data = d_proj @ np.einsum("ij,njk->nik", params.rotation, self.basis_id)
            prior = np.vstack([np.diag(self.prior_id), np.zeros((k_exp, k_id))])
        elif block == EXPRESSION_BLOCK:
            data = d_proj @ np.einsum("ij,njk->nik", params.rotation, self.basis_exp)
            prior = np.vstack([np.zeros((k_id, k_exp)), np.diag(self.prior_exp)])
        else:
            raise ValueError(f"unknown parameter block '{block}'")
        data = -self.sqrt_w[:, None, None] * data
        return np.vstack([data.reshape(2 * n, -1), prior])

    def apply_increment(self, params: FitParameters, delta: np.ndarray,
                        block: str) -> Tuple[FitParameters, bool]:
        """Return the updated parameters and whether the focal length was clamped."""
        if block == JOINT_BLOCK:
            k_id = self.model.num_identity
            params, clamped = self.apply_increment(params, delta[:POSE_SIZE], POSE_BLOCK)
            coeffs = ShapeCoefficients(params.coeffs.alpha_id + delta[POSE_SIZE:POSE_SIZE + k_id],
                                       params.coeffs.alpha_exp + delta[POSE_SIZE + k_id:])
            return FitParameters(params.pose, coeffs), clamped
        if block == POSE_BLOCK:
            f = params.f + float(delta[0])
            clamped_f = float(np.clip(f, self.options.f_min, self.options.f_max))
            rotation = orthonormalize(Rotation.from_rotvec(delta[1:4]).as_matrix() @ params.rotation)
            pose = CameraPose(clamped_f, rotation, params.translation + delta[4:7])
            return FitParameters(pose, params.coeffs), bool(clamped_f != f)
        if block == IDENTITY_BLOCK:
            coeffs = ShapeCoefficients(params.coeffs.alpha_id + delta, params.coeffs.alpha_exp)
        else:
            coeffs = ShapeCoefficients(params.coeffs.alpha_id, params.coeffs.alpha_exp + delta)
        return FitParameters(params.pose, coeffs), False


class _BlockState:
    def __init__(self, damping: float):
        self.initial = damping
        self.damping = damping


class _SolveStatus:
    def __init__(self):
        self.degenerate = False
        self.focal_clamped = False


def _damped_step(problem: FitProblem, params: FitParameters, block: str, state: _BlockState,
                 status: _SolveStatus) -> Tuple[FitParameters, float, bool]:
    """
    One Levenberg-Marquardt step on a block.

    Returns:
        New parameters, the accepted step norm and whether a step was accepted. Singular solves
        are counted per call; when every attempt is rejected the block's damping starts over.
    """
    e_data, e_reg = problem.energy(params)
    energy = e_data + e_reg
    residuals = problem.residuals(params)
    jac = problem.jacobian(params, block)
    normal = jac.T @ jac
    gradient = jac.T @ residuals
    diag = np.diag(normal).copy()
    if diag.size == 0 or diag.max() <= 0:
        return params, 0.0, False
    diag = np.maximum(diag, 1e-12 * diag.max())
    escalations = 0
    for _ in range(MAX_ATTEMPTS):
        try:
            delta = np.linalg.solve(normal + state.damping * np.diag(diag), -gradient)
            singular = not np.all(np.isfinite(delta))
        except np.linalg.LinAlgError:
            singular = True
        if singular:
            escalations += 1
            state.damping *= 10.0
            if escalations > problem.options.max_escalations:
                status.degenerate = True
                return params, 0.0, False
            continue
        candidate, clamped = problem.apply_increment(params, delta, block)
        c_data, c_reg = problem.energy(candidate)
        if c_data + c_reg <= energy:
            state.damping /= 3.0
            status.focal_clamped |= clamped
            return candidate, float(np.linalg.norm(delta)), True
        state.damping *= 10.0
    state.damping = state.initial
    return params, 0.0, False


def _huber_weights(problem: FitProblem, params: FitParameters, base: np.ndarray, delta: float) -> np.ndarray:
    distance = np.linalg.norm(problem.points - problem.project(params), axis=1)
    scale = np.where(distance <= delta, 1.0, delta / np.maximum(distance, 1e-12))
    return base * scale


def check_correspondences(correspondences: CorrespondenceSet, model: MorphableModel) -> None:
    """
    Raises:
        ValueError: With fewer than 6 correspondences or fewer than 3 non-collinear vertices
    """
    if len(correspondences) < MIN_CORRESPONDENCES:
        raise ValueError(
            f"solver needs at least {MIN_CORRESPONDENCES} correspondences, got {len(correspondences)}"
        )
    unique = np.unique(correspondences.vertices)
    positions = model.mean_vertices()[unique]
    if unique.size < 3 or np.linalg.matrix_rank(positions - positions.mean(axis=0), tol=1e-9) < 2:
        raise ValueError("correspondences must span at least 3 non-collinear model vertices")


def affine_camera(points: np.ndarray, vertices: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weighted least-squares affine camera ``x = A X + b`` from 2D points and 3D vertices.

    The vertices are centred and scaled to a mean norm of sqrt(3) before solving.

    Returns:
        A (2, 3) and b (2,)

    Raises:
        ValueError: If the weights sum to zero
        np.linalg.LinAlgError: If the vertices are coplanar
    """
    total = float(np.sum(weights))
    if total <= 0:
        raise ValueError("affine camera needs a positive total weight")
    w = weights / total
    mean_x = w @ points
    mean_vertex = w @ vertices
    centred = vertices - mean_vertex
    scale = np.sqrt(3.0) / max(float(w @ np.linalg.norm(centred, axis=1)), 1e-12)
    centred = centred * scale
    weighted = centred * w[:, None]
    a = np.linalg.solve(weighted.T @ centred, weighted.T @ (points - mean_x)).T * scale
    return a, mean_x - a @ mean_vertex


def affine_pose(points: np.ndarray, vertices: np.ndarray, weights: np.ndarray, f: float,
                image_size: Tuple[int, int]) -> Optional[CameraPose]:
    """
    Perspective pose with focal length ``f`` read off the weighted affine camera.

    The rows of A give the scale s = f / depth and the first two rotation rows, the third is
    their cross product; the translation places the weighted centroid at that depth.

    Returns:
        The pose, or None when the affine camera is undetermined
    """
    try:
        a, b = affine_camera(points, vertices, weights)
    except (ValueError, np.linalg.LinAlgError):
        return None
    norms = np.linalg.norm(a, axis=1)
    if not np.all(np.isfinite(a)) or np.any(norms <= 0):
        return None
    s = float(norms.mean())
    r1, r2 = a[0] / norms[0], a[1] / norms[1]
    rotation = orthonormalize(np.stack([r1, r2, np.cross(r1, r2)]))
    mean_vertex = (weights / np.sum(weights)) @ vertices
    centre = np.array([image_size[0] / 2.0, image_size[1] / 2.0])
    t_xy = (b - centre) / s
    t_z = f / s - rotation[2] @ mean_vertex
    return CameraPose(f, rotation, np.array([t_xy[0], t_xy[1], t_z]))


def _affine_start(problem: FitProblem, correspondences: CorrespondenceSet, params: FitParameters) -> FitParameters:
    pose = affine_pose(correspondences.points, problem.shape(params), correspondences.weights, params.f,
                       correspondences.image_size)
    if pose is None:
        return params
    candidate = FitParameters(pose, params.coeffs)
    if sum(problem.energy(candidate)) < sum(problem.energy(params)):
        logger.debug(f"Starting from the affine pose estimate: yaw {pose.yaw:.3f}, pitch {pose.pitch:.3f}")
        return candidate
    return params


def solve(correspondences: CorrespondenceSet, model: MorphableModel, init: FitParameters,
          options: Optional[SolverOptions] = None) -> Tuple[FitParameters, FitReport]:
    """
    Fit pose, focal length and shape coefficients to 2D-3D correspondences.

    Each iteration takes a damped Gauss-Newton step on the pose (jointly with the coefficients
    when ``joint_pose_step`` is set), then on the identity and the expression coefficients,
    each block with its own damping (x10 on rejection, /3 on acceptance). Steps are accepted
    only if they do not increase the energy. With ``affine_init`` the solve starts from the
    affine-camera pose at the initial focal length when that lowers the energy.

    Args:
        correspondences: Source pixels with template vertex indices and weights
        model: Morphable model
        init: Starting parameters
        options: Solver settings

    Returns:
        Best parameters found and the solver report

    Raises:
        ValueError: If the correspondences do not constrain a fit
    """
    options = options or SolverOptions()
    check_correspondences(correspondences, model)
    start = time.perf_counter()
    base_weights = correspondences.weights
    problem = FitProblem(correspondences, model, options)
    params = init
    report = FitReport()
    e_data, e_reg = problem.energy(params)
    if not np.isfinite(e_data):
        raise ValueError("initial parameters place correspondences behind the camera")
    report.energies.append((e_data, e_reg, e_data + e_reg))
    if options.affine_init:
        params = _affine_start(problem, correspondences, params)

    first = JOINT_BLOCK if options.joint_pose_step else POSE_BLOCK
    blocks = [first] + [b for b in (IDENTITY_BLOCK, EXPRESSION_BLOCK) if problem.block_size(b) > 0]
    states = {b: _BlockState(options.initial_damping) for b in blocks}
    status = _SolveStatus()

    for iteration in range(options.max_iters):
        previous = report.energies[-1][2]
        step_sq = 0.0
        accepted = False
        for block in blocks:
            params, step, taken = _damped_step(problem, params, block, states[block], status)
            step_sq += step * step
            accepted = accepted or taken
            if status.degenerate:
                break
        e_data, e_reg = problem.energy(params)
        report.energies.append((e_data, e_reg, e_data + e_reg))
        report.iterations = iteration + 1
        logger.debug(f"Fit iteration {iteration}: E_data {e_data:.6g}, E_reg {e_reg:.6g}")
        if status.degenerate:
            logger.warning("Normal equations stayed singular; returning the best parameters so far")
            break
        if not accepted:
            report.stalled = True
            logger.info(f"No block step lowered the energy at iteration {iteration}; stopping")
            break
        current = e_data + e_reg
        if current == 0.0 or (previous - current) <= options.rel_tol * previous or np.sqrt(step_sq) < options.step_tol:
            report.converged = True
            break
        if options.irls:
            # the energy changes meaning here; the next row starts a new descent under the new weights
            weights = _huber_weights(problem, params, base_weights, options.huber_delta)
            problem = FitProblem(correspondences.with_weights(weights), model, options)
            e_data, e_reg = problem.energy(params)
            report.energies[-1] = (e_data, e_reg, e_data + e_reg)

    if status.focal_clamped:
        logger.warning(f"Focal length reached its bound: f = {params.f:.1f}")
    report.degenerate = status.degenerate
    report.focal_clamped = status.focal_clamped
    residual = correspondences.points - problem.project(params)
    report.rms = float(np.sqrt(np.mean(np.sum(residual * residual, axis=1))))
    report.wall_ms = 1000.0 * (time.perf_counter() - start)
    logger.info(f"Fit finished after {report.iterations} iterations: E {report.final_energy:.6g}, "
                f"RMS {report.rms:.3f} px, converged={report.converged}, stalled={report.stalled}")
    return params, report


def recover_dense(fit: FitParameters, model: MorphableModel, image_size: Tuple[int, int],
                  uv_threshold: float = 0.015) -> Tuple[np.ndarray, np.ndarray]:
    """Flow and matchability regenerated from the fitted model against the frontal template."""
    attributes = rasterize_attributes(model, fit.coeffs, fit.pose, image_size)
    template = render_target_template(model, image_size)
    return compute_gt_correspondence(attributes, template, uv_threshold)


def landmarks_2d(fit: FitParameters, model: MorphableModel, image_size: Tuple[int, int],
                 names: Optional[Sequence[str]] = None) -> Dict[str, ProjectedLandmark]:
    """Projected landmark positions with depth-buffer visibility under the fitted pose."""
    return project_landmarks(model, fit.coeffs, fit.pose, image_size, names=names)
