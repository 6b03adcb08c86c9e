"""
Procedural morphable-model generator.

Builds a low-poly head cap (an ellipsoid with nose, brow, eye, mouth and chin relief) on a
regular azimuth x height grid, a cylindrical uv unwrap of that grid, and smooth random
identity and expression bases orthogonalized against each other and against rigid motion.
"""

import logging
from dataclasses import dataclass, fields
from typing import Any, Dict, List, Tuple

import numpy as np

from dense_face_alignment.errors import ConfigError
from dense_face_alignment.facemodel import MorphableModel
from dense_face_alignment.landmarks import LANDMARK_ANCHORS

logger = logging.getLogger(__name__)

HEAD_RADII = np.array([0.8, 1.0, 0.9])

# (amplitude, azimuth centre, height centre, azimuth width, height width); mirrored features
# are listed once with a positive azimuth and reflected.
_RELIEF = [
    (0.30, 0.0, 0.0, 0.12, 0.22),    # nose ridge
    (0.12, 0.0, 0.08, 0.08, 0.08),   # nose tip
    (0.06, 0.0, 0.43, 0.20, 0.05),   # lips
    (0.08, 0.0, 0.72, 0.25, 0.08),   # chin
]
_MIRRORED_RELIEF = [
    (-0.07, 0.33, -0.22, 0.12, 0.06),  # eye socket
    (0.05, 0.33, -0.38, 0.20, 0.05),   # brow ridge
    (0.04, 0.60, 0.00, 0.20, 0.15),    # cheekbone
]

# Anchors around which expression displacement bumps are placed
_EXPRESSION_ANCHORS = ["mouth_outer_0", "mouth_outer_6", "mouth_outer_3", "mouth_outer_9",
                       "eye_r_center", "eye_l_center", "brow_r_2", "brow_l_2", "jaw_8"]


@dataclass
class ModelGenConfig:
    """Settings of the procedural model generator (config section ``model``)."""

    n_azimuth: int = 45
    n_elevation: int = 41
    k_id: int = 16
    k_exp: int = 8
    azimuth_max: float = 1.75
    elevation_max: float = 1.2
    sigma_id_scale: float = 0.10
    sigma_exp_scale: float = 0.06
    sigma_decay: float = 0.85
    seed: int = 0

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelGenConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown model configuration keys: {', '.join(unknown)}")
        config = cls(**values)
        config.validate()
        return config

    def validate(self) -> None:
        if self.n_azimuth < 2 or self.n_elevation < 2:
            raise ConfigError(
                f"vertex grid {self.n_azimuth}x{self.n_elevation} is too small: "
                f"a model needs at least 3 vertices on a 2x2 grid"
            )
        if self.k_id < 0 or self.k_exp < 0:
            raise ConfigError("basis ranks must be non-negative")
        if 3 * self.n_azimuth * self.n_elevation < 7 + self.k_id + self.k_exp:
            raise ConfigError("vertex grid too small for the requested basis ranks")
        if not 0 < self.azimuth_max < np.pi or not 0 < self.elevation_max < np.pi / 2:
            raise ConfigError("azimuth_max must lie in (0, pi) and elevation_max in (0, pi/2)")
        if self.sigma_id_scale <= 0 or self.sigma_exp_scale <= 0 or not 0 < self.sigma_decay <= 1:
            raise ConfigError("sigma scales must be positive and sigma_decay in (0, 1]")


def _relief(theta: np.ndarray, h: np.ndarray) -> np.ndarray:
    relief = np.zeros_like(theta)
    features = list(_RELIEF)
    for amp, t0, h0, wt, wh in _MIRRORED_RELIEF:
        features += [(amp, t0, h0, wt, wh), (amp, -t0, h0, wt, wh)]
    for amp, t0, h0, wt, wh in features:
        relief += amp * np.exp(-0.5 * (((theta - t0) / wt) ** 2 + ((h - h0) / wh) ** 2))
    return relief


def build_head_grid(config: ModelGenConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Sample the head surface on the azimuth x height grid.

    Returns:
        vertices (V, 3), outward ellipsoid normals (V, 3), azimuth (V,), height (V,);
        vertex (row i, column j) has index i * n_azimuth + j.
    """
    theta = np.linspace(-config.azimuth_max, config.azimuth_max, config.n_azimuth)
    theta = 0.5 * (theta - theta[::-1])
    height = np.linspace(-1.0, 1.0, config.n_elevation)
    height = 0.5 * (height - height[::-1])
    grid_theta, grid_h = np.meshgrid(theta, height)
    phi = grid_h * config.elevation_max
    direction = np.stack(
        [np.cos(phi) * np.sin(grid_theta), np.sin(phi), -np.cos(phi) * np.cos(grid_theta)], axis=-1
    )
    base = direction * HEAD_RADII
    normal = base / HEAD_RADII ** 2
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    vertices = base + _relief(grid_theta, grid_h)[..., None] * normal
    return (vertices.reshape(-1, 3), normal.reshape(-1, 3),
            grid_theta.reshape(-1), grid_h.reshape(-1))


def build_triangles(config: ModelGenConfig, vertices: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Split each grid quad into two triangles, mirrored across the midline, facing outward."""
    n_az, n_el = config.n_azimuth, config.n_elevation
    theta = np.linspace(-1.0, 1.0, n_az)
    triangles: List[Tuple[int, int, int]] = []
    for i in range(n_el - 1):
        for j in range(n_az - 1):
            a, b = i * n_az + j, i * n_az + j + 1
            c, d = a + n_az, b + n_az
            if theta[j] + theta[j + 1] < 0:
                triangles += [(a, b, d), (a, d, c)]
            else:
                triangles += [(a, b, c), (b, d, c)]
    tris = np.array(triangles, dtype=np.int64)
    p0, p1, p2 = vertices[tris[:, 0]], vertices[tris[:, 1]], vertices[tris[:, 2]]
    face_normal = np.cross(p1 - p0, p2 - p0)
    outward = normals[tris].sum(axis=1)
    flip = np.einsum("ij,ij->i", face_normal, outward) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def _rigid_fields(vertices: np.ndarray) -> np.ndarray:
    centred = vertices - vertices.mean(axis=0)
    columns = []
    for axis in np.eye(3):
        columns.append(np.broadcast_to(axis, vertices.shape).reshape(-1))
    for axis in np.eye(3):
        columns.append(np.cross(axis, centred).reshape(-1))
    columns.append(centred.reshape(-1))
    return np.stack(columns, axis=1)


def _bump_field(rng: np.random.Generator, vertices: np.ndarray, centres: np.ndarray,
                width_range: Tuple[float, float]) -> np.ndarray:
    field = np.zeros_like(vertices)
    for centre in centres:
        width = rng.uniform(*width_range)
        direction = rng.normal(size=3)
        weight = np.exp(-np.sum((vertices - vertices[centre]) ** 2, axis=1) / (2.0 * width ** 2))
        field += weight[:, None] * direction
    return field.reshape(-1)


def build_bases(config: ModelGenConfig, vertices: np.ndarray,
                landmark_indices: Dict[str, int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Build identity and expression columns as smooth Gaussian-bump displacement fields.

    All columns are orthogonal to each other and to the seven rigid/scale motions of the mean
    shape, and scaled to unit RMS per-vertex displacement.
    """
    rng = np.random.default_rng(config.seed)
    num_vertices = vertices.shape[0]
    rigid = _rigid_fields(vertices)
    expression_centres = np.array([landmark_indices[name] for name in _EXPRESSION_ANCHORS])
    columns = []
    for _ in range(config.k_id):
        centres = rng.integers(0, num_vertices, size=rng.integers(3, 7))
        columns.append(_bump_field(rng, vertices, centres, (0.25, 0.6)))
    for _ in range(config.k_exp):
        centres = rng.choice(expression_centres, size=rng.integers(2, 4), replace=False)
        columns.append(_bump_field(rng, vertices, centres, (0.12, 0.3)))
    if not columns:
        empty = np.zeros((3 * num_vertices, 0))
        return empty, empty.copy()
    stacked = np.concatenate([rigid, np.stack(columns, axis=1)], axis=1)
    q, _ = np.linalg.qr(stacked)
    basis = q[:, rigid.shape[1]:] * np.sqrt(num_vertices)
    # sign convention: the largest-magnitude entry of every column is positive
    pivots = np.argmax(np.abs(basis), axis=0)
    basis *= np.sign(basis[pivots, np.arange(basis.shape[1])])
    return basis[:, :config.k_id], basis[:, config.k_id:]


def snap_landmarks(config: ModelGenConfig) -> Dict[str, int]:
    """Map every landmark anchor to the nearest grid vertex."""
    theta = np.linspace(-config.azimuth_max, config.azimuth_max, config.n_azimuth)
    height = np.linspace(-1.0, 1.0, config.n_elevation)
    indices = {}
    for name, (t, h) in LANDMARK_ANCHORS.items():
        j = int(np.argmin(np.abs(theta - t)))
        i = int(np.argmin(np.abs(height - h)))
        indices[name] = i * config.n_azimuth + j
    return indices


def generate_model(config: ModelGenConfig) -> MorphableModel:
    """
    Generate a complete procedural morphable model.

    Args:
        config: Generator settings; the seed fixes the random bases

    Returns:
        MorphableModel with a cylindrical uv unwrap and the full landmark table
    """
    config.validate()
    vertices, normals, theta, height = build_head_grid(config)
    triangles = build_triangles(config, vertices, normals)
    landmark_indices = snap_landmarks(config)
    identity_basis, expression_basis = build_bases(config, vertices, landmark_indices)
    uv = np.stack(
        [(theta + config.azimuth_max) / (2.0 * config.azimuth_max), (height + 1.0) / 2.0], axis=1
    )
    decay_id = config.sigma_decay ** np.arange(config.k_id)
    decay_exp = config.sigma_decay ** np.arange(config.k_exp)
    model = MorphableModel(
        mean_shape=vertices.reshape(-1),
        identity_basis=identity_basis,
        expression_basis=expression_basis,
        sigma_id=config.sigma_id_scale * decay_id,
        sigma_exp=config.sigma_exp_scale * decay_exp,
        triangles=triangles,
        uv_coords=np.clip(uv, 0.0, 1.0),
        landmark_indices=landmark_indices,
    )
    logger.info(
        f"Generated procedural model: V={model.num_vertices}, T={len(model.triangles)}, "
        f"K_id={model.num_identity}, K_exp={model.num_expression}"
    )
    return model
