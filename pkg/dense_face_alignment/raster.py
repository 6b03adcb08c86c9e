"""
Deterministic software rasterizer for posed morphable-model faces.

Produces the colour image together with per-pixel uv, triangle/barycentric, depth and coverage
buffers, and samples the random scenes used for synthetic training data.
"""

import glob
import logging
import os
import struct
import threading
from dataclasses import dataclass, fields, replace
from functools import lru_cache
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import cv2
import numpy as np

from dense_face_alignment.errors import ConfigError, DataError
from dense_face_alignment.facemodel import (
    CameraPose,
    MorphableModel,
    ShapeCoefficients,
    euler_to_rotation,
    frontal_pose,
    project,
    synthesize_shape,
)

logger = logging.getLogger(__name__)

TEMPLATE_FACE_FRACTION = 0.75
TEXTURE_SIZE = 128
MIN_IMAGE_SIZE = 32

BUFFER_MAGIC = b"DCRB"
BUFFER_VERSION = 1

# Lambertian attenuation per SH band (1 + 3 + 5 coefficients)
SH_ATTENUATION = np.r_[np.pi, np.repeat(2.0 * np.pi / 3.0, 3), np.repeat(np.pi / 4.0, 5)]


def sh9(normals: np.ndarray) -> np.ndarray:
    """First nine real spherical harmonics evaluated at unit vectors, shape (N, 9)."""
    x, y, z = normals[:, 0], normals[:, 1], normals[:, 2]
    h = np.empty((normals.shape[0], 9))
    h[:, 0] = 1.0 / np.sqrt(4.0 * np.pi)
    h[:, 1] = np.sqrt(3.0 / (4.0 * np.pi)) * z
    h[:, 2] = np.sqrt(3.0 / (4.0 * np.pi)) * x
    h[:, 3] = np.sqrt(3.0 / (4.0 * np.pi)) * y
    h[:, 4] = 0.5 * np.sqrt(5.0 / (4.0 * np.pi)) * (3.0 * z ** 2 - 1.0)
    h[:, 5] = 3.0 * np.sqrt(5.0 / (12.0 * np.pi)) * x * z
    h[:, 6] = 3.0 * np.sqrt(5.0 / (12.0 * np.pi)) * y * z
    h[:, 7] = 1.5 * np.sqrt(5.0 / (12.0 * np.pi)) * (x ** 2 - y ** 2)
    h[:, 8] = 3.0 * np.sqrt(5.0 / (12.0 * np.pi)) * x * y
    return h


@dataclass(frozen=True, eq=False)
class LightingSH:
    """Order-2 spherical-harmonics lighting: (9, 3) coefficients, one column per channel."""

    coefficients: np.ndarray

    def __post_init__(self):
        coefficients = np.array(self.coefficients, dtype=np.float64).reshape(9, 3)
        if not np.all(np.isfinite(coefficients)):
            raise ValueError("lighting coefficients must be finite")
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def flat(cls, level: float = 1.0) -> "LightingSH":
        """Constant irradiance ``level`` in every direction (only the DC term is set)."""
        coefficients = np.zeros((9, 3))
        coefficients[0, :] = level / (np.pi / np.sqrt(4.0 * np.pi))
        return cls(coefficients)

    def irradiance(self, normals: np.ndarray) -> np.ndarray:
        """(N, 3) irradiance for unit normals in camera space."""
        return sh9(normals) @ (SH_ATTENUATION[:, None] * self.coefficients)


@lru_cache(maxsize=4)
def lighting_bank(size: int = 16, seed: int = 1234) -> Tuple[LightingSH, ...]:
    """
    Fixed bank of lighting environments, each an ambient term plus one directional light.

    Camera space has y pointing down and the camera looking down +z, so lights in front of the
    face have negative z.
    """
    rng = np.random.default_rng(seed)
    bank = []
    for _ in range(size):
        direction = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.3), -1.0])
        direction /= np.linalg.norm(direction)
        tint = 1.0 + rng.uniform(-0.1, 0.1, size=3)
        intensity = rng.uniform(0.5, 0.9)
        ambient = rng.uniform(0.3, 0.6)
        coefficients = intensity * sh9(direction[None, :])[0][:, None] * tint[None, :]
        coefficients[0, :] += ambient / (np.pi / np.sqrt(4.0 * np.pi))
        bank.append(LightingSH(coefficients))
    return tuple(bank)


@dataclass(frozen=True)
class TextureParams:
    """Procedural skin texture: base tones in [0, 1] RGB plus feature strengths."""

    skin: Tuple[float, float, float] = (0.80, 0.62, 0.52)
    lips: Tuple[float, float, float] = (0.70, 0.35, 0.35)
    iris: Tuple[float, float, float] = (0.25, 0.18, 0.12)
    brow_darkness: float = 0.55
    gradient: float = 0.15


@dataclass(frozen=True, eq=False)
class Occluder:
    """Axis-aligned rectangle [x0, x1) x [y0, y1) filled with a colour or an image patch."""

    x0: int
    y0: int
    x1: int
    y1: int
    color: Optional[Tuple[int, int, int]] = None
    patch: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Everything that determines one synthetic render."""

    coeffs: ShapeCoefficients
    pose: CameraPose
    texture: TextureParams
    lighting: LightingSH
    background: Optional[np.ndarray] = None
    gray_level: float = 0.5
    occluders: Tuple[Occluder, ...] = ()
    rng_seed: int = 0


class RenderReport(NamedTuple):
    degenerate_triangles: int
    behind_camera_triangles: int
    all_behind_camera: bool


@dataclass(frozen=True, eq=False)
class RenderedFace:
    """
    Colour image plus attribute buffers, all stored row-major as (H, W, ...).

    Attributes:
        color: (H, W, 3) uint8 RGB
        uv_buffer: (H, W, 2) float32, zero outside face_mask
        triangle_index: (H, W) int32, -1 outside face_mask
        barycentric: (H, W, 3) float32 perspective-correct weights in triangle vertex order
        depth_buffer: (H, W) float32 camera-space z, zero outside face_mask
        face_mask: (H, W) bool
        occluder_mask: (H, W) bool
        report: Rasterization statistics
    """

    color: np.ndarray
    uv_buffer: np.ndarray
    triangle_index: np.ndarray
    barycentric: np.ndarray
    depth_buffer: np.ndarray
    face_mask: np.ndarray
    occluder_mask: np.ndarray
    report: RenderReport = RenderReport(0, 0, False)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.face_mask.shape[1], self.face_mask.shape[0]

    def with_color(self, color: np.ndarray, occluder_mask: Optional[np.ndarray] = None) -> "RenderedFace":
        if occluder_mask is None:
            occluder_mask = self.occluder_mask
        return replace(self, color=color, occluder_mask=occluder_mask)


@dataclass
class DataGenConfig:
    """Synthetic scene distribution and data-set settings (config section ``datagen``)."""

    image_size: int = 64
    count: int = 100
    seed: int = 0
    stage: str = "pretrain"
    shape_scale: float = 1.0
    pose_std_yaw: float = 0.5
    pose_std_pitch: float = 0.2
    pose_std_roll: float = 0.2
    yaw_bound: float = 1.4
    pitch_bound: float = 0.6
    roll_bound: float = 0.6
    translation_jitter_px: float = 2.0
    depth_jitter: float = 0.05
    lighting_mix: float = 1.0
    texture_jitter: float = 1.0
    p_occ: float = 0.3
    occluder_area_min: float = 0.02
    occluder_area_max: float = 0.20
    background_mode: str = "gray"
    background_dir: str = ""
    gray_level: float = 0.5
    uv_threshold: float = 0.015
    perturb_finetune: bool = False

    STAGES = ("pretrain", "finetune", "benchmark")
    BACKGROUND_MODES = ("gray", "image", "mixed")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "DataGenConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown datagen configuration keys: {', '.join(unknown)}")
        config = cls(**values)
        config.validate()
        return config

    @property
    def size(self) -> Tuple[int, int]:
        return self.image_size, self.image_size

    def validate(self) -> None:
        if self.image_size < MIN_IMAGE_SIZE:
            raise ConfigError(f"image_size must be at least {MIN_IMAGE_SIZE}, got {self.image_size}")
        if self.count < 0:
            raise ConfigError("count must be non-negative")
        if self.stage not in self.STAGES:
            raise ConfigError(f"stage must be one of {', '.join(self.STAGES)}, got {self.stage}")
        if self.background_mode not in self.BACKGROUND_MODES:
            raise ConfigError(
                f"background_mode must be one of {', '.join(self.BACKGROUND_MODES)}, got {self.background_mode}"
            )
        stds = (self.shape_scale, self.pose_std_yaw, self.pose_std_pitch, self.pose_std_roll,
                self.translation_jitter_px, self.depth_jitter, self.texture_jitter)
        if any(value < 0 for value in stds):
            raise ConfigError("standard deviations and jitter amounts must be non-negative")
        if min(self.yaw_bound, self.pitch_bound, self.roll_bound) < 0:
            raise ConfigError("pose bounds must be non-negative")
        for name in ("p_occ", "lighting_mix", "gray_level"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.occluder_area_min <= self.occluder_area_max <= 1.0:
            raise ConfigError("occluder area range must satisfy 0 < min <= max <= 1")
        if self.uv_threshold <= 0:
            raise ConfigError("uv_threshold must be positive")


class BackgroundBank:
    """Background images from a directory, resized to the render size on first use."""

    EXTENSIONS = ("*.png", "*.jpg", "*.jpeg")

    def __init__(self, paths: Sequence[str], image_size: Tuple[int, int]):
        self.paths = sorted(paths)
        self.image_size = image_size
        self._cache: Dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, config: DataGenConfig) -> Optional["BackgroundBank"]:
        """
        Raises:
            ConfigError: If image backgrounds are requested but the directory has no images
        """
        if config.background_mode == "gray":
            return None
        paths: List[str] = []
        if config.background_dir and os.path.isdir(config.background_dir):
            for pattern in cls.EXTENSIONS:
                paths += glob.glob(os.path.join(config.background_dir, pattern))
        if not paths:
            raise ConfigError(
                f"background_mode={config.background_mode} needs images, but "
                f"'{config.background_dir}' contains none"
            )
        return cls(paths, config.size)

    def __len__(self) -> int:
        return len(self.paths)

    def get(self, index: int) -> np.ndarray:
        path = self.paths[index]
        if path not in self._cache:
            image = read_image(path)
            self._cache[path] = cv2.resize(image, self.image_size, interpolation=cv2.INTER_AREA)
        return self._cache[path]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.get(int(rng.integers(len(self.paths))))


def read_image(path: str) -> np.ndarray:
    """
    Read an image file as (H, W, 3) uint8 RGB.

    Raises:
        DataError: If the file is missing or not a readable image
    """
    image = cv2.imread(path, cv2.IMREAD_COLOR)
    if image is None:
        raise DataError(f"Cannot read image: {path}")
    return np.ascontiguousarray(image[:, :, ::-1])


def write_image(path: str, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 RGB image; the format follows the file suffix."""
    if not cv2.imwrite(path, np.ascontiguousarray(rgb[:, :, ::-1])):
        raise DataError(f"Cannot write image: {path}")


def apply_screen_transform(points: np.ndarray, transform: Optional[np.ndarray]) -> np.ndarray:
    """Apply a 2x3 affine map to (N, 2) image points."""
    if transform is None:
        return points
    transform = np.asarray(transform, dtype=np.float64)
    return points @ transform[:, :2].T + transform[:, 2]


class _Fragments(NamedTuple):
    pixel: np.ndarray
    triangle: np.ndarray
    weights: np.ndarray
    depth: np.ndarray


def _is_top_left(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # y points down: a top edge is horizontal with the interior below, a left edge goes up
    return ((dy == 0) & (dx > 0)) | (dy < 0)


def scan_triangles(points: np.ndarray, valid: np.ndarray, depth: np.ndarray,
                   triangles: np.ndarray, image_size: Tuple[int, int]) -> Tuple[_Fragments, RenderReport]:
    """
    Enumerate every (pixel, triangle) fragment covered under the top-left fill rule.

    Pixel (x, y) is sampled at its centre (x, y). Weights are perspective-correct and ordered
    like the triangle's vertices; depth is the interpolated camera-space z.
    """
    width, height = image_size
    in_front = valid[triangles].all(axis=1)
    behind = int(np.sum(~in_front))
    tri_ids = np.nonzero(in_front)[0]
    tris = triangles[tri_ids]
    x = points[tris, 0]
    y = points[tris, 1]
    z = depth[tris]
    area = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (y[:, 1] - y[:, 0]) * (x[:, 2] - x[:, 0])
    degenerate = area == 0
    n_degenerate = int(np.sum(degenerate))
    keep = ~degenerate
    tri_ids, x, y, z, area = tri_ids[keep], x[keep], y[keep], z[keep], area[keep]

    # orient every triangle so that its signed area is positive
    swapped = area < 0
    order = np.where(swapped[:, None], np.array([0, 2, 1]), np.array([0, 1, 2]))
    x = np.take_along_axis(x, order, axis=1)
    y = np.take_along_axis(y, order, axis=1)
    z = np.take_along_axis(z, order, axis=1)
    area = np.abs(area)

    x_min = np.clip(np.ceil(x.min(axis=1)), 0, width - 1).astype(np.int64)
    x_max = np.clip(np.floor(x.max(axis=1)), -1, width - 1).astype(np.int64)
    y_min = np.clip(np.ceil(y.min(axis=1)), 0, height - 1).astype(np.int64)
    y_max = np.clip(np.floor(y.max(axis=1)), -1, height - 1).astype(np.int64)
    span_x = np.maximum(x_max - x_min + 1, 0)
    span_y = np.maximum(y_max - y_min + 1, 0)
    counts = span_x * span_y

    report = RenderReport(n_degenerate, behind, len(triangles) > 0 and behind == len(triangles))
    total = int(counts.sum())
    if total == 0:
        empty = _Fragments(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0))
        return empty, report

    owner = np.repeat(np.arange(len(tri_ids)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = (x_min[owner] + local % span_x[owner]).astype(np.float64)
    py = (y_min[owner] + local // span_x[owner]).astype(np.float64)

    x0, x1, x2 = x[owner, 0], x[owner, 1], x[owner, 2]
    y0, y1, y2 = y[owner, 0], y[owner, 1], y[owner, 2]
    e0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    e1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
    e2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    inside = (
        ((e0 > 0) | ((e0 == 0) & _is_top_left(x2 - x1, y2 - y1)))
        & ((e1 > 0) | ((e1 == 0) & _is_top_left(x0 - x2, y0 - y2)))
        & ((e2 > 0) | ((e2 == 0) & _is_top_left(x1 - x0, y1 - y0)))
    )

    owner = owner[inside]
    screen = np.stack([e0[inside], e1[inside], e2[inside]], axis=1) / area[owner, None]
    q = screen / z[owner]
    inv_depth = q.sum(axis=1)
    weights = q / inv_depth[:, None]
    # back to the triangle's own vertex order
    weights = np.take_along_axis(weights, np.argsort(order[owner], axis=1), axis=1)
    pixel = py[inside].astype(np.int64) * width + px[inside].astype(np.int64)
    return _Fragments(pixel, tri_ids[owner], weights, 1.0 / inv_depth), report


def resolve_visibility(fragments: _Fragments) -> np.ndarray:
    """Indices of the winning fragment per pixel: nearest depth, then lowest triangle index."""
    if fragments.pixel.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((fragments.triangle, fragments.depth, fragments.pixel))
    sorted_pixels = fragments.pixel[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = sorted_pixels[1:] != sorted_pixels[:-1]
    return order[first]


def rasterize_geometry(model: MorphableModel, shape: np.ndarray, pose: CameraPose,
                       image_size: Tuple[int, int],
                       screen_transform: Optional[np.ndarray] = None) -> RenderedFace:
    """Rasterize the attribute buffers of an already synthesized shape; colour is left black."""
    width, height = image_size
    if width < MIN_IMAGE_SIZE or height < MIN_IMAGE_SIZE:
        raise ValueError(f"image size must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {width}x{height}")
    projection = project(shape, pose, image_size)
    points = apply_screen_transform(projection.points, screen_transform)
    fragments, report = scan_triangles(points, projection.valid, projection.depth, model.triangles, image_size)
    if report.degenerate_triangles:
        logger.debug(f"Skipped {report.degenerate_triangles} degenerate triangles")
    if report.all_behind_camera:
        logger.warning("Every triangle lies behind the camera; the face mask is empty")

    winners = resolve_visibility(fragments)
    pixel = fragments.pixel[winners]
    triangle = fragments.triangle[winners]
    weights = fragments.weights[winners]

    face_mask = np.zeros(height * width, dtype=bool)
    face_mask[pixel] = True
    triangle_index = np.full(height * width, -1, dtype=np.int32)
    triangle_index[pixel] = triangle
    barycentric = np.zeros((height * width, 3), dtype=np.float32)
    barycentric[pixel] = weights
    depth_buffer = np.zeros(height * width, dtype=np.float32)
    depth_buffer[pixel] = fragments.depth[winners]
    uv_buffer = np.zeros((height * width, 2), dtype=np.float32)
    corner_uv = model.uv_coords[model.triangles[triangle]]
    uv_buffer[pixel] = np.einsum("ni,nij->nj", weights, corner_uv)

    return RenderedFace(
        color=np.zeros((height, width, 3), dtype=np.uint8),
        uv_buffer=uv_buffer.reshape(height, width, 2),
        triangle_index=triangle_index.reshape(height, width),
        barycentric=barycentric.reshape(height, width, 3),
        depth_buffer=depth_buffer.reshape(height, width),
        face_mask=face_mask.reshape(height, width),
        occluder_mask=np.zeros((height, width), dtype=bool),
        report=report,
    )


def rasterize_attributes(model: MorphableModel, coeffs: ShapeCoefficients, pose: CameraPose,
                         image_size: Tuple[int, int],
                         screen_transform: Optional[np.ndarray] = None) -> RenderedFace:
    """Attribute buffers only (uv, triangle, barycentric, depth, mask) for the given shape and pose."""
    return rasterize_geometry(model, synthesize_shape(model, coeffs), pose, image_size, screen_transform)


def vertex_normals(shape: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    p0, p1, p2 = shape[triangles[:, 0]], shape[triangles[:, 1]], shape[triangles[:, 2]]
    face_normals = np.cross(p1 - p0, p2 - p0)
    normals = np.zeros_like(shape)
    for corner in range(3):
        np.add.at(normals, triangles[:, corner], face_normals)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(norms > 0, norms, 1.0)


def _landmark_uv(model: MorphableModel, name: str) -> np.ndarray:
    return model.uv_coords[model.landmark_indices[name]]


def _ellipse(u: np.ndarray, v: np.ndarray, centre: np.ndarray, radii: Tuple[float, float]) -> np.ndarray:
    d = ((u - centre[0]) / radii[0]) ** 2 + ((v - centre[1]) / radii[1]) ** 2
    return np.clip(1.5 - d, 0.0, 1.0)


def build_texture(model: MorphableModel, params: TextureParams, size: int = TEXTURE_SIZE) -> np.ndarray:
    """
    Paint a (size, size, 3) float texture in uv space: skin gradient, brows, eyes, nostrils and lips
    placed at the model's landmark uv positions. Row index follows v, column index follows u.
    """
    grid = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(grid, grid)
    skin = np.asarray(params.skin)
    texture = skin[None, None, :] * (1.0 + params.gradient * (0.5 - v))[..., None]

    def paint(mask: np.ndarray, color: np.ndarray) -> None:
        texture[:] = texture * (1.0 - mask[..., None]) + color * mask[..., None]

    for side in ("r", "l"):
        outer, inner = _landmark_uv(model, f"brow_{side}_0"), _landmark_uv(model, f"brow_{side}_4")
        centre = _landmark_uv(model, f"brow_{side}_2")
        half_width = max(abs(outer[0] - inner[0]) / 2.0, 1e-3)
        paint(_ellipse(u, v, centre, (half_width, 0.012)), skin * (1.0 - params.brow_darkness))
        eye = _landmark_uv(model, f"eye_{side}_center")
        corner_a, corner_b = _landmark_uv(model, f"eye_{side}_0"), _landmark_uv(model, f"eye_{side}_3")
        eye_half = max(abs(corner_a[0] - corner_b[0]) / 2.0, 1e-3)
        paint(_ellipse(u, v, eye, (eye_half, 0.016)), np.array([0.92, 0.92, 0.90]))
        paint(_ellipse(u, v, eye, (eye_half * 0.35, 0.012)), np.asarray(params.iris))
    for name in ("nose_base_1", "nose_base_3"):
        paint(_ellipse(u, v, _landmark_uv(model, name), (0.008, 0.006)), skin * 0.35)
    left, right = _landmark_uv(model, "mouth_outer_0"), _landmark_uv(model, "mouth_outer_6")
    top, bottom = _landmark_uv(model, "mouth_outer_3"), _landmark_uv(model, "mouth_outer_9")
    centre = np.array([(left[0] + right[0]) / 2.0, (top[1] + bottom[1]) / 2.0])
    radii = (max(abs(right[0] - left[0]) / 2.0, 1e-3), max(abs(bottom[1] - top[1]) / 2.0, 1e-3))
    paint(_ellipse(u, v, centre, radii), np.asarray(params.lips))
    return np.clip(texture, 0.0, 1.0)


def sample_texture(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Nearest-texel lookup for (N, 2) uv coordinates."""
    size = texture.shape[0]
    cols = np.clip((uv[:, 0] * size).astype(np.int64), 0, size - 1)
    rows = np.clip((uv[:, 1] * size).astype(np.int64), 0, size - 1)
    return texture[rows, cols]


def draw_occluders(color: np.ndarray, occluders: Sequence[Occluder]) -> Tuple[np.ndarray, np.ndarray]:
    """Paint occluder rectangles over an image and return it with the occluder mask."""
    color = color.copy()
    mask = np.zeros(color.shape[:2], dtype=bool)
    for occ in occluders:
        if occ.x1 <= occ.x0 or occ.y1 <= occ.y0:
            continue
        if occ.patch is not None:
            color[occ.y0:occ.y1, occ.x0:occ.x1] = occ.patch[: occ.y1 - occ.y0, : occ.x1 - occ.x0]
        else:
            color[occ.y0:occ.y1, occ.x0:occ.x1] = np.asarray(occ.color, dtype=np.uint8)
        mask[occ.y0:occ.y1, occ.x0:occ.x1] = True
    return color, mask


def background_image(scene: SceneSpec, image_size: Tuple[int, int]) -> np.ndarray:
    width, height = image_size
    if scene.background is not None:
        return scene.background
    level = int(round(scene.gray_level * 255))
    return np.full((height, width, 3), level, dtype=np.uint8)


def rasterize(model: MorphableModel, scene: SceneSpec, image_size: Tuple[int, int],
              screen_transform: Optional[np.ndarray] = None) -> RenderedFace:
    """
    Render a scene: z-buffered coverage, perspective-correct uv, textured SH shading, background
    compositing, then occluders on top. Occluders only touch colour and occluder_mask.

    Args:
        model: Morphable model
        scene: Scene description
        image_size: (W, H), each at least 32
        screen_transform: Optional 2x3 affine applied to projected points

    Returns:
        RenderedFace; bit-identical for identical inputs
    """
    shape = synthesize_shape(model, scene.coeffs)
    render = rasterize_geometry(model, shape, scene.pose, image_size, screen_transform)
    width, height = image_size

    color = background_image(scene, image_size).astype(np.float64) / 255.0
    mask = render.face_mask.reshape(-1)
    if np.any(mask):
        normals = vertex_normals(shape, model.triangles) @ scene.pose.rotation.T
        tri = render.triangle_index.reshape(-1)[mask]
        weights = render.barycentric.reshape(-1, 3)[mask].astype(np.float64)
        pixel_normals = np.einsum("ni,nij->nj", weights, normals[model.triangles[tri]])
        pixel_normals /= np.maximum(np.linalg.norm(pixel_normals, axis=1, keepdims=True), 1e-12)
        texture = build_texture(model, scene.texture)
        albedo = sample_texture(texture, render.uv_buffer.reshape(-1, 2)[mask])
        shaded = np.clip(albedo * scene.lighting.irradiance(pixel_normals), 0.0, 1.0)
        flat = color.reshape(-1, 3)
        flat[mask] = shaded
        color = flat.reshape(height, width, 3)
    color = np.round(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8)
    color, occluder_mask = draw_occluders(color, scene.occluders)
    return render.with_color(color, occluder_mask)


def template_scene(model: MorphableModel, image_size: Tuple[int, int]) -> SceneSpec:
    """Mean shape, canonical frontal pose, template texture, flat light, gray background."""
    return SceneSpec(
        coeffs=model.zero_coefficients(),
        pose=frontal_pose(model, image_size, TEMPLATE_FACE_FRACTION),
        texture=TextureParams(),
        lighting=LightingSH.flat(),
    )


TEMPLATE_CACHE_SIZE = 8
_TEMPLATE_LOCK = threading.Lock()


@lru_cache(maxsize=TEMPLATE_CACHE_SIZE)
def _render_template(model: MorphableModel, width: int, height: int) -> RenderedFace:
    render = rasterize(model, template_scene(model, (width, height)), (width, height))
    for array in (render.color, render.uv_buffer, render.triangle_index, render.barycentric,
                  render.depth_buffer, render.face_mask, render.occluder_mask):
        array.setflags(write=False)
    logger.debug(f"Rendered target template at {width}x{height}")
    return render


def render_target_template(model: MorphableModel, image_size: Tuple[int, int]) -> RenderedFace:
    """
    The fixed frontal mean-face target image, rendered once per (model, size).

    The most recent TEMPLATE_CACHE_SIZE renders stay cached; their arrays are read-only.
    """
    with _TEMPLATE_LOCK:
        return _render_template(model, int(image_size[0]), int(image_size[1]))


def template_cache_info():
    """Hit, miss and size counters of the template cache."""
    return _render_template.cache_info()


def _truncated_normal(rng: np.random.Generator, std: float, bound: float) -> float:
    for _ in range(100):
        value = std * rng.normal()
        if abs(value) <= bound:
            return float(value)
    return float(np.clip(value, -bound, bound))


def _sample_texture_params(rng: np.random.Generator, jitter: float) -> TextureParams:
    base = TextureParams()
    skin_scale = 1.0 + jitter * rng.uniform(-0.35, 0.15)
    skin = tuple(np.clip(np.asarray(base.skin) * skin_scale + jitter * rng.uniform(-0.05, 0.05, 3), 0, 1))
    lips = tuple(np.clip(np.asarray(base.lips) + jitter * rng.uniform(-0.15, 0.15, 3), 0, 1))
    iris = tuple(np.clip(np.asarray(base.iris) + jitter * rng.uniform(-0.1, 0.3, 3), 0, 1))
    return TextureParams(
        skin=skin,
        lips=lips,
        iris=iris,
        brow_darkness=float(np.clip(base.brow_darkness + jitter * rng.uniform(-0.3, 0.3), 0, 1)),
        gradient=float(base.gradient + jitter * rng.uniform(-0.1, 0.1)),
    )


def face_bounding_box(model: MorphableModel, coeffs: ShapeCoefficients, pose: CameraPose,
                      image_size: Tuple[int, int]) -> Tuple[float, float, float, float]:
    """Projected (x0, y0, x1, y1) box of the landmark vertices, clipped to the image."""
    width, height = image_size
    shape = synthesize_shape(model, coeffs)
    indices = np.array(sorted(model.landmark_indices.values()))
    projection = project(shape[indices], pose, image_size)
    points = projection.points[projection.valid]
    if points.size == 0:
        return 0.0, 0.0, float(width), float(height)
    x0, y0 = np.clip(points.min(axis=0), 0, [width - 1, height - 1])
    x1, y1 = np.clip(points.max(axis=0), 0, [width - 1, height - 1])
    return float(x0), float(y0), float(x1), float(y1)


def sample_occluders(rng: np.random.Generator, config: DataGenConfig,
                     box: Tuple[float, float, float, float], background: np.ndarray) -> Tuple[Occluder, ...]:
    """One or two rectangles covering 2%-20% (configurable) of the face box each."""
    height, width = background.shape[:2]
    x0, y0, x1, y1 = box
    box_area = max((x1 - x0) * (y1 - y0), 1.0)
    occluders = []
    for _ in range(int(rng.integers(1, 3))):
        area = rng.uniform(config.occluder_area_min, config.occluder_area_max) * box_area
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        w = max(1, int(round(np.sqrt(area * aspect))))
        h = max(1, int(round(area / max(w, 1))))
        cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
        left = int(np.clip(round(cx - w / 2.0), 0, width - 1))
        top = int(np.clip(round(cy - h / 2.0), 0, height - 1))
        right, bottom = min(width, left + w), min(height, top + h)
        if rng.random() < 0.5:
            color = tuple(int(c) for c in rng.integers(0, 256, size=3))
            occluders.append(Occluder(left, top, right, bottom, color=color))
        else:
            sx = int(rng.integers(0, width - (right - left) + 1))
            sy = int(rng.integers(0, height - (bottom - top) + 1))
            patch = background[sy:sy + bottom - top, sx:sx + right - left].copy()
            occluders.append(Occluder(left, top, right, bottom, patch=patch))
    return tuple(occluders)


def sample_scene(rng: np.random.Generator, config: DataGenConfig, model: MorphableModel,
                 backgrounds: Optional[BackgroundBank] = None) -> SceneSpec:
    """
    Draw a random scene around the template framing.

    Shape coefficients ~ N(0, (shape_scale * sigma)^2); yaw/pitch/roll from truncated normals;
    the face centre keeps its template camera position up to image-plane and depth jitter;
    lighting mixes flat light with a random bank environment; occluders appear with
    probability p_occ.

    Raises:
        ConfigError: If image backgrounds are requested without a background bank
    """
    image_size = config.size
    scene_seed = int(rng.integers(0, 2 ** 63 - 1))
    alpha_id = config.shape_scale * model.sigma_id * rng.normal(size=model.num_identity)
    alpha_exp = config.shape_scale * model.sigma_exp * rng.normal(size=model.num_expression)
    coeffs = ShapeCoefficients(alpha_id, alpha_exp)

    yaw = _truncated_normal(rng, config.pose_std_yaw, config.yaw_bound)
    pitch = _truncated_normal(rng, config.pose_std_pitch, config.pitch_bound)
    roll = _truncated_normal(rng, config.pose_std_roll, config.roll_bound)
    rotation = euler_to_rotation(yaw, pitch, roll)
    template = frontal_pose(model, image_size, TEMPLATE_FACE_FRACTION)
    pivot = face_centre(model)
    depth_factor = 1.0 + float(np.clip(config.depth_jitter * rng.normal(), -0.3, 0.3))
    shift = config.translation_jitter_px * rng.normal(size=2)
    translation = template.translation + (pivot - rotation @ pivot)
    translation = np.array([
        translation[0] + shift[0] * template.translation[2] / template.f,
        translation[1] + shift[1] * template.translation[2] / template.f,
        translation[2] * depth_factor,
    ])
    pose = CameraPose(template.f, rotation, translation)

    bank = lighting_bank()
    environment = bank[int(rng.integers(len(bank)))]
    scale = rng.uniform(0.8, 1.2)
    mix = config.lighting_mix
    lighting = LightingSH((1.0 - mix) * LightingSH.flat().coefficients + mix * scale * environment.coefficients)
    texture = _sample_texture_params(rng, config.texture_jitter)

    background = None
    use_image = config.background_mode == "image" or (
        config.background_mode == "mixed" and rng.random() < 0.5
    )
    if use_image:
        if backgrounds is None or len(backgrounds) == 0:
            raise ConfigError(f"background_mode={config.background_mode} requires background images")
        background = backgrounds.sample(rng)

    occluders: Tuple[Occluder, ...] = ()
    if rng.random() < config.p_occ:
        box = face_bounding_box(model, coeffs, pose, image_size)
        base = background if background is not None else np.full(
            (image_size[1], image_size[0], 3), int(round(config.gray_level * 255)), dtype=np.uint8
        )
        occluders = sample_occluders(rng, config, box, base)

    return SceneSpec(
        coeffs=coeffs,
        pose=pose,
        texture=texture,
        lighting=lighting,
        background=background,
        gray_level=config.gray_level,
        occluders=occluders,
        rng_seed=scene_seed,
    )


def face_centre(model: MorphableModel) -> np.ndarray:
    """Centroid of the landmark vertices of the mean shape; scenes rotate about it."""
    indices = np.array(sorted(set(model.landmark_indices.values())))
    return model.mean_vertices()[indices].mean(axis=0)


def write_render_buffers(render: RenderedFace, path: str) -> None:
    """
    Write the ``DCRB`` attribute sidecar.

    Layout (little-endian): b"DCRB", u32 version, u32 W, u32 H, f32 uv[H*W*2],
    i32 triangle[H*W], f32 barycentric[H*W*3], f32 depth[H*W], u8 face_mask[H*W],
    u8 occluder_mask[H*W].
    """
    width, height = render.image_size
    parts = [
        BUFFER_MAGIC,
        struct.pack("<III", BUFFER_VERSION, width, height),
        np.ascontiguousarray(render.uv_buffer, dtype="<f4").tobytes(),
        np.ascontiguousarray(render.triangle_index, dtype="<i4").tobytes(),
        np.ascontiguousarray(render.barycentric, dtype="<f4").tobytes(),
        np.ascontiguousarray(render.depth_buffer, dtype="<f4").tobytes(),
        np.ascontiguousarray(render.face_mask, dtype="u1").tobytes(),
        np.ascontiguousarray(render.occluder_mask, dtype="u1").tobytes(),
    ]
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_render_buffers(path: str, color: Optional[np.ndarray] = None) -> RenderedFace:
    """
    Read a ``DCRB`` sidecar; ``color`` (e.g. the matching PNG) fills the colour plane.

    Raises:
        DataError: If the file is missing or malformed
    """
    if not os.path.exists(path):
        raise DataError(f"Render buffer file not found: {path}")
    with open(path, "rb") as f:
        payload = f.read()
    if payload[:4] != BUFFER_MAGIC:
        raise DataError(f"{path} is not a DCRB file")
    version, width, height = struct.unpack_from("<III", payload, 4)
    if version != BUFFER_VERSION:
        raise DataError(f"Unsupported DCRB version {version} in {path}")
    n = width * height
    offset = 16
    planes = []
    for dtype, count in (("<f4", 2 * n), ("<i4", n), ("<f4", 3 * n), ("<f4", n), ("u1", n), ("u1", n)):
        size = np.dtype(dtype).itemsize * count
        if offset + size > len(payload):
            raise DataError(f"Truncated DCRB file {path}")
        planes.append(np.frombuffer(payload, dtype=dtype, count=count, offset=offset).copy())
        offset += size
    uv, tri, bary, depth, face, occ = planes
    if color is None:
        color = np.zeros((height, width, 3), dtype=np.uint8)
    return RenderedFace(
        color=color,
        uv_buffer=uv.astype(np.float32).reshape(height, width, 2),
        triangle_index=tri.astype(np.int32).reshape(height, width),
        barycentric=bary.astype(np.float32).reshape(height, width, 3),
        depth_buffer=depth.astype(np.float32).reshape(height, width),
        face_mask=face.reshape(height, width).astype(bool),
        occluder_mask=occ.reshape(height, width).astype(bool),
    )


class ProjectedLandmark(NamedTuple):
    x: float
    y: float
    visible: bool


def project_landmarks(model: MorphableModel, coeffs: ShapeCoefficients, pose: CameraPose,
                      image_size: Tuple[int, int], names: Optional[Sequence[str]] = None,
                      depth_tolerance: float = 0.05,
                      screen_transform: Optional[np.ndarray] = None) -> Dict[str, ProjectedLandmark]:
    """
    Project named landmark vertices and flag visibility with a depth-buffer test.

    A landmark is visible when it lies in front of the camera, its rounded pixel is covered by
    the face and the buffered depth there is not nearer than the vertex by more than
    ``depth_tolerance`` model units.
    """
    names = list(model.landmark_indices) if names is None else list(names)
    shape = synthesize_shape(model, coeffs)
    render = rasterize_geometry(model, shape, pose, image_size, screen_transform)
    indices = np.array([model.landmark_indices[name] for name in names], dtype=np.int64)
    projection = project(shape[indices], pose, image_size)
    points = apply_screen_transform(projection.points, screen_transform)
    width, height = image_size
    result = {}
    for k, name in enumerate(names):
        x, y = points[k]
        visible = False
        if projection.valid[k]:
            col, row = int(np.rint(x)), int(np.rint(y))
            if 0 <= col < width and 0 <= row < height and render.face_mask[row, col]:
                visible = bool(render.depth_buffer[row, col] >= projection.depth[k] - depth_tolerance)
        result[name] = ProjectedLandmark(float(x), float(y), visible)
    return result
