"""
Diagnostic images: flow colourization with the standard optical-flow colour wheel, and
wireframe / landmark overlays of a fitted model.
"""

import logging
from functools import lru_cache
from typing import Mapping, Optional

import cv2
import numpy as np

from dense_face_alignment.facemodel import CameraPose, MorphableModel, ShapeCoefficients, project, synthesize_shape
from dense_face_alignment.raster import ProjectedLandmark

logger = logging.getLogger(__name__)

# Hue segment lengths: red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
WHEEL_SEGMENTS = (15, 6, 4, 11, 13, 6)

WIREFRAME_COLOR = (0, 255, 0)
VISIBLE_LANDMARK_COLOR = (255, 0, 0)
HIDDEN_LANDMARK_COLOR = (255, 255, 0)


@lru_cache(maxsize=1)
def color_wheel() -> np.ndarray:
    """(55, 3) RGB wheel sampled at equal hue steps, as float values in [0, 255]."""
    ry, yg, gc, cb, bm, mr = WHEEL_SEGMENTS
    wheel = np.zeros((sum(WHEEL_SEGMENTS), 3))
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    wheel.flags.writeable = False
    return wheel


def flow_to_color(flow: np.ndarray, mask: Optional[np.ndarray] = None,
                  max_magnitude: Optional[float] = None) -> np.ndarray:
    """
    Colourize a (H, W, 2) flow field: hue encodes direction, saturation encodes magnitude
    relative to ``max_magnitude`` (the largest magnitude in the field if not given).

    Pixels outside ``mask`` are black.

    Returns:
        (H, W, 3) uint8 RGB
    """
    u = flow[..., 0].astype(np.float64)
    v = flow[..., 1].astype(np.float64)
    valid = np.isfinite(u) & np.isfinite(v)
    if mask is not None:
        valid &= mask.astype(bool)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    magnitude = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(magnitude.max()) if valid.any() else 0.0
    scale = max(max_magnitude, 1e-9)
    u, v, magnitude = u / scale, v / scale, np.minimum(magnitude / scale, 1.0)

    wheel = color_wheel()
    n = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    position = (angle + 1.0) / 2.0 * (n - 1)
    k0 = np.floor(position).astype(np.int64)
    k1 = (k0 + 1) % n
    frac = (position - k0)[..., None]
    color = ((1.0 - frac) * wheel[k0] + frac * wheel[k1]) / 255.0
    color = 1.0 - magnitude[..., None] * (1.0 - color)
    color[~valid] = 0.0
    return np.clip(np.floor(255.0 * color), 0, 255).astype(np.uint8)


def match_to_gray(match: np.ndarray) -> np.ndarray:
    """Matchability in [0, 1] as an (H, W, 3) uint8 grey image."""
    gray = np.clip(np.rint(255.0 * np.asarray(match, dtype=np.float64)), 0, 255).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=2)


def unique_edges(triangles: np.ndarray) -> np.ndarray:
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    return np.unique(np.sort(edges, axis=1), axis=0)


def draw_wireframe(image: np.ndarray, model: MorphableModel, coeffs: ShapeCoefficients,
                   pose: CameraPose, color=WIREFRAME_COLOR) -> np.ndarray:
    """Composite the projected mesh edges over a copy of ``image`` (RGB uint8)."""
    height, width = image.shape[:2]
    canvas = np.ascontiguousarray(image.copy())
    projection = project(synthesize_shape(model, coeffs), pose, (width, height))
    edges = unique_edges(model.triangles)
    keep = projection.valid[edges[:, 0]] & projection.valid[edges[:, 1]]
    points = np.rint(np.nan_to_num(projection.points)).astype(np.int64)
    for a, b in edges[keep]:
        cv2.line(canvas, (int(points[a, 0]), int(points[a, 1])), (int(points[b, 0]), int(points[b, 1])),
                 color, 1, cv2.LINE_8)
    skipped = int(np.sum(~keep))
    if skipped:
        logger.debug(f"Wireframe skipped {skipped} edges behind the camera")
    return canvas


def draw_landmarks(image: np.ndarray, landmarks: Mapping[str, ProjectedLandmark], radius: int = 1) -> np.ndarray:
    """Dots at landmark positions; hidden landmarks use a different colour."""
    canvas = np.ascontiguousarray(image.copy())
    for mark in landmarks.values():
        if not (np.isfinite(mark.x) and np.isfinite(mark.y)):
            continue
        color = VISIBLE_LANDMARK_COLOR if mark.visible else HIDDEN_LANDMARK_COLOR
        cv2.circle(canvas, (int(round(mark.x)), int(round(mark.y))), radius, color, -1)
    return canvas
