"""
Shared models and scenes for the tests.
"""

from functools import lru_cache
from typing import Tuple

import numpy as np

from dense_face_alignment.facemodel import CameraPose, MorphableModel, euler_to_rotation, frontal_pose
from dense_face_alignment.procedural import ModelGenConfig, generate_model
from dense_face_alignment.raster import TEMPLATE_FACE_FRACTION, face_centre


@lru_cache(maxsize=None)
def default_model() -> MorphableModel:
    return generate_model(ModelGenConfig())


@lru_cache(maxsize=None)
def tiny_model() -> MorphableModel:
    """Coarse grid with two identity and two expression columns."""
    return generate_model(ModelGenConfig(n_azimuth=17, n_elevation=15, k_id=2, k_exp=2))


def turned_pose(model: MorphableModel, image_size: Tuple[int, int], yaw: float, pitch: float = 0.0,
                roll: float = 0.0) -> CameraPose:
    """Template framing rotated about the face centre."""
    template = frontal_pose(model, image_size, TEMPLATE_FACE_FRACTION)
    rotation = euler_to_rotation(yaw, pitch, roll)
    pivot = face_centre(model)
    return CameraPose(template.f, rotation, template.translation + pivot - rotation @ pivot)


def geodesic(r1: np.ndarray, r2: np.ndarray) -> float:
    cos = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))
