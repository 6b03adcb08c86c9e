"""
Landmark naming tables.

The 68-point set follows the usual jaw / brows / nose / eyes / mouth ordering, with names
instead of indices. Anchors are given in the procedural head parameterization
(azimuth in radians, normalized height in [-1, 1] with -1 at the top of the head); negative
azimuth is the subject's right side.
"""

from typing import Dict, List, Tuple


def _jaw() -> List[Tuple[str, float, float]]:
    points = []
    for k in range(17):
        theta = -1.25 + k * 2.5 / 16
        h = 0.12 + 0.62 * (1.0 - (theta / 1.3) ** 2)
        points.append((f"jaw_{k}", theta, h))
    return points


_BROW_R = [(-0.55, -0.36), (-0.45, -0.40), (-0.34, -0.41), (-0.23, -0.40), (-0.12, -0.37)]
_EYE_R = [(-0.47, -0.22), (-0.38, -0.27), (-0.27, -0.27), (-0.19, -0.22), (-0.27, -0.18), (-0.38, -0.18)]
_MOUTH_OUTER = [
    (-0.30, 0.42), (-0.19, 0.37), (-0.08, 0.35), (0.0, 0.36), (0.08, 0.35), (0.19, 0.37),
    (0.30, 0.42), (0.19, 0.48), (0.08, 0.50), (0.0, 0.51), (-0.08, 0.50), (-0.19, 0.48),
]
_MOUTH_INNER = [
    (-0.24, 0.42), (-0.09, 0.40), (0.0, 0.40), (0.09, 0.40),
    (0.24, 0.42), (0.09, 0.44), (0.0, 0.45), (-0.09, 0.44),
]


def _build_anchors() -> List[Tuple[str, float, float]]:
    anchors = _jaw()
    anchors += [(f"brow_r_{i}", t, h) for i, (t, h) in enumerate(_BROW_R)]
    # left brow runs inner to outer, mirroring the right one
    anchors += [(f"brow_l_{i}", -t, h) for i, (t, h) in enumerate(reversed(_BROW_R))]
    anchors += [(f"nose_bridge_{i}", 0.0, h) for i, h in enumerate((-0.24, -0.14, -0.04, 0.06))]
    anchors += [
        (f"nose_base_{i}", t, h)
        for i, (t, h) in enumerate([(-0.14, 0.17), (-0.07, 0.19), (0.0, 0.20), (0.07, 0.19), (0.14, 0.17)])
    ]
    anchors += [(f"eye_r_{i}", t, h) for i, (t, h) in enumerate(_EYE_R)]
    left_eye = [(-t, h) for t, h in _EYE_R]
    # inner corner first, then clockwise as seen in the image
    left_eye = [left_eye[3], left_eye[2], left_eye[1], left_eye[0], left_eye[5], left_eye[4]]
    anchors += [(f"eye_l_{i}", t, h) for i, (t, h) in enumerate(left_eye)]
    anchors += [(f"mouth_outer_{i}", t, h) for i, (t, h) in enumerate(_MOUTH_OUTER)]
    anchors += [(f"mouth_inner_{i}", t, h) for i, (t, h) in enumerate(_MOUTH_INNER)]
    return anchors


LANDMARKS_68: List[str] = [name for name, _, _ in _build_anchors()]

CONTOUR_17: List[str] = [name for name in LANDMARKS_68 if name.startswith("jaw_")]

INNER_51: List[str] = [name for name in LANDMARKS_68 if not name.startswith("jaw_")]

EXTRA_ANCHORS: List[Tuple[str, float, float]] = [
    ("eye_r_center", -0.33, -0.22),
    ("eye_l_center", 0.33, -0.22),
    ("ear_r", -1.55, 0.0),
    ("ear_l", 1.55, 0.0),
]

LANDMARKS_21: List[str] = [
    "brow_r_0", "brow_r_2", "brow_r_4", "brow_l_0", "brow_l_2", "brow_l_4",
    "eye_r_0", "eye_r_center", "eye_r_3", "eye_l_0", "eye_l_center", "eye_l_3",
    "ear_r", "nose_base_0", "nose_bridge_3", "nose_base_4", "ear_l",
    "mouth_outer_0", "mouth_outer_3", "mouth_outer_6", "jaw_8",
]

NOSE_TIP = "nose_bridge_3"

LANDMARK_ANCHORS: Dict[str, Tuple[float, float]] = {
    name: (theta, h) for name, theta, h in _build_anchors() + EXTRA_ANCHORS
}

ALL_LANDMARKS: List[str] = list(LANDMARK_ANCHORS)
