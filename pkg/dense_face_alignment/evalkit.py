"""
Evaluation: landmark NMS with yaw bucketing and dense-flow endpoint error.
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from dense_face_alignment.errors import DataError
from dense_face_alignment.landmarks import INNER_51

logger = logging.getLogger(__name__)

SUBSETS = ("all", "visible_inner", "visible")

# Absolute yaw buckets in degrees; the last one also takes anything beyond 90
YAW_BUCKETS: Tuple[Tuple[str, float, float], ...] = (
    ("small", 0.0, 30.0),
    ("medium", 30.0, 60.0),
    ("large", 60.0, 90.0),
)


@dataclass
class LandmarkAnnotation:
    """
    Ground truth for one image.

    Attributes:
        points: landmark name -> (x, y) in pixels
        visible: landmark name -> visibility bit
        bbox: face box (x0, y0, x1, y1) in pixels
        yaw: ground-truth yaw in radians, if known
    """

    points: Dict[str, Tuple[float, float]]
    visible: Dict[str, bool]
    bbox: Tuple[float, float, float, float]
    yaw: Optional[float] = None

    def __post_init__(self):
        self.points = {name: (float(x), float(y)) for name, (x, y) in self.points.items()}
        self.visible = {name: bool(self.visible.get(name, True)) for name in self.points}
        self.bbox = tuple(float(v) for v in self.bbox)
        if self.yaw is not None:
            self.yaw = float(self.yaw)
        if not all(math.isfinite(c) for xy in self.points.values() for c in xy):
            raise ValueError("annotation landmark coordinates must be finite")
        if self.box_width <= 0 or self.box_height <= 0:
            raise ValueError(f"annotation bounding box {self.bbox} has no area")

    @property
    def box_width(self) -> float:
        return self.bbox[2] - self.bbox[0]

    @property
    def box_height(self) -> float:
        return self.bbox[3] - self.bbox[1]

    @property
    def normalizer(self) -> float:
        return math.sqrt(self.box_width * self.box_height)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "landmarks": {name: [x, y, self.visible[name]] for name, (x, y) in self.points.items()},
            "bbox": list(self.bbox),
            "yaw": self.yaw,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LandmarkAnnotation":
        landmarks = data["landmarks"]
        return cls(
            points={name: (entry[0], entry[1]) for name, entry in landmarks.items()},
            visible={name: bool(entry[2]) if len(entry) > 2 else True for name, entry in landmarks.items()},
            bbox=tuple(data["bbox"]),
            yaw=data.get("yaw"),
        )


def write_annotation(path: str, annotation: LandmarkAnnotation) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(annotation.to_dict(), f, indent=1, sort_keys=True)


def read_annotation(path: str) -> LandmarkAnnotation:
    """
    Raises:
        DataError: If the file is missing or not a valid annotation
    """
    if not os.path.exists(path):
        raise DataError(f"Annotation file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return LandmarkAnnotation.from_dict(json.load(f))
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise DataError(f"Invalid annotation {path}: {str(e)}")


def select_landmarks(gt: LandmarkAnnotation, subset: str) -> List[str]:
    """Names of the ground-truth landmarks included in an evaluation subset."""
    if subset == "all":
        return list(gt.points)
    if subset == "visible":
        return [name for name in gt.points if gt.visible[name]]
    if subset == "visible_inner":
        inner = set(INNER_51)
        return [name for name in gt.points if gt.visible[name] and name in inner]
    raise ValueError(f"unknown landmark subset '{subset}', expected one of {', '.join(SUBSETS)}")


def nms(pred: Mapping[str, Sequence[float]], gt: LandmarkAnnotation, subset: str = "all") -> float:
    """
    Normalized mean error in percent: mean pixel error over the selected landmarks divided by
    sqrt(box_w * box_h).

    Raises:
        ValueError: If the subset is empty or predictions lack selected landmarks
    """
    names = select_landmarks(gt, subset)
    if not names:
        raise ValueError(f"landmark subset '{subset}' is empty for this annotation")
    missing = [name for name in names if name not in pred]
    if missing:
        raise ValueError(f"prediction lacks landmarks: {', '.join(missing)}")
    predicted = np.array([pred[name][:2] for name in names], dtype=np.float64)
    truth = np.array([gt.points[name] for name in names], dtype=np.float64)
    errors = np.hypot(predicted[:, 0] - truth[:, 0], predicted[:, 1] - truth[:, 1])
    return float(errors.mean() / gt.normalizer * 100.0)


@dataclass
class EvalResult:
    """Per-image NMS with yaw-bucket means and counts."""

    per_image: List[float]
    yaw_degrees: List[float]
    bucket_means: Dict[str, float] = field(default_factory=dict)
    bucket_counts: Dict[str, int] = field(default_factory=dict)
    overall: float = float("nan")
    beyond_90: int = 0

    def to_table(self) -> str:
        lines = [f"{'bucket':<16}{'count':>8}{'NMS %':>10}"]
        for name, low, high in YAW_BUCKETS:
            mean = self.bucket_means[name]
            shown = "-" if math.isnan(mean) else f"{mean:.3f}"
            lines.append(f"{name + f' [{low:.0f},{high:.0f}]':<16}{self.bucket_counts[name]:>8}{shown:>10}")
        overall = "-" if math.isnan(self.overall) else f"{self.overall:.3f}"
        lines.append(f"{'overall':<16}{len(self.per_image):>8}{overall:>10}")
        if self.beyond_90:
            lines.append(f"note: {self.beyond_90} image(s) beyond 90 degrees counted as large")
        return "\n".join(lines)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["bucket", "count", "nms"])
            for name, _, _ in YAW_BUCKETS:
                writer.writerow([name, self.bucket_counts[name], f"{self.bucket_means[name]:.10g}"])
            writer.writerow(["overall", len(self.per_image), f"{self.overall:.10g}"])


def yaw_bucket(yaw_degrees: float) -> str:
    magnitude = abs(yaw_degrees)
    for name, low, high in YAW_BUCKETS[:-1]:
        if low <= magnitude < high:
            return name
    return YAW_BUCKETS[-1][0]


def bucket_by_yaw(results: Sequence[float], yaws: Sequence[float]) -> EvalResult:
    """
    Group per-image NMS values by absolute yaw in degrees.

    Buckets are [0, 30), [30, 60) and [60, 90]; yaws beyond 90 go to the large bucket and are
    counted in ``beyond_90``. Empty buckets have a NaN mean.
    """
    if len(results) != len(yaws):
        raise ValueError(f"{len(results)} results but {len(yaws)} yaws")
    per_image = [float(r) for r in results]
    yaw_degrees = [float(y) for y in yaws]
    groups: Dict[str, List[float]] = {name: [] for name, _, _ in YAW_BUCKETS}
    beyond = 0
    for value, yaw in zip(per_image, yaw_degrees):
        groups[yaw_bucket(yaw)].append(value)
        if abs(yaw) > 90.0:
            beyond += 1
    if beyond:
        logger.info(f"{beyond} image(s) have |yaw| > 90 degrees; counted in the large bucket")
    return EvalResult(
        per_image=per_image,
        yaw_degrees=yaw_degrees,
        bucket_means={name: float(np.mean(v)) if v else float("nan") for name, v in groups.items()},
        bucket_counts={name: len(v) for name, v in groups.items()},
        overall=float(np.mean(per_image)) if per_image else float("nan"),
        beyond_90=beyond,
    )


class FlowScore(NamedTuple):
    epe: float
    precision: float
    recall: float
    evaluated: int


def flow_epe(pred_flow: np.ndarray, pred_match: np.ndarray, gt_flow: np.ndarray, gt_mask: np.ndarray,
             threshold: float = 0.5) -> FlowScore:
    """
    Mean endpoint error over pixels that are matchable in the ground truth and predicted
    matchable, plus precision / recall of the thresholded matchability.

    Raises:
        ValueError: If the planes differ in size
        DataError: If no pixel is both predicted and truly matchable
    """
    if pred_flow.shape != gt_flow.shape or pred_match.shape != gt_mask.shape \
            or pred_flow.shape[:2] != pred_match.shape:
        raise ValueError(
            f"plane sizes differ: flow {pred_flow.shape} / {gt_flow.shape}, match {pred_match.shape} / {gt_mask.shape}"
        )
    predicted = pred_match >= threshold
    truth = gt_mask >= 0.5
    both = predicted & truth
    n_both = int(both.sum())
    if n_both == 0:
        raise DataError(
            f"No pixel is both predicted and truly matchable "
            f"(predicted {int(predicted.sum())}, ground truth {int(truth.sum())})"
        )
    diff = pred_flow.astype(np.float64) - gt_flow.astype(np.float64)
    errors = np.hypot(diff[..., 0], diff[..., 1])
    return FlowScore(
        epe=float(errors[both].mean()),
        precision=n_both / int(predicted.sum()),
        recall=n_both / int(truth.sum()),
        evaluated=n_both,
    )


def write_per_image_csv(path: str, rows: Sequence[Mapping[str, Any]]) -> None:
    """Write one CSV row per image; columns follow the first row's keys."""
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
