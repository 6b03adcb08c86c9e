"""
Ground-truth dense correspondence by uv nearest-matching, and the synthetic / imported
training-pair pipeline built on it.
"""

import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy.spatial import cKDTree

from dense_face_alignment.errors import DataError
from dense_face_alignment.evalkit import LandmarkAnnotation, write_annotation
from dense_face_alignment.facemodel import MorphableModel
from dense_face_alignment.landmarks import LANDMARKS_68
from dense_face_alignment.raster import (
    BackgroundBank,
    DataGenConfig,
    Occluder,
    RenderedFace,
    SceneSpec,
    draw_occluders,
    project_landmarks,
    rasterize,
    rasterize_attributes,
    read_image,
    render_target_template,
    sample_scene,
    write_image,
)

if TYPE_CHECKING:
    from dense_face_alignment.fit import FitParameters

logger = logging.getLogger(__name__)

FLOW_MAGIC = b"DCFL"
FLOW_VERSION = 1
MANIFEST_NAME = "manifest.txt"

# Candidates fetched from the tree before exact re-ranking
_UV_CANDIDATES = 8
# Relative and absolute slack on the nearest tree distance when collecting tied candidates
_TIE_TOLERANCE = 1e-9


class UvIndex:
    """
    Nearest-uv lookup over the covered pixels of a target render.

    Pixels are stored in raster order, so the lowest storage index is the lowest (y, x) pixel;
    exact distance ties resolve to it.
    """

    def __init__(self, target: RenderedFace):
        rows, cols = np.nonzero(target.face_mask)
        if rows.size == 0:
            raise DataError("Target render has an empty face mask; nothing to match against")
        self.image_size = target.image_size
        self.pixels = np.stack([cols, rows], axis=1).astype(np.float64)
        self.uv = target.uv_buffer[rows, cols].astype(np.float64)
        self._tree = cKDTree(self.uv)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def _rank(self, uv: np.ndarray, candidates: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        candidates = np.sort(candidates, axis=1)
        diff = uv[:, None, :] - self.uv[candidates]
        sq = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]
        best = np.argmin(sq, axis=1)
        rows = np.arange(uv.shape[0])
        return np.sqrt(sq[rows, best]), candidates[rows, best]

    def query(self, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Args:
            uv: (N, 2) query coordinates

        Returns:
            Euclidean uv distances (N,) and indices (N,) into ``pixels``
        """
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        if uv.shape[0] == 0:
            return np.zeros(0), np.zeros(0, dtype=np.int64)
        k = min(_UV_CANDIDATES, len(self))
        tree_distance, candidates = self._tree.query(uv, k=k)
        tree_distance = np.asarray(tree_distance).reshape(uv.shape[0], k)
        candidates = np.asarray(candidates).reshape(uv.shape[0], k)
        distance, nearest = self._rank(uv, candidates)
        if k == len(self):
            return distance, nearest

        # the k-th candidate may still tie the nearest: re-rank the whole ball around it
        radius = tree_distance[:, 0] * (1.0 + _TIE_TOLERANCE) + _TIE_TOLERANCE
        for row in np.nonzero(tree_distance[:, -1] <= radius)[0]:
            ball = np.asarray(self._tree.query_ball_point(uv[row], r=radius[row]), dtype=np.int64)
            row_distance, row_nearest = self._rank(uv[row:row + 1], ball[None, :])
            distance[row], nearest[row] = row_distance[0], row_nearest[0]
        return distance, nearest


def compute_gt_correspondence(source: RenderedFace, target: RenderedFace, uv_threshold: float = 0.015,
                              index: Optional[UvIndex] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Match every covered source pixel to the target pixel with the nearest uv coordinate.

    Occluders in the source are ignored: an occluded face pixel stays matchable.

    Args:
        source: Source render (only its attribute buffers are used)
        target: Target render
        uv_threshold: Matches with uv distance >= threshold are unmatchable
        index: Prebuilt UvIndex of ``target``

    Returns:
        flow (H, W, 2) float32 of target minus source pixel, and a binary float32 mask (H, W)

    Raises:
        ValueError: If the two renders differ in size
        DataError: If the target face mask is empty
    """
    if source.image_size != target.image_size:
        raise ValueError(f"render sizes differ: {source.image_size} vs {target.image_size}")
    if index is None:
        index = UvIndex(target)
    width, height = source.image_size
    flow = np.zeros((height, width, 2), dtype=np.float32)
    mask = np.zeros((height, width), dtype=np.float32)
    rows, cols = np.nonzero(source.face_mask)
    distance, nearest = index.query(source.uv_buffer[rows, cols])
    ok = distance < uv_threshold
    rows, cols, nearest = rows[ok], cols[ok], nearest[ok]
    flow[rows, cols, 0] = index.pixels[nearest, 0] - cols
    flow[rows, cols, 1] = index.pixels[nearest, 1] - rows
    mask[rows, cols] = 1.0
    return flow, mask


@dataclass(eq=False)
class TrainingPair:
    """Source and target RGB images with ground-truth flow and matchability."""

    source: np.ndarray
    target: np.ndarray
    gt_flow: np.ndarray
    gt_mask: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        planes = (self.source.shape[:2], self.target.shape[:2], self.gt_flow.shape[:2], self.gt_mask.shape)
        if len(set(planes)) != 1:
            raise ValueError(f"training pair planes differ in size: {planes}")

    @property
    def provenance(self) -> str:
        return self.meta.get("provenance", "synthetic")


@dataclass(frozen=True)
class CropPerturbation:
    """Image-plane scale, shift and in-plane rotation about the image centre."""

    scale: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0
    rotation: float = 0.0

    @classmethod
    def sample(cls, rng: np.random.Generator, max_scale: float = 0.1, max_shift: float = 8.0,
               max_rotation: float = 0.2) -> "CropPerturbation":
        return cls(
            scale=1.0 + rng.uniform(-max_scale, max_scale),
            shift_x=rng.uniform(-max_shift, max_shift),
            shift_y=rng.uniform(-max_shift, max_shift),
            rotation=rng.uniform(-max_rotation, max_rotation),
        )

    def matrix(self, image_size: Tuple[int, int]) -> np.ndarray:
        """2x3 forward map from original to perturbed pixel coordinates."""
        width, height = image_size
        m = cv2.getRotationMatrix2D((width / 2.0, height / 2.0), float(np.degrees(self.rotation)), self.scale)
        m[0, 2] += self.shift_x
        m[1, 2] += self.shift_y
        return m

    def warp(self, image: np.ndarray) -> np.ndarray:
        height, width = image.shape[:2]
        return cv2.warpAffine(image, self.matrix((width, height)), (width, height),
                              flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def write_flow(path: str, flow: np.ndarray, mask: np.ndarray) -> None:
    """
    Write a ``DCFL`` file: b"DCFL", u32 version, u32 W, u32 H, f32 flow[H*W*2], u8 mask[H*W]
    (mask stored as round(255 * m)).
    """
    height, width = mask.shape
    quantized = np.round(np.clip(mask, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC + struct.pack("<III", FLOW_VERSION, width, height))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())
        f.write(quantized.tobytes())


def read_flow(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Raises:
        DataError: If the file is missing or malformed
    """
    if not os.path.exists(path):
        raise DataError(f"Flow file not found: {path}")
    with open(path, "rb") as f:
        payload = f.read()
    if payload[:4] != FLOW_MAGIC or len(payload) < 16:
        raise DataError(f"{path} is not a DCFL file")
    version, width, height = struct.unpack_from("<III", payload, 4)
    if version != FLOW_VERSION:
        raise DataError(f"Unsupported DCFL version {version} in {path}")
    n = width * height
    if len(payload) != 16 + 8 * n + n:
        raise DataError(f"DCFL file {path} has {len(payload)} bytes, expected {16 + 9 * n}")
    flow = np.frombuffer(payload, dtype="<f4", count=2 * n, offset=16).astype(np.float32)
    mask = np.frombuffer(payload, dtype=np.uint8, count=n, offset=16 + 8 * n).astype(np.float32) / 255.0
    return flow.reshape(height, width, 2), mask.reshape(height, width)


def pair_directory(root: str, index: int) -> str:
    return os.path.join(root, "pairs", f"{index:06d}")


def pair_complete(root: str, index: int) -> bool:
    directory = pair_directory(root, index)
    return all(os.path.exists(os.path.join(directory, name)) for name in ("source.png", "target.png", "gt.dcfl"))


def write_pair(root: str, index: int, pair: TrainingPair) -> None:
    directory = pair_directory(root, index)
    os.makedirs(directory, exist_ok=True)
    write_image(os.path.join(directory, "source.png"), pair.source)
    write_image(os.path.join(directory, "target.png"), pair.target)
    # the flow file marks the directory complete, so it goes last
    partial = os.path.join(directory, "gt.dcfl.part")
    write_flow(partial, pair.gt_flow, pair.gt_mask)
    os.replace(partial, os.path.join(directory, "gt.dcfl"))


def read_pair(root: str, index: int, provenance: str = "synthetic") -> TrainingPair:
    directory = pair_directory(root, index)
    flow, mask = read_flow(os.path.join(directory, "gt.dcfl"))
    return TrainingPair(
        source=read_image(os.path.join(directory, "source.png")),
        target=read_image(os.path.join(directory, "target.png")),
        gt_flow=flow,
        gt_mask=mask,
        meta={"index": index, "provenance": provenance},
    )


def write_manifest(root: str, entries: Sequence[Tuple[int, str]]) -> str:
    """Write one ``NNNNNN provenance`` line per pair; returns the manifest path."""
    path = os.path.join(root, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        for index, provenance in entries:
            f.write(f"{index:06d} {provenance}\n")
    return path


def read_manifest(root: str) -> List[Tuple[int, str]]:
    """
    Raises:
        DataError: If the manifest is missing or has malformed lines
    """
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"Dataset manifest not found: {path}")
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 or not parts[0].isdigit():
                raise DataError(f"Malformed manifest line {line_number} in {path}: {line.strip()}")
            entries.append((int(parts[0]), parts[1]))
    return entries


class PairDataset:
    """Training pairs listed in a dataset manifest, loaded on access."""

    def __init__(self, root: str):
        self.root = root
        self.entries = read_manifest(root)
        if not self.entries:
            raise DataError(f"Dataset manifest {os.path.join(root, MANIFEST_NAME)} lists no pairs")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, position: int) -> TrainingPair:
        index, provenance = self.entries[position]
        return read_pair(self.root, index, provenance)


def make_synthetic_pair(model: MorphableModel, config: DataGenConfig, index: int,
                        backgrounds: Optional[BackgroundBank] = None) -> TrainingPair:
    """
    Build pair ``index`` of the stream seeded by ``config.seed``.

    Pre-training pairs sample both scenes; fine-tuning pairs fix the target to the frontal
    mean-face template and may perturb the source crop.

    Raises:
        DataError: Wrapping any rendering failure, with the pair index
    """
    rng = np.random.default_rng([config.seed, index])
    image_size = config.size
    try:
        source_scene = sample_scene(rng, config, model, backgrounds)
        meta: Dict[str, Any] = {
            "index": index,
            "provenance": "synthetic",
            "stage": config.stage,
            "source_scene": source_scene,
            "occluded": bool(source_scene.occluders),
        }
        if config.stage == "finetune":
            target = render_target_template(model, image_size)
            transform = None
            if config.perturb_finetune:
                perturbation = CropPerturbation.sample(rng)
                transform = perturbation.matrix(image_size)
                meta["perturbation"] = perturbation
            source = rasterize(model, source_scene, image_size, transform)
        else:
            target_scene = sample_scene(rng, config, model, backgrounds)
            meta["target_scene"] = target_scene
            source = rasterize(model, source_scene, image_size)
            target = rasterize(model, target_scene, image_size)
        flow, mask = compute_gt_correspondence(source, target, config.uv_threshold)
    except (ValueError, DataError) as e:
        raise DataError(f"Failed to build pair {index}: {str(e)}") from e
    return TrainingPair(source.color, target.color, flow, mask, meta)


def build_synthetic_set(model: MorphableModel, config: DataGenConfig, n_pairs: int,
                        backgrounds: Optional[BackgroundBank] = None) -> Iterator[TrainingPair]:
    """Lazily yield ``n_pairs`` synthetic training pairs; deterministic given ``config.seed``."""
    for index in range(n_pairs):
        yield make_synthetic_pair(model, config, index, backgrounds)


def _check_inside_crop(model: MorphableModel, fit_params: "FitParameters", image_size: Tuple[int, int],
                       transform: Optional[np.ndarray]) -> None:
    landmarks = project_landmarks(model, fit_params.coeffs, fit_params.pose, image_size,
                                  screen_transform=transform)
    width, height = image_size
    for name, mark in landmarks.items():
        if not np.isfinite(mark.x) or not np.isfinite(mark.y):
            raise DataError(f"Fitted face places landmark {name} behind the camera")
        if mark.x < 0:
            raise DataError(f"Fitted face projects outside the crop: {name} at x={mark.x:.1f} < 0 (left bound)")
        if mark.x > width - 1:
            raise DataError(
                f"Fitted face projects outside the crop: {name} at x={mark.x:.1f} > {width - 1} (right bound)"
            )
        if mark.y < 0:
            raise DataError(f"Fitted face projects outside the crop: {name} at y={mark.y:.1f} < 0 (top bound)")
        if mark.y > height - 1:
            raise DataError(
                f"Fitted face projects outside the crop: {name} at y={mark.y:.1f} > {height - 1} (bottom bound)"
            )


def import_fitted_image(image: np.ndarray, fit_params: "FitParameters", model: MorphableModel,
                        uv_threshold: float = 0.015, perturbation: Optional[CropPerturbation] = None,
                        occluders: Sequence[Occluder] = ()) -> TrainingPair:
    """
    Turn a photograph with an externally fitted model into a fine-tuning pair.

    Only the attribute buffers are rasterized under the fit; the photograph (optionally crop
    perturbed and overdrawn with occluders) is the source colour, and the target is the frontal
    template.

    Args:
        image: (H, W, 3) uint8 RGB photograph
        fit_params: Pose and coefficients fitted to the photograph
        model: Morphable model the fit refers to
        uv_threshold: Matchability threshold in uv units
        perturbation: Optional crop perturbation applied to image and geometry alike
        occluders: Rectangles drawn over the (perturbed) photograph

    Raises:
        DataError: If a landmark projects outside the crop, naming the violated bound
    """
    height, width = image.shape[:2]
    image_size = (width, height)
    transform = None if perturbation is None else perturbation.matrix(image_size)
    _check_inside_crop(model, fit_params, image_size, transform)
    attributes = rasterize_attributes(model, fit_params.coeffs, fit_params.pose, image_size, transform)
    color = image if perturbation is None else perturbation.warp(image)
    color, _ = draw_occluders(color, occluders)
    target = render_target_template(model, image_size)
    flow, mask = compute_gt_correspondence(attributes, target, uv_threshold)
    meta = {"provenance": "imported", "fit": fit_params, "perturbation": perturbation}
    return TrainingPair(color, target.color, flow, mask, meta)


def benchmark_directory(root: str, index: int) -> str:
    return os.path.join(root, "bench", f"{index:06d}")


def make_benchmark_item(model: MorphableModel, config: DataGenConfig, index: int,
                        backgrounds: Optional[BackgroundBank] = None
                        ) -> Tuple[np.ndarray, LandmarkAnnotation, np.ndarray, np.ndarray]:
    """One synthetic benchmark image with landmark ground truth and its flow to the template."""
    rng = np.random.default_rng([config.seed, index])
    image_size = config.size
    scene: SceneSpec = sample_scene(rng, config, model, backgrounds)
    render = rasterize(model, scene, image_size)
    target = render_target_template(model, image_size)
    flow, mask = compute_gt_correspondence(render, target, config.uv_threshold)
    names = [name for name in LANDMARKS_68 if name in model.landmark_indices]
    marks = project_landmarks(model, scene.coeffs, scene.pose, image_size, names=names)
    xy = np.array([[marks[name].x, marks[name].y] for name in names])
    bbox = (float(xy[:, 0].min()), float(xy[:, 1].min()), float(xy[:, 0].max()), float(xy[:, 1].max()))
    annotation = LandmarkAnnotation(
        points={name: (marks[name].x, marks[name].y) for name in names},
        visible={name: marks[name].visible for name in names},
        bbox=bbox,
        yaw=scene.pose.yaw,
    )
    return render.color, annotation, flow, mask


def _write_benchmark_item(root: str, index: int, item) -> None:
    image, annotation, flow, mask = item
    directory = benchmark_directory(root, index)
    os.makedirs(directory, exist_ok=True)
    write_image(os.path.join(directory, "image.png"), image)
    write_annotation(os.path.join(directory, "annotation.json"), annotation)
    partial = os.path.join(directory, "gt.dcfl.part")
    write_flow(partial, flow, mask)
    os.replace(partial, os.path.join(directory, "gt.dcfl"))


def benchmark_complete(root: str, index: int) -> bool:
    directory = benchmark_directory(root, index)
    return all(os.path.exists(os.path.join(directory, name)) for name in ("image.png", "annotation.json", "gt.dcfl"))


def generate_dataset(model: MorphableModel, config: DataGenConfig, root: str, threads: int = 1) -> int:
    """
    Write ``config.count`` items for ``config.stage`` under ``root``; complete items from an
    earlier run are kept. Returns the number of items newly written.

    Items are computed in a worker pool but written in index order, so the output does not
    depend on the thread count.
    """
    backgrounds = BackgroundBank.from_config(config)
    benchmark = config.stage == "benchmark"
    complete = benchmark_complete if benchmark else pair_complete
    pending = [i for i in range(config.count) if not complete(root, i)]
    skipped = config.count - len(pending)
    if skipped:
        logger.info(f"Resuming: {skipped} of {config.count} items already present")

    def build(index: int):
        if benchmark:
            return make_benchmark_item(model, config, index, backgrounds)
        return make_synthetic_pair(model, config, index, backgrounds)

    written = 0
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        for index, item in zip(pending, executor.map(build, pending)):
            if benchmark:
                _write_benchmark_item(root, index, item)
            else:
                write_pair(root, index, item)
            written += 1
            if written % 100 == 0:
                logger.info(f"Wrote {written}/{len(pending)} items")

    if not benchmark:
        write_manifest(root, [(i, "synthetic") for i in range(config.count)])
    logger.info(f"Dataset in {root}: {config.count} {config.stage} items ({written} new)")
    return written


def list_benchmark(root: str) -> List[int]:
    """
    Raises:
        DataError: If ``root`` holds no complete benchmark items
    """
    directory = os.path.join(root, "bench")
    indices = []
    if os.path.isdir(directory):
        indices = sorted(int(name) for name in os.listdir(directory)
                         if name.isdigit() and benchmark_complete(root, int(name)))
    if not indices:
        raise DataError(f"No benchmark items found under {directory}")
    return indices
