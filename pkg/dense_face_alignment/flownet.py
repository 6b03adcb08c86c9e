"""
Encoder-decoder network predicting per-pixel flow and matchability between a source face image
and a target image (at inference, the frontal mean-face template).

Two encoder branches (shared or separate weights) feed their concatenated features to a flow
decoder and a matchability decoder. Everything runs in float64 numpy with analytic gradients.
"""

import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from dense_face_alignment.errors import ConfigError, DataError, NumericalFault
from dense_face_alignment.facemodel import MorphableModel
from dense_face_alignment.layers import (
    conv2d,
    conv2d_backward,
    deconv2d,
    deconv2d_backward,
    relu,
    relu_backward,
    softmax2,
)
from dense_face_alignment.raster import render_target_template

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"DCWT"
WEIGHTS_VERSION = 1

# Matchability clamp for the cross-entropy
EPSILON = 1e-7


class LayerDef(NamedTuple):
    name: str
    kind: str
    c_in: int
    c_out: int
    stride: int
    relu: bool

    @property
    def kernel(self) -> int:
        return 4 if self.kind == "deconv" else 3


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture settings (config section ``network``)."""

    input_size: Tuple[int, int] = (64, 64)
    base_channels: int = 16
    share_encoders: bool = True
    flow_scale: float = 4.0

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "NetworkSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown network configuration keys: {', '.join(unknown)}")
        values = dict(values)
        if "input_size" in values:
            size = values["input_size"]
            values["input_size"] = (int(size), int(size)) if np.isscalar(size) else tuple(int(s) for s in size)
        spec = cls(**values)
        spec.validate()
        return spec

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["input_size"] = list(self.input_size)
        return data

    def validate(self) -> None:
        width, height = self.input_size
        if width < 16 or height < 16 or width % 16 or height % 16:
            raise ConfigError(f"network input size {width}x{height} must be a positive multiple of 16")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be at least 1")
        if self.flow_scale <= 0:
            raise ConfigError("flow_scale must be positive")

    def with_shared(self, shared: bool) -> "NetworkSpec":
        return NetworkSpec(self.input_size, self.base_channels, shared, self.flow_scale)

    def encoder_prefix(self, branch: str) -> str:
        return "enc" if self.share_encoders else f"enc_{branch}"

    def encoder_layers(self, prefix: str) -> List[LayerDef]:
        c = self.base_channels
        channels = [c, c, 2 * c, 2 * c, 4 * c, 4 * c, 8 * c, 8 * c]
        layers = []
        for i, c_out in enumerate(channels):
            c_in = 3 if i == 0 else channels[i - 1]
            layers.append(LayerDef(f"{prefix}.{i}", "conv", c_in, c_out, 2 if i % 2 == 1 else 1, True))
        return layers

    def decoder_layers(self, head: str) -> List[LayerDef]:
        c = self.base_channels
        middles = [8 * c, 4 * c, 2 * c, c]
        outputs = [4 * c, 2 * c, c, c]
        c_in = 16 * c
        layers = []
        for t, (mid, out) in enumerate(zip(middles, outputs)):
            layers.append(LayerDef(f"{head}.{t}a", "conv", c_in, mid, 1, True))
            layers.append(LayerDef(f"{head}.{t}b", "conv", mid, mid, 1, False))
            layers.append(LayerDef(f"{head}.{t}up", "deconv", mid, out, 2, True))
            c_in = out
        if head == "flow":
            layers.append(LayerDef("flow.out0", "conv", c, c, 1, True))
            layers.append(LayerDef("flow.out1", "conv", c, c, 1, True))
            layers.append(LayerDef("flow.out2", "conv", c, 2, 1, False))
        else:
            layers.append(LayerDef(f"{head}.out", "conv", c, 2, 1, False))
        return layers

    def all_layers(self) -> List[LayerDef]:
        prefixes = ["enc"] if self.share_encoders else ["enc_src", "enc_tgt"]
        layers = []
        for prefix in prefixes:
            layers += self.encoder_layers(prefix)
        return layers + self.decoder_layers("flow") + self.decoder_layers("match")


@lru_cache(maxsize=16)
def parameter_layout(spec: NetworkSpec) -> Dict[str, Tuple[int, Tuple[int, ...]]]:
    """Offset and shape of every ``<layer>.w`` / ``<layer>.b`` block in the flat vector."""
    layout = {}
    offset = 0
    for layer in spec.all_layers():
        w_shape = (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
        layout[f"{layer.name}.w"] = (offset, w_shape)
        offset += int(np.prod(w_shape))
        layout[f"{layer.name}.b"] = (offset, (layer.c_out,))
        offset += layer.c_out
    return layout


def parameter_count(spec: NetworkSpec) -> int:
    offset, shape = list(parameter_layout(spec).values())[-1]
    return offset + int(np.prod(shape))


class Weights:
    """Flat float64 parameter vector plus the layer offset table of its NetworkSpec."""

    def __init__(self, spec: NetworkSpec, vector: Optional[np.ndarray] = None):
        self.spec = spec
        self.layout = parameter_layout(spec)
        size = parameter_count(spec)
        if vector is None:
            vector = np.zeros(size)
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.size != size:
            raise ValueError(f"weight vector has {vector.size} entries, the network needs {size}")
        self.vector = vector

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int = 0) -> "Weights":
        """He-style fan-in initialization; biases start at zero."""
        rng = np.random.default_rng(seed)
        weights = cls(spec)
        for layer in spec.all_layers():
            fan_in = layer.c_in * layer.kernel * layer.kernel
            if layer.kind == "deconv":
                fan_in //= 4
            block = weights.param(f"{layer.name}.w")
            block[...] = rng.normal(scale=np.sqrt(2.0 / fan_in), size=block.shape)
        return weights

    def param(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.vector[offset:offset + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "Weights":
        return Weights(self.spec, self.vector.copy())

    def unshared(self) -> "Weights":
        """Copy of these weights with the shared encoder duplicated into both branches."""
        if not self.spec.share_encoders:
            return self.copy()
        result = Weights(self.spec.with_shared(False))
        for name in result.layout:
            source = "enc." + name.split(".", 1)[1] if name.startswith("enc_") else name
            result.param(name)[...] = self.param(source)
        return result


class LossBreakdown(NamedTuple):
    flow_term: float
    match_term: float
    lam: float
    total: float


@dataclass
class ForwardCache:
    """Activations kept by forward for backward."""

    weights: Weights
    chains: Dict[str, List[Tuple[LayerDef, np.ndarray, np.ndarray]]]
    split: int


def prepare_image(image: np.ndarray, spec: NetworkSpec) -> np.ndarray:
    """(H, W, 3) uint8 or [0, 1] float image -> (3, H, W) float64 network input."""
    width, height = spec.input_size
    if image.shape != (height, width, 3):
        raise ValueError(f"image shape {image.shape} does not match network input {(height, width, 3)}")
    if image.dtype == np.uint8:
        image = image.astype(np.float64) / 255.0
    return np.asarray(image, dtype=np.float64).transpose(2, 0, 1)


def _run_chain(weights: Weights, layers: List[LayerDef], x: np.ndarray,
               records: List[Tuple[LayerDef, np.ndarray, np.ndarray]], first_index: int) -> np.ndarray:
    for i, layer in enumerate(layers):
        w = weights.param(f"{layer.name}.w")
        b = weights.param(f"{layer.name}.b")
        if layer.kind == "deconv":
            pre = deconv2d(x, w, b)
        else:
            pre = conv2d(x, w, b, layer.stride)
        if not np.all(np.isfinite(pre)):
            raise NumericalFault(f"Non-finite activation at layer {first_index + i} ({layer.name})")
        records.append((layer, x, pre))
        x = relu(pre) if layer.relu else pre
    return x


def _backward_chain(weights: Weights, records: List[Tuple[LayerDef, np.ndarray, np.ndarray]],
                    d: np.ndarray, grad: Weights) -> np.ndarray:
    for layer, x, pre in reversed(records):
        if layer.relu:
            d = relu_backward(d, pre)
        w = weights.param(f"{layer.name}.w")
        if layer.kind == "deconv":
            d, dw, db = deconv2d_backward(d, x, w)
        else:
            d, dw, db = conv2d_backward(d, x, w, layer.stride)
        grad.param(f"{layer.name}.w")[...] += dw
        grad.param(f"{layer.name}.b")[...] += db
    return d


def forward(weights: Weights, source_image: np.ndarray,
            target_image: np.ndarray) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    """
    Run both encoders and decoders.

    Returns:
        flow (H, W, 2) in pixels, matchability (H, W) in [0, 1], and the activation cache

    Raises:
        ValueError: If an image does not match the network input size
        NumericalFault: If an activation becomes non-finite, naming the layer
    """
    spec = weights.spec
    chains: Dict[str, List[Tuple[LayerDef, np.ndarray, np.ndarray]]] = {
        "src": [], "tgt": [], "flow": [], "match": []
    }
    n_encoder = len(spec.encoder_layers("enc"))
    e_src = _run_chain(weights, spec.encoder_layers(spec.encoder_prefix("src")),
                       prepare_image(source_image, spec), chains["src"], 0)
    e_tgt = _run_chain(weights, spec.encoder_layers(spec.encoder_prefix("tgt")),
                       prepare_image(target_image, spec), chains["tgt"], n_encoder)
    features = np.concatenate([e_src, e_tgt], axis=0)
    raw_flow = _run_chain(weights, spec.decoder_layers("flow"), features, chains["flow"], 2 * n_encoder)
    logits = _run_chain(weights, spec.decoder_layers("match"), features, chains["match"],
                        2 * n_encoder + len(spec.decoder_layers("flow")))
    flow = spec.flow_scale * raw_flow.transpose(1, 2, 0)
    match = softmax2(logits)
    return flow, match, ForwardCache(weights, chains, e_src.shape[0])


def _check_planes(pred_flow, pred_match, gt_flow, gt_mask) -> None:
    if pred_flow.shape != gt_flow.shape or pred_match.shape != gt_mask.shape \
            or pred_flow.shape[:2] != pred_match.shape:
        raise ValueError(
            f"plane sizes differ: flow {pred_flow.shape} / {gt_flow.shape}, match {pred_match.shape} / {gt_mask.shape}"
        )


def loss(pred_flow: np.ndarray, pred_match: np.ndarray, gt_flow: np.ndarray, gt_mask: np.ndarray,
         lam: float = 1.0, normalize: bool = False) -> LossBreakdown:
    """
    L = sum m~ |F - F~|^2 + lam * sum CE(m, m~), with matchability clamped to [1e-7, 1 - 1e-7].

    With ``normalize`` both sums are divided by the pixel count.

    Raises:
        ValueError: If plane sizes differ or gt_mask is not binary
        NumericalFault: If the matchability is not finite
    """
    _check_planes(pred_flow, pred_match, gt_flow, gt_mask)
    if not np.all((gt_mask == 0) | (gt_mask == 1)):
        raise ValueError("gt_mask must be binary")
    if not np.all(np.isfinite(pred_match)):
        raise NumericalFault("predicted matchability is not finite")
    m = gt_mask.astype(np.float64)
    p = np.clip(pred_match.astype(np.float64), EPSILON, 1.0 - EPSILON)
    diff = pred_flow.astype(np.float64) - gt_flow.astype(np.float64)
    flow_term = float(np.sum(m * np.sum(diff * diff, axis=-1)))
    match_term = float(-np.sum(m * np.log(p) + (1.0 - m) * np.log(1.0 - p)))
    if normalize:
        n = m.size
        flow_term /= n
        match_term /= n
    return LossBreakdown(flow_term, match_term, float(lam), flow_term + lam * match_term)


def loss_gradients(pred_flow: np.ndarray, pred_match: np.ndarray, gt_flow: np.ndarray, gt_mask: np.ndarray,
                   lam: float = 1.0, normalize: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of ``loss`` w.r.t. the predicted flow (H, W, 2) and the matchability logit
    difference z1 - z0 (H, W); zero where the clamp is active.
    """
    _check_planes(pred_flow, pred_match, gt_flow, gt_mask)
    m = gt_mask.astype(np.float64)
    scale = 1.0 / m.size if normalize else 1.0
    d_flow = 2.0 * scale * m[..., None] * (pred_flow.astype(np.float64) - gt_flow.astype(np.float64))
    p = pred_match.astype(np.float64)
    inside = (p >= EPSILON) & (p <= 1.0 - EPSILON)
    d_logit = np.where(inside, lam * scale * (p - m), 0.0)
    return d_flow, d_logit


def backward(cache: Optional[ForwardCache], d_flow: np.ndarray, d_logit: np.ndarray) -> np.ndarray:
    """
    Backpropagate output gradients to every parameter.

    Returns:
        Gradient vector aligned with ``cache.weights.vector``

    Raises:
        NumericalFault: If no forward cache is given
    """
    if cache is None:
        raise NumericalFault("backward needs the cache of a forward pass")
    weights = cache.weights
    spec = weights.spec
    grad = Weights(spec)
    d_raw = spec.flow_scale * np.asarray(d_flow, dtype=np.float64).transpose(2, 0, 1)
    d_features = _backward_chain(weights, cache.chains["flow"], d_raw, grad)
    d_logits = np.stack([-d_logit, d_logit])
    d_features = d_features + _backward_chain(weights, cache.chains["match"], d_logits, grad)
    _backward_chain(weights, cache.chains["src"], d_features[:cache.split], grad)
    _backward_chain(weights, cache.chains["tgt"], d_features[cache.split:], grad)
    return grad.vector


def loss_and_gradient(weights: Weights, source: np.ndarray, target: np.ndarray, gt_flow: np.ndarray,
                      gt_mask: np.ndarray, lam: float = 1.0,
                      normalize: bool = False) -> Tuple[LossBreakdown, np.ndarray]:
    flow, match, cache = forward(weights, source, target)
    breakdown = loss(flow, match, gt_flow, gt_mask, lam, normalize)
    d_flow, d_logit = loss_gradients(flow, match, gt_flow, gt_mask, lam, normalize)
    return breakdown, backward(cache, d_flow, d_logit)


def predict(weights: Weights, source_image: np.ndarray, model: MorphableModel,
            timings: Optional[List[float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Predict flow and matchability of a source image against the frontal template of ``model``.

    Args:
        weights: Trained weights, normally with separate encoders
        source_image: (H, W, 3) image at the network input size
        model: Model whose template is the fixed target
        timings: Optional list receiving the wall time of this call in milliseconds
    """
    start = time.perf_counter()
    template = render_target_template(model, weights.spec.input_size)
    flow, match, _ = forward(weights, source_image, template.color)
    elapsed = 1000.0 * (time.perf_counter() - start)
    if timings is not None:
        timings.append(elapsed)
    logger.debug(f"Prediction took {elapsed:.1f} ms")
    return flow, match


def write_weights(path: str, weights: Weights) -> None:
    """``DCWT`` file: magic, u32 version, u32 spec length, spec JSON, f32 LE parameters."""
    spec_json = json.dumps(weights.spec.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(spec_json)) + spec_json)
        f.write(weights.vector.astype("<f4").tobytes())


def read_weights(path: str) -> Weights:
    """
    Raises:
        DataError: If the file is missing or malformed
    """
    if not os.path.exists(path):
        raise DataError(f"Weights file not found: {path}")
    with open(path, "rb") as f:
        payload = f.read()
    if payload[:4] != WEIGHTS_MAGIC or len(payload) < 12:
        raise DataError(f"{path} is not a DCWT file")
    version, length = struct.unpack_from("<II", payload, 4)
    if version != WEIGHTS_VERSION:
        raise DataError(f"Unsupported DCWT version {version} in {path}")
    try:
        spec = NetworkSpec.from_dict(json.loads(payload[12:12 + length].decode("utf-8")))
    except (ValueError, UnicodeDecodeError) as e:
        raise DataError(f"Invalid network description in {path}: {str(e)}")
    if (len(payload) - 12 - length) % 4:
        raise DataError(f"Truncated parameter block in {path}")
    vector = np.frombuffer(payload, dtype="<f4", offset=12 + length).astype(np.float64)
    try:
        return Weights(spec, vector)
    except ValueError as e:
        raise DataError(f"{path}: {str(e)}")
