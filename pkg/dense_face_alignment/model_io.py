"""
Morphable-model files: the ``DCMM`` binary container and its JSON-text mirror.

Binary layout (little-endian):
    b"DCMM", u32 version, u32 V, u32 K_id, u32 K_exp,
    f64 mean[3V], f64 A_id[3V x K_id], f64 A_exp[3V x K_exp], f64 sigma_id[K_id],
    f64 sigma_exp[K_exp], f64 uv[V x 2],
    u32 T, u32 triangles[T x 3],
    u32 L, then L x (u32 name_length, UTF-8 name, u32 vertex_index)
"""

import json
import logging
import os
import struct
from typing import Any, Dict

import numpy as np

from dense_face_alignment.errors import DataError
from dense_face_alignment.facemodel import MorphableModel

logger = logging.getLogger(__name__)

MAGIC = b"DCMM"
VERSION = 1


def write_model(model: MorphableModel, path: str) -> None:
    """
    Write a model to ``path``; a ``.json`` suffix selects the text mirror.

    Raises:
        DataError: If the file cannot be written
    """
    try:
        if path.endswith(".json"):
            with open(path, "w", encoding="utf-8") as f:
                json.dump(model_to_dict(model), f)
        else:
            with open(path, "wb") as f:
                f.write(encode_model(model))
    except OSError as e:
        raise DataError(f"Cannot write model file {path}: {str(e)}")
    logger.debug(f"Wrote model to {path}")


def read_model(path: str) -> MorphableModel:
    """
    Read a binary or JSON model file.

    Raises:
        DataError: If the file is missing or malformed
    """
    if not os.path.exists(path):
        raise DataError(f"Model file not found: {path}")
    with open(path, "rb") as f:
        payload = f.read()
    try:
        if payload[:4] == MAGIC:
            return decode_model(payload)
        return model_from_dict(json.loads(payload.decode("utf-8")))
    except (ValueError, KeyError, struct.error, UnicodeDecodeError) as e:
        raise DataError(f"Malformed model file {path}: {str(e)}")


def encode_model(model: MorphableModel) -> bytes:
    v, k_id, k_exp = model.num_vertices, model.num_identity, model.num_expression
    parts = [MAGIC, struct.pack("<IIII", VERSION, v, k_id, k_exp)]
    for array in (model.mean_shape, model.identity_basis, model.expression_basis,
                  model.sigma_id, model.sigma_exp, model.uv_coords):
        parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(model.triangles)))
    parts.append(np.ascontiguousarray(model.triangles, dtype="<u4").tobytes())
    parts.append(struct.pack("<I", len(model.landmark_indices)))
    for name, index in model.landmark_indices.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded + struct.pack("<I", index))
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def unpack(self, fmt: str):
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += struct.calcsize(fmt)
        return values

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.offset + size > len(self.payload):
            raise ValueError("unexpected end of data")
        out = np.frombuffer(self.payload, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return out

    def raw(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise ValueError("unexpected end of data")
        out = self.payload[self.offset:self.offset + size]
        self.offset += size
        return out


def decode_model(payload: bytes) -> MorphableModel:
    reader = _Reader(payload)
    if reader.raw(4) != MAGIC:
        raise ValueError("bad magic, expected DCMM")
    version, v, k_id, k_exp = reader.unpack("<IIII")
    if version != VERSION:
        raise ValueError(f"unsupported DCMM version {version}")
    mean = reader.array("<f8", 3 * v)
    identity = reader.array("<f8", 3 * v * k_id).reshape(3 * v, k_id)
    expression = reader.array("<f8", 3 * v * k_exp).reshape(3 * v, k_exp)
    sigma_id = reader.array("<f8", k_id)
    sigma_exp = reader.array("<f8", k_exp)
    uv = reader.array("<f8", 2 * v).reshape(v, 2)
    (num_triangles,) = reader.unpack("<I")
    triangles = reader.array("<u4", 3 * num_triangles).reshape(-1, 3)
    (num_landmarks,) = reader.unpack("<I")
    landmarks = {}
    for _ in range(num_landmarks):
        (length,) = reader.unpack("<I")
        name = reader.raw(length).decode("utf-8")
        (index,) = reader.unpack("<I")
        landmarks[name] = index
    return MorphableModel(mean, identity, expression, sigma_id, sigma_exp, triangles, uv, landmarks)


def model_to_dict(model: MorphableModel) -> Dict[str, Any]:
    return {
        "format": "DCMM",
        "version": VERSION,
        "mean_shape": model.mean_shape.tolist(),
        "identity_basis": model.identity_basis.tolist(),
        "expression_basis": model.expression_basis.tolist(),
        "sigma_id": model.sigma_id.tolist(),
        "sigma_exp": model.sigma_exp.tolist(),
        "uv_coords": model.uv_coords.tolist(),
        "triangles": model.triangles.tolist(),
        "landmark_indices": dict(model.landmark_indices),
    }


def model_from_dict(data: Dict[str, Any]) -> MorphableModel:
    if data.get("format", "DCMM") != "DCMM":
        raise ValueError(f"unexpected format {data.get('format')}")
    n = 3 * (len(data["mean_shape"]) // 3)
    return MorphableModel(
        mean_shape=data["mean_shape"],
        identity_basis=np.array(data["identity_basis"], dtype=np.float64).reshape(n, -1),
        expression_basis=np.array(data["expression_basis"], dtype=np.float64).reshape(n, -1),
        sigma_id=data["sigma_id"],
        sigma_exp=data["sigma_exp"],
        triangles=data["triangles"],
        uv_coords=data["uv_coords"],
        landmark_indices=data["landmark_indices"],
    )
