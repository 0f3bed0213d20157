"""Versioned weight container: magic "PRSK", u16 version, JSON header, f32 tensors.

Layout: 4 magic bytes, little-endian u16 format version, little-endian u32
header length, UTF-8 JSON header (config, meta, tensor manifest), then the
raw little-endian float32 tensor bytes in manifest order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import Corrupt, FingerprintMismatch, ShapeMismatch, VersionMismatch
from .config import ModelConfig
from .net import ModelWeights

MAGIC = b"PRSK"
FORMAT_VERSION = 1


def save(weights: ModelWeights, path) -> None:
    """Write the container; float64 weights are downcast to the f32 format."""
    manifest = [{"name": name, "shape": list(arr.shape)}
                for name, arr in weights.arrays.items()]
    header = {
        "config": weights.config.to_dict(),
        "meta": weights.meta,
        "tensors": manifest,
        "dtype": "f4",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for entry in manifest:
            arr = np.ascontiguousarray(weights.arrays[entry["name"]], dtype="<f4")
            fh.write(arr.tobytes())


def load(path, expected_fingerprint: str | None = None) -> ModelWeights:
    """Read and validate a container; optionally pin the registry fingerprint."""
    blob = Path(path).read_bytes()
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise Corrupt(f"{path}: bad magic")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<I", blob, 6)
    header_end = 10 + header_len
    if header_end > len(blob):
        raise Corrupt(f"{path}: truncated header")
    try:
        header = json.loads(blob[10:header_end].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise Corrupt(f"{path}: bad header: {exc}") from None

    arrays: dict[str, np.ndarray] = {}
    offset = header_end
    for entry in manifest:
        shape = tuple(entry["shape"])
        n_bytes = int(np.prod(shape)) * 4 if shape else 4
        end = offset + n_bytes
        if end > len(blob):
            raise Corrupt(f"{path}: truncated tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise Corrupt(f"{path}: {len(blob) - offset} trailing bytes")

    weights = ModelWeights(config=config, arrays=arrays, meta=header.get("meta", {}))
    try:
        weights.validate_shapes()
    except ShapeMismatch as exc:
        raise Corrupt(f"{path}: {exc}") from None
    stored = weights.meta.get("registry_fingerprint")
    if expected_fingerprint is not None and stored != expected_fingerprint:
        raise FingerprintMismatch(
            f"{path}: weights trained against registry {stored}, got {expected_fingerprint}")
    return weights
