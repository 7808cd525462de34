"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CPTR"                 magic
    0x01                    format version
    u32                     manifest length in bytes
    manifest                UTF-8 JSON, keys sorted, no whitespace
    payload                 raw float64 (<f8) scalars, tensors back to back

The manifest records the model config, training step, RNG state, every
tensor's name/shape/offset (in scalars), the payload size and its SHA-256.
Writing is deterministic, so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from cptr.errors import (
    BadMagicError,
    ChecksumMismatchError,
    ManifestMismatchError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from cptr.model import ModelConfig, param_names, param_shapes

MAGIC = b"CPTR"
VERSION = 1
_HEADER = struct.Struct("<4sBI")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict | None = field(default=None)


def _manifest(ckpt: Checkpoint, payload: bytes, tensors: list) -> bytes:
    doc = {
        "config": ckpt.config.to_dict(),
        "format_version": VERSION,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "rng_state": ckpt.rng_state,
        "step": int(ckpt.step),
        "tensors": tensors,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    names = param_names(ckpt.config)
    missing = set(names) ^ set(ckpt.params)
    if missing:
        raise ManifestMismatchError(f"parameter set does not match config: {sorted(missing)}")
    chunks, tensors, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        tensors.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    manifest = _manifest(ckpt, payload, tensors)
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + payload


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _HEADER.size:
        if not MAGIC.startswith(blob[:4]):
            raise BadMagicError("not a checkpoint file")
        raise TruncatedCheckpointError("file shorter than header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise TruncatedCheckpointError("manifest truncated")
    try:
        doc = json.loads(blob[start:start + mlen].decode("utf-8"))
        config = ModelConfig.from_dict(doc["config"])
        expected_bytes = int(doc["payload_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestMismatchError(f"unreadable manifest: {exc}") from exc
    payload = blob[start + mlen:]
    if len(payload) < expected_bytes:
        raise TruncatedCheckpointError(f"payload has {len(payload)} of {expected_bytes} bytes")
    if len(payload) > expected_bytes:
        raise ManifestMismatchError("trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != doc.get("payload_sha256"):
        raise ChecksumMismatchError("payload checksum mismatch")

    template = param_shapes(config)
    flat = np.frombuffer(payload, dtype="<f8")
    params = {}
    for entry in doc["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        if template.get(name) != shape:
            raise ManifestMismatchError(f"tensor {name} has shape {shape}, config expects {template.get(name)}")
        count = int(np.prod(shape))
        if offset < 0 or offset + count > flat.size:
            raise ManifestMismatchError(f"tensor {name} lies outside the payload")
        params[name] = flat[offset:offset + count].reshape(shape).astype(np.float64)
    if set(params) != set(template):
        raise ManifestMismatchError("manifest tensors do not cover the model parameters")
    return Checkpoint(config, {k: params[k] for k in param_names(config)}, int(doc["step"]), doc["rng_state"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blob = to_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

