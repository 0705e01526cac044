"""Checkpoint container shared by the base model and the generator.

Layout (all little-endian)::

    8 bytes   magic  b"QPACKPT\\0"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset"}, ...]}
    ...       float64 payload; tensor offsets count float64 elements from here
"""

from __future__ import annotations

import hashlib
import json
import math
import struct

import numpy as np

MAGIC = b"QPACKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"meta": meta or {}, "tensors": table}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = blob[16 + hlen:]
    if len(body) % 8:
        raise CheckpointError(f"{path}: payload is truncated")
    payload = np.frombuffer(body, dtype="<f8")
    tensors = {}
    for entry in header["tensors"]:
        size = math.prod(entry["shape"])
        start = entry["offset"]
        if start + size > payload.size:
            raise CheckpointError(f"{path}: tensor {entry['name']} is truncated")
        tensors[entry["name"]] = payload[start:start + size].reshape(entry["shape"]).astype(float)
    return tensors, header["meta"]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
