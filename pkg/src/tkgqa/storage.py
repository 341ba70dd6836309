"""Versioned binary containers for parameter tensors, plus file hashing.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8
JSON header, then the raw float64 bytes of each array in header-declared
order (C order, little endian).  The header carries the format version,
array names and shapes, and arbitrary metadata such as hyperparameters
and vocabulary hashes.  Writing is deterministic byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
EMBEDDING_MAGIC = b"TKGQEMB\x01"
MODEL_MAGIC = b"TKGQMDL\x01"


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise CheckpointError("magic must be exactly 8 bytes")
    header = {
        "version": FORMAT_VERSION,
        "meta": meta,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(magic)
        handle.write(struct.pack("<Q", len(header_bytes)))
        handle.write(header_bytes)
        for array in arrays.values():
            handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as handle:
            observed = handle.read(8)
            if observed != magic:
                raise CheckpointError(f"{path}: bad magic {observed!r}, expected {magic!r}")
            (header_len,) = struct.unpack("<Q", handle.read(8))
            header = json.loads(handle.read(header_len).decode("utf-8"))
            if header.get("version") != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported container version {header.get('version')}")
            arrays: dict[str, np.ndarray] = {}
            for spec in header["arrays"]:
                shape = tuple(spec["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = handle.read(count * 8)
                if len(raw) != count * 8:
                    raise CheckpointError(f"{path}: truncated array {spec['name']!r}")
                arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            return header["meta"], arrays
    except (OSError, KeyError, ValueError, struct.error) as exc:
        raise CheckpointError(f"{path}: unreadable container ({exc})") from exc


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
