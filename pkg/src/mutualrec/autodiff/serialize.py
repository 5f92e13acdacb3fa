"""Flat binary checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, a UTF-8 JSON
header holding free-form metadata plus the tensor table
(section, name, shape, element offset), then every tensor's values as
row-major little-endian float64 in table order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Mapping

import numpy as np

from ..errors import ArtifactIOError

MAGIC = b"MRECKPT1"


def save_checkpoint(path, sections: Mapping[str, Mapping[str, np.ndarray]], meta: dict | None = None) -> None:
    table = []
    blobs = []
    offset = 0
    for section in sorted(sections):
        for name in sorted(sections[section]):
            arr = np.ascontiguousarray(sections[section][name], dtype="<f8")
            table.append({"section": section, "name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": table}, sort_keys=True).encode()
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise ArtifactIOError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    values = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    sections: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = values[entry["offset"]:entry["offset"] + n].astype(np.float64).reshape(entry["shape"])
        sections.setdefault(entry["section"], {})[entry["name"]] = arr
    return sections, header["meta"]


def checksum(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw bytes; order-independent of dict order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
