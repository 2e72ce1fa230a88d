"""Versioned binary containers: header JSON + little-endian float64 arrays.

Layout: 8-byte magic, u32 container version, u64 header length, UTF-8 header
JSON (sorted keys; includes the array manifest and a SHA-256 over the array
section), then the raw arrays in manifest order. Writing the same content
twice produces identical bytes, so fixture and checkpoint files are
reproducible and corruption is detectable at load.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

CONTAINER_VERSION = 1
LM_FIXTURE_MAGIC = b"SPLMFIX1"
CHECKPOINT_MAGIC = b"SPCKPT01"
DATASET_MAGIC = b"SPFRAME1"


class IntegrityError(RuntimeError):
    """Container is corrupt, truncated, or fails its checksum."""


def write_container(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]):
    names = sorted(arrays)
    blob = b"".join(
        np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names
    )
    full = dict(header)
    full["arrays"] = [{"name": n, "shape": list(arrays[n].shape)} for n in names]
    full["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    hj = json.dumps(full, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", CONTAINER_VERSION))
        f.write(struct.pack("<Q", len(hj)))
        f.write(hj)
        f.write(blob)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:8] != magic:
        raise IntegrityError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != CONTAINER_VERSION:
        raise IntegrityError(f"{path}: unsupported container version {version}")
    (hlen,) = struct.unpack("<Q", raw[12:20])
    try:
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"{path}: corrupt header ({e})") from e
    blob = raw[20 + hlen :]
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise IntegrityError(f"{path}: array checksum mismatch")
    arrays = {}
    off = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        arr = np.frombuffer(blob[off : off + nbytes], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise IntegrityError(f"{path}: trailing bytes in array section")
    return header, arrays


def dump_json(path, obj: dict):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
