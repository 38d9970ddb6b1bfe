"""Versioned on-disk container for named float64 arrays plus a JSON header.

Layout, all little-endian:

    b"F2F1" | u32 version | u64 header length | u32 header crc32
    | header JSON (utf-8, sorted keys, compact) | payload

The payload is the arrays in sorted-name order as raw little-endian float64.
The header carries the tensor manifest (name, shape, byte offset), whatever
metadata the caller passes (config snapshot, RNG state, iteration), the
payload byte length and its sha256. Every byte of the file is covered by
magic, version, CRC, or digest, so a single flipped byte anywhere fails the
load. Saving what load returned reproduces the file byte for byte.
"""

import hashlib
import json
import struct
import zlib

import numpy as np

from .errors import DataError

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION", "MAGIC"]

MAGIC = b"F2F1"
FORMAT_VERSION = 1
_PRELUDE = struct.Struct("<4sIQI")


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """meta must be JSON-serializable; keys `tensors`, `payload_bytes`,
    `payload_sha256` are reserved for the manifest."""
    for key in ("tensors", "payload_bytes", "payload_sha256"):
        if key in meta:
            raise DataError(f"checkpoint meta key {key!r} is reserved")
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")  # tobytes() is C-order
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = dict(meta)
    header["tensors"] = manifest
    header["payload_bytes"] = len(payload)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    try:
        hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    except (TypeError, ValueError) as e:
        raise DataError(f"checkpoint meta is not JSON-serializable: {e}")
    with open(path, "wb") as f:
        f.write(_PRELUDE.pack(MAGIC, FORMAT_VERSION, len(hjson), zlib.crc32(hjson)))
        f.write(hjson)
        f.write(payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (arrays, header). The header still includes the manifest."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _PRELUDE.size:
        raise DataError(f"checkpoint {path}: too short to hold a header")
    magic, version, hlen, hcrc = _PRELUDE.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"checkpoint {path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"checkpoint {path}: format version {version}, "
                        f"this build reads {FORMAT_VERSION}")
    hjson = blob[_PRELUDE.size:_PRELUDE.size + hlen]
    if len(hjson) != hlen:
        raise DataError(f"checkpoint {path}: truncated header")
    if zlib.crc32(hjson) != hcrc:
        raise DataError(f"checkpoint {path}: header CRC mismatch")
    try:
        header = json.loads(hjson)
    except json.JSONDecodeError as e:
        raise DataError(f"checkpoint {path}: header is not valid JSON ({e})")
    payload = blob[_PRELUDE.size + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise DataError(f"checkpoint {path}: payload is {len(payload)} bytes, "
                        f"header declares {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise DataError(f"checkpoint {path}: payload digest mismatch")
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise DataError(f"checkpoint {path}: tensor {entry['name']!r} "
                            f"overruns the payload")
        arrays[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f8").reshape(shape).copy()
    return arrays, header
