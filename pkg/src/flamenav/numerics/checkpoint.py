"""Named-tensor checkpoint files.

Layout: 8-byte magic, little-endian uint32 header length, a JSON header
(format version plus a manifest of name/dtype/shape/offset/nbytes), then the
raw little-endian payloads back to back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLMNCKPT"
FORMAT_VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    for code, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return code
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    manifest = []
    payloads = []
    offset = 0
    for name in tensors:
        arr = np.asarray(tensors[name])
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        manifest.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "tensors": manifest, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(payloads)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {header.get('format_version')} != {FORMAT_VERSION}")
    base = 12 + hlen
    out = {}
    for item in header["tensors"]:
        dt = _DTYPES[item["dtype"]]
        start = base + item["offset"]
        buf = blob[start : start + item["nbytes"]]
        if len(buf) != item["nbytes"]:
            raise CheckpointError(f"truncated payload for {item['name']}")
        out[item["name"]] = np.frombuffer(buf, dtype=dt).reshape(item["shape"]).copy()
    return out, header.get("meta", {})


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
