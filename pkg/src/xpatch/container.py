"""Binary tensor container shared by checkpoints, crosscoders and PCA fits.

Layout::

    magic (8 bytes) | header length (u64 LE) | UTF-8 JSON header | f32 LE payload

The header holds arbitrary metadata plus a ``tensors`` table of
``{"name", "shape", "offset"}`` entries, where ``offset`` counts float32
elements from the start of the payload.  Tensors are packed in table order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, TruncatedPayload, ValidationError

CHECKPOINT_MAGIC = b"XPCK0001"
CROSSCODER_MAGIC = b"XCCD0001"
PCA_MAGIC = b"XPCA0001"

_F32 = np.dtype("<f4")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def encode(magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    table = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=_F32)
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes())
    header = dict(meta)
    header["tensors"] = table
    hbytes = canonical_json(header)
    return b"".join([magic, struct.pack("<Q", len(hbytes)), hbytes, *chunks])


def decode(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != magic:
        raise BadMagic(f"expected magic {magic!r}, got {data[:8]!r}")
    if len(data) < 16:
        raise TruncatedPayload("file ends inside the header length field")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise TruncatedPayload("file ends inside the JSON header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"unreadable header: {exc}") from exc
    payload = data[16 + hlen :]
    n_avail = len(payload) // 4
    tensors = {}
    for entry in header.pop("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        start = int(entry["offset"])
        size = int(np.prod(shape, dtype=np.int64))
        if start + size > n_avail:
            raise TruncatedPayload(f"payload too short for tensor {entry['name']!r}")
        arr = np.frombuffer(payload, dtype=_F32, count=size, offset=4 * start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return header, tensors


def write(path, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> str:
    """Write a container file and return the sha256 of its bytes."""
    data = encode(magic, meta, tensors)
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
