"""RDCK checkpoint files.

Layout (all integers little-endian)::

    b"RDCK" | u32 version | u64 header_len | header (UTF-8 JSON, space padded)
    | payload

The header maps tensor name -> {"dtype", "shape", "byte_offset"}; offsets are
relative to the payload start and 8-byte aligned, and the payload itself
starts on an 8-byte boundary. An optional ``"__metadata__"`` entry holds a
string map. Writing is deterministic: the same TensorMap always produces the
same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError
from .tensormap import TensorMap

MAGIC = b"RDCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
METADATA_KEY = "__metadata__"

PathLike = Union[str, os.PathLike]


def _align8(n: int) -> int:
    return (n + 7) & ~7


def encode(tm: TensorMap) -> bytes:
    header: dict = {}
    if tm.metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in sorted(tm.metadata.items())}
    chunks = []
    offset = 0
    for name, arr in tm.items():
        dtype_name = _DTYPE_NAMES[arr.dtype]
        header[name] = {"dtype": dtype_name, "shape": list(arr.shape), "byte_offset": offset}
        data = arr.astype(_DTYPES[dtype_name], copy=False).tobytes(order="C")
        pad = _align8(len(data)) - len(data)
        chunks.append(data + b"\0" * pad)
        offset += len(data) + pad
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    padded_len = _align8(_PREFIX.size + len(raw)) - _PREFIX.size
    raw += b" " * (padded_len - len(raw))
    return _PREFIX.pack(MAGIC, VERSION, len(raw)) + raw + b"".join(chunks)


def _parse_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < _PREFIX.size:
        raise FormatError("file too short for an RDCK header")
    magic, version, header_len = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported RDCK version {version} (this build reads {VERSION})")
    start = _PREFIX.size + header_len
    if start > len(buf):
        raise FormatError("header length runs past end of file")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("corrupt header: not a JSON object")
    return header, start


def decode(buf: bytes) -> TensorMap:
    header, start = _parse_header(buf)
    payload = memoryview(buf)[start:]
    metadata = header.pop(METADATA_KEY, {})
    entries = {}
    for name, info in header.items():
        try:
            dtype = _DTYPES[info["dtype"]]
            shape = tuple(int(s) for s in info["shape"])
            offset = int(info["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"corrupt header entry for {name!r}") from exc
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * dtype.itemsize
        if offset % 8 or offset < 0 or end > len(payload):
            raise FormatError(f"tensor {name!r} has an invalid byte range")
        arr = np.frombuffer(payload[offset:end], dtype=dtype).reshape(shape)
        entries[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return TensorMap(entries, metadata)


def save_checkpoint(tm: TensorMap, path: PathLike) -> int:
    """Write atomically (temp file + rename). Returns bytes written."""
    data = encode(tm)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


def load_checkpoint(path: PathLike) -> TensorMap:
    return decode(Path(path).read_bytes())


def file_sha256(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def payload_sha256(path: PathLike) -> str:
    """SHA-256 of the raw tensor bytes only (ignores header and metadata)."""
    buf = Path(path).read_bytes()
    _, start = _parse_header(buf)
    return hashlib.sha256(buf[start:]).hexdigest()


def bytes_sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
