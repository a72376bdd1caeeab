"""Versioned little-endian container for named arrays plus a JSON header.

Layout::

    magic      4 bytes   b"CLDC"
    version    1 byte
    hdr_len    u64
    header     hdr_len bytes of UTF-8 JSON
    count      u64
    entries    count x (name_len u64, name, dtype 1 byte, ndim u64, dims u64*ndim, raw buffer)
    crc32      u32 over every preceding byte

Float buffers are stored as float32 (``b"f"``), integer buffers as int64
(``b"i"``). Round trips are bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from collections import OrderedDict
from typing import Dict, Mapping, Tuple

import numpy as np

from ..errors import CorruptHeaderError, MissingArtifactError, VersionMismatchError

MAGIC = b"CLDC"
FORMAT_VERSION = 1

_DTYPES = {b"f": np.dtype("<f4"), b"i": np.dtype("<i8")}


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def save_container(path, arrays: Mapping[str, np.ndarray], header: Mapping) -> None:
    body = bytearray()
    body += MAGIC
    body += struct.pack("<B", FORMAT_VERSION)
    hdr = json.dumps({"format_version": FORMAT_VERSION, **header}, sort_keys=True).encode("utf-8")
    body += struct.pack("<Q", len(hdr)) + hdr
    body += struct.pack("<Q", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = b"i" if np.issubdtype(arr.dtype, np.integer) else b"f"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw_name = name.encode("utf-8")
        body += struct.pack("<Q", len(raw_name)) + raw_name
        body += code
        body += struct.pack("<Q", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes(order="C")
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)


def load_container(path) -> Tuple[Dict[str, np.ndarray], dict]:
    if not os.path.exists(path):
        raise MissingArtifactError(f"no such file: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise CorruptHeaderError(f"{path}: not a container file (bad magic)")
    version = reader.unpack("<B")[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hdr_len,) = reader.unpack("<Q")
    try:
        header = json.loads(reader.take(hdr_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable JSON header") from exc
    (count,) = reader.unpack("<Q")
    arrays = OrderedDict()
    for _ in range(count):
        (nlen,) = reader.unpack("<Q")
        name = reader.take(nlen).decode("utf-8", errors="strict")
        code = reader.take(1)
        if code not in _DTYPES:
            raise CorruptHeaderError(f"{path}: unknown dtype code {code!r}")
        (ndim,) = reader.unpack("<Q")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(reader.take(nbytes), dtype=dt).reshape(shape).copy()
    end = reader.pos
    (crc,) = reader.unpack("<I")
    if crc != (zlib.crc32(blob[:end]) & 0xFFFFFFFF):
        raise CorruptHeaderError(f"{path}: checksum mismatch")
    return arrays, header


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise CorruptHeaderError("container truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
