"""Little-endian tensor container with a JSON header.

Byte layout::

    offset  size  field
    0       8     magic  b"RDCLTNSR"
    8       4     format version, uint32 LE
    12      8     header length H, uint64 LE
    20      H     UTF-8 JSON header
    20+H    ...   payload: float64 LE arrays, back to back

The header is ``{"kind": str, "meta": {...}, "tensors": [{"name", "shape",
"offset", "nbytes"}, ...]}`` with offsets relative to the payload start.
Integer-valued arrays (labels, class ids) are stored as float64, which is
exact for the magnitudes used here.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RDCLTNSR"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class ContainerError(ValueError):
    """Malformed container; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ContainerVersionError(ContainerError):
    pass


def dumps(tensors: dict[str, np.ndarray], kind: str, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"kind": kind, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def loads(buf: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _PREFIX.size:
        raise ContainerError("truncated prefix", len(buf))
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ContainerError("bad magic", 0)
    if version != VERSION:
        raise ContainerVersionError(f"unsupported container version {version}, expected {VERSION}", 8)
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise ContainerError("truncated header", len(buf))
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ContainerError(f"unreadable header: {exc}", start) from exc
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"expected a {kind!r} container, found {header.get('kind')!r}", start)
    payload = start + hlen
    out: dict[str, np.ndarray] = {}
    for e in entries:
        lo = payload + int(e["offset"])
        n = int(e["nbytes"])
        shape = tuple(int(s) for s in e["shape"])
        if n != 8 * int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"tensor {e['name']!r}: size disagrees with shape", lo)
        if lo + n > len(buf):
            raise ContainerError(f"tensor {e['name']!r} runs past end of file", len(buf))
        out[e["name"]] = np.frombuffer(buf, dtype="<f8", count=n // 8, offset=lo).reshape(shape).astype(np.float64)
    return out, header.get("meta", {})


def save(path, tensors: dict[str, np.ndarray], kind: str, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, kind, meta))


def load(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes(), kind)
