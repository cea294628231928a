"""DFMW named-tensor weight files.

Layout, all integers little-endian::

    b"DFMW"  u16 version  u32 count
    count x { u16 name_len  utf8 name  u8 ndim  u64 dims[ndim]  u8 dtype  f32 payload[prod(dims)] }

dtype 0 is the only code (float32).  Files must end exactly after the
last payload.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import CorruptFile, DuplicateName, MissingFile, UnknownVersion

MAGIC = b"DFMW"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHI")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")


def _items(weights) -> list[tuple[str, np.ndarray]]:
    if hasattr(weights, "state_dict"):
        weights = weights.state_dict()
    items = list(weights.items()) if isinstance(weights, Mapping) else list(weights)
    seen = set()
    for name, _ in items:
        if name in seen:
            raise DuplicateName(f"tensor name {name!r} appears twice")
        seen.add(name)
    return items


def payload_bytes(weights) -> int:
    """Bytes of tensor data a DFMW file for ``weights`` carries (4 per element)."""
    return sum(4 * int(np.asarray(a).size) for _, a in _items(weights))


def encode(weights) -> bytes:
    items = _items(weights)
    parts = [_HEADER.pack(MAGIC, VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CorruptFile(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f4")
        if a.ndim > 0xFF:
            raise CorruptFile(f"{name}: too many dimensions")
        parts.append(_U16.pack(len(raw)))
        parts.append(raw)
        parts.append(_U8.pack(a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(_U8.pack(DTYPE_F32))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptFile(f"truncated file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))


def decode(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    r = _Reader(buf)
    magic, version, count = r.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise CorruptFile(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnknownVersion(f"DFMW version {version} is not supported (expected {VERSION})")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for k in range(count):
        (name_len,) = r.unpack(_U16, f"name length of entry {k}")
        try:
            name = r.take(name_len, f"name of entry {k}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFile(f"entry {k}: name is not utf-8") from exc
        if name in out:
            raise DuplicateName(f"tensor name {name!r} appears twice")
        (ndim,) = r.unpack(_U8, f"{name}: ndim")
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, f"{name}: dims"))
        (dtype,) = r.unpack(_U8, f"{name}: dtype")
        if dtype != DTYPE_F32:
            raise CorruptFile(f"{name}: unknown dtype code {dtype}")
        count_el = 1
        for d in dims:
            count_el *= d
        data = r.take(4 * count_el, f"{name}: payload")
        out[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(buf):
        raise CorruptFile(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return out


def save_weights(weights, path) -> int:
    """Write ``weights`` (a module, mapping or (name, array) pairs); returns file size."""
    blob = encode(weights)
    Path(path).write_bytes(blob)
    return len(blob)


def load_weights(path) -> "OrderedDict[str, np.ndarray]":
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"no such weights file: {p}")
    return decode(p.read_bytes())


def iter_names(weights: Iterable) -> list[str]:
    return [n for n, _ in _items(weights)]
