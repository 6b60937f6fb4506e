"""Self-describing binary container used for every saved model.

Layout (all integers little-endian)::

    b"VTK1"  u32 version
    u16 len, section tag (utf-8)            -- "cnn", "vocab" or "svm"
    u32 len, metadata (utf-8 "key=value" lines, keys sorted)
    u32 tensor count
      per tensor: u16 len, name; u8 ndim; ndim x u32 extents; float32 data
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContainerChecksumError,
    ContainerFormatError,
    ContainerTruncatedError,
    ContainerVersionError,
    ParameterError,
)

MAGIC = b"VTK1"
VERSION = 1


@dataclass
class Container:
    tag: str
    metadata: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)


def encode(container):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    tag = container.tag.encode("utf-8")
    parts.append(struct.pack("<H", len(tag)) + tag)
    lines = []
    for key in sorted(container.metadata):
        value = str(container.metadata[key])
        if "\n" in key or "=" in key or "\n" in value:
            raise ParameterError(f"metadata entry {key!r} contains a newline or '=' in its key")
        lines.append(f"{key}={value}")
    meta = "\n".join(lines).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    parts.append(struct.pack("<I", len(container.tensors)))
    for name, arr in container.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise ParameterError(f"tensor {name!r} must be float32, got {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ContainerTruncatedError(
                f"file ends while reading {what} (need {n} bytes at offset {self.pos}, size {len(self.data)})"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data):
    if len(data) < len(MAGIC):
        if MAGIC.startswith(data) and data:
            raise ContainerTruncatedError("file ends inside the magic string")
        raise ContainerFormatError("not a VTK1 file (bad magic bytes)")
    if data[:4] != MAGIC:
        raise ContainerFormatError(f"not a VTK1 file (magic {data[:4]!r})")
    r = _Reader(data)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "format version")
    if version > VERSION:
        raise ContainerVersionError(f"file format version {version} is newer than supported version {VERSION}")
    if version < 1:
        raise ContainerFormatError(f"invalid format version {version}")
    (n,) = r.unpack("<H", "section tag length")
    try:
        tag = r.take(n, "section tag").decode("utf-8")
        (n,) = r.unpack("<I", "metadata length")
        meta_text = r.take(n, "metadata").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ContainerFormatError(f"invalid utf-8 in header: {exc}") from None
    metadata = {}
    for line in meta_text.split("\n") if meta_text else []:
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerFormatError(f"malformed metadata line {line!r}")
        metadata[key] = value
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", "tensor rank")
        shape = r.unpack(f"<{ndim}I", f"shape of {name!r}")
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(4 * size, f"data of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    remaining = len(data) - r.pos
    if remaining < 4:
        raise ContainerTruncatedError("file ends before the trailing checksum")
    if remaining > 4:
        raise ContainerFormatError(f"{remaining - 4} unexpected bytes after the last tensor")
    (stored,) = struct.unpack("<I", data[r.pos:])
    actual = zlib.crc32(data[:r.pos])
    if stored != actual:
        raise ContainerChecksumError(f"checksum mismatch (stored {stored:08x}, computed {actual:08x})")
    return Container(tag, metadata, tensors)


def write_container(path, container):
    Path(path).write_bytes(encode(container))


def read_container(path, expect_tag=None):
    c = decode(Path(path).read_bytes())
    if expect_tag is not None and c.tag != expect_tag:
        raise ContainerFormatError(f"expected a {expect_tag!r} section, file holds {c.tag!r}")
    return c


def peek_tag(path):
    return read_container(path).tag
