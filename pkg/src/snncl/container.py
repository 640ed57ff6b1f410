"""Sectioned little-endian binary container used for checkpoints.

Layout:
  magic            8 bytes
  section count    u32
  per section:
    name           u16 length + utf-8 bytes
    kind           1 byte: b"A" numeric array, b"T" utf-8 text
    A: dtype       u8 length + ascii numpy dtype string (always little-endian)
       ndim        u8, then ndim x u64 shape
       payload     u64 byte count + C-order bytes
    T: payload     u64 byte count + utf-8 bytes
Sections are written in insertion order, so identical content gives
identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """Wrong magic, truncated file or malformed section."""


def write_container(path, magic: bytes, sections: dict) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    parts = [magic, struct.pack("<I", len(sections))]
    for name, value in sections.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        if isinstance(value, str):
            data = value.encode("utf-8")
            parts.append(b"T" + struct.pack("<Q", len(data)) + data)
            continue
        arr = np.ascontiguousarray(value)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        dt = arr.dtype.str.replace("|", "<").encode("ascii")
        parts.append(b"A" + struct.pack("<B", len(dt)) + dt)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes(order="C")
        parts.append(struct.pack("<Q", len(data)) + data)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path, magic: bytes) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    got = r.take(len(magic)) if len(buf) >= len(magic) else buf
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        kind = r.take(1)
        if kind == b"T":
            (n,) = r.unpack("<Q")
            out[name] = r.take(n).decode("utf-8")
        elif kind == b"A":
            (dlen,) = r.unpack("<B")
            dtype = np.dtype(r.take(dlen).decode("ascii"))
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}Q") if ndim else ()
            (n,) = r.unpack("<Q")
            data = r.take(n)
            arr = np.frombuffer(data, dtype=dtype)
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"section {name!r}: size does not match shape")
            out[name] = arr.reshape(shape).copy()
        else:
            raise FormatError(f"unknown section kind {kind!r}")
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last section")
    return out
