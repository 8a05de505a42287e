"""Sectioned binary container shared by the model, dataset and checkpoint files.

Layout: an ASCII magic string (its length is fixed per file kind), then zero
or more sections. Each section is

    [u32 name length][name: ASCII bytes][u8 dtype][u64 element count][payload]

with dtype 0 = little-endian f64, 1 = little-endian i64, 2 = UTF-8 bytes.
Payload length is count*8 bytes for numeric dtypes and count bytes for text.
Sections are written in insertion order and read back in file order, so a
write/read round trip is bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

DTYPE_F64 = 0
DTYPE_I64 = 1
DTYPE_STR = 2


class ValidationError(ValueError):
    """A file or data structure violates its documented contract."""


def write_container(path, magic: str, sections):
    """Write ``sections`` (iterable of (name, value)) under ``magic``.

    Values may be numpy float/int arrays (flattened on disk) or strings.
    """
    with open(path, "wb") as fh:
        fh.write(magic.encode("ascii"))
        for name, value in sections:
            name_b = name.encode("ascii")
            if isinstance(value, str):
                payload = value.encode("utf-8")
                dtype, count = DTYPE_STR, len(payload)
            else:
                arr = np.asarray(value)
                if arr.dtype.kind in "iub":
                    arr = arr.astype("<i8")
                    dtype = DTYPE_I64
                else:
                    arr = arr.astype("<f8")
                    dtype = DTYPE_F64
                payload = arr.reshape(-1).tobytes()
                count = arr.size
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", dtype))
            fh.write(struct.pack("<Q", count))
            fh.write(payload)


def read_container(path, magic: str):
    """Read all sections into an ordered dict name -> numpy array or str."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic_b = magic.encode("ascii")
    if len(data) < len(magic_b) or data[:len(magic_b)] != magic_b:
        raise ValidationError(f"{path}: bad magic, expected {magic!r} got {data[:len(magic_b)]!r}")
    sections = {}
    off = len(magic_b)
    while off < len(data):
        start = off

        def need(n, what):
            nonlocal off
            if off + n > len(data):
                raise ValidationError(
                    f"{path}: truncated while reading {what} of section starting at offset {start}")
            chunk = data[off:off + n]
            off += n
            return chunk

        (name_len,) = struct.unpack("<I", need(4, "name length"))
        name = need(name_len, "name").decode("ascii")
        (dtype,) = struct.unpack("<B", need(1, f"dtype of '{name}'"))
        (count,) = struct.unpack("<Q", need(8, f"element count of '{name}'"))
        if dtype == DTYPE_STR:
            sections[name] = need(count, f"payload of '{name}'").decode("utf-8")
        elif dtype == DTYPE_F64:
            sections[name] = np.frombuffer(need(count * 8, f"payload of '{name}'"), dtype="<f8").copy()
        elif dtype == DTYPE_I64:
            sections[name] = np.frombuffer(need(count * 8, f"payload of '{name}'"), dtype="<i8").copy()
        else:
            raise ValidationError(f"{path}: section '{name}' has unknown dtype code {dtype}")
    return sections


def require(sections, name, path="<container>"):
    if name not in sections:
        raise ValidationError(f"{path}: missing required section '{name}'")
    return sections[name]
