"""Binary container for named float64 tensors.

Layout: magic ``BEVT``, version (u16 LE), entry count (u32 LE), then per
entry: name length (u16 LE) + UTF-8 name, rank (u8), extents (u32 LE each),
payload as row-major little-endian float64. Entry order is preserved, so a
round trip of the same dict is byte-identical.
"""
from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"BEVT"
VERSION = 1


class ContainerError(ValueError):
    """Malformed or unwritable tensor container."""


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors to ``path``; values are converted to float64."""
    blobs = []
    for name, value in tensors.items():
        # ascontiguousarray would promote rank-0 arrays to rank 1
        arr = np.asarray(value, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        if not encoded:
            raise ContainerError("tensor names must be non-empty")
        if len(encoded) > 0xFFFF:
            raise ContainerError(f"tensor name too long ({len(encoded)} bytes)")
        if arr.ndim > 0xFF:
            raise ContainerError(f"tensor rank {arr.ndim} exceeds container limit")
        blobs.append((encoded, arr))

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(blobs)))
        for encoded, arr in blobs:
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                if extent > 0xFFFFFFFF:
                    raise ContainerError(f"extent {extent} exceeds u32 range")
                fh.write(struct.pack("<I", extent))
            fh.write(arr.tobytes())


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    """Read a container written by :func:`write_tensors`."""
    with open(path, "rb") as fh:
        raw = fh.read()

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise ContainerError(f"truncated container while reading {what}")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    offset = 0
    if take(4, "magic") != MAGIC:
        raise ContainerError(f"{path}: bad magic bytes, not a tensor container")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")

    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"entry {i}: name is not valid UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1, f"{name!r} rank"))
        shape = tuple(
            struct.unpack("<I", take(4, f"{name!r} extent {d}"))[0] for d in range(rank)
        )
        n_values = 1
        for extent in shape:
            n_values *= extent
        payload = take(8 * n_values, f"{name!r} payload")
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        if name in out:
            raise ContainerError(f"duplicate tensor name {name!r}")
        out[name] = arr
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes after last entry")
    return out
