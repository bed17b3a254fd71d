"""Binary container for caches and checkpoints.

Layout (all integers little-endian):

    bytes 0..3    magic "DSPG"
    u32           format version (currently 1)
    u32           chunk count
    per chunk:    u16 name length | name utf-8 | u8 dtype tag | u8 ndim |
                  u64 * ndim dims | u64 payload length | payload bytes
    u32           CRC32 over the whole chunk region

Chunks are named arrays; names are unique; payloads store raw
little-endian element bytes.  Writing the same arrays twice produces the
same file bytes, so cache/checkpoint reruns are diffable.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"DSPG"
VERSION = 1

_TAGS: list[tuple[int, np.dtype]] = [
    (0, np.dtype("<f4")),
    (1, np.dtype("<f8")),
    (2, np.dtype("<i4")),
    (3, np.dtype("<i8")),
    (4, np.dtype("u1")),
    (5, np.dtype("?")),
]
_DTYPE_BY_TAG = {t: d for t, d in _TAGS}
_TAG_BY_KIND = {d.str: t for t, d in _TAGS}


class ContainerError(Exception):
    """Malformed or unwritable container."""


class ContainerVersionError(ContainerError):
    """File carries a format version this reader does not speak."""


class ContainerCorruptError(ContainerError):
    """CRC mismatch or impossible structure."""


def _tag_for(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("<").str if arr.dtype.byteorder == ">" else arr.dtype.str
    key = key.replace("=", "<").replace("|", "")
    for tag, dt in _TAGS:
        if np.dtype(key) == dt:
            return tag
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def pack(chunks: dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays; insertion order is preserved."""
    body = bytearray()
    for name, arr in chunks.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ContainerError("chunk name too long")
        arr = np.asarray(arr)
        tag = _tag_for(arr)
        arr = arr.astype(_DTYPE_BY_TAG[tag], copy=False)
        payload = arr.tobytes(order="C")
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<BB", tag, arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<Q", dim)
        body += struct.pack("<Q", len(payload)) + payload
    head = MAGIC + struct.pack("<II", VERSION, len(chunks))
    return bytes(head + body + struct.pack("<I", zlib.crc32(bytes(body))))


def unpack(blob: bytes) -> dict[str, np.ndarray]:
    """Parse container bytes back into named arrays, verifying the CRC."""
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ContainerCorruptError("bad magic or truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContainerVersionError(f"container version {version}, expected {VERSION}")
    body = blob[12:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != crc_stored:
        raise ContainerCorruptError("CRC32 mismatch")
    out: dict[str, np.ndarray] = {}
    off = 0

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(body):
            raise ContainerCorruptError("truncated chunk table")
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    for _ in range(count):
        (name_len,) = take("<H")
        if off + name_len > len(body):
            raise ContainerCorruptError("truncated chunk name")
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        tag, ndim = take("<BB")
        if tag not in _DTYPE_BY_TAG:
            raise ContainerCorruptError(f"unknown dtype tag {tag}")
        shape = tuple(take("<Q")[0] for _ in range(ndim))
        (plen,) = take("<Q")
        dt = _DTYPE_BY_TAG[tag]
        expect = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
        if ndim == 0:
            expect = dt.itemsize
        if plen != expect:
            raise ContainerCorruptError(
                f"chunk '{name}': payload {plen} bytes, shape {shape} needs {expect}"
            )
        if off + plen > len(body):
            raise ContainerCorruptError("truncated payload")
        arr = np.frombuffer(body[off : off + plen], dtype=dt).reshape(shape).copy()
        off += plen
        if name in out:
            raise ContainerCorruptError(f"duplicate chunk name '{name}'")
        out[name] = arr
    if off != len(body):
        raise ContainerCorruptError("trailing bytes after last chunk")
    return out


def write_container(path, chunks: dict[str, np.ndarray]) -> None:
    data = pack(chunks)
    with open(path, "wb") as fh:
        fh.write(data)


def read_container(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return unpack(fh.read())


def text_chunk(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def chunk_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")
