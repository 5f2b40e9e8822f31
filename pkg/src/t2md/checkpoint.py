"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"T2MD"                magic
    u32                    format version
    u32 + bytes            metadata: UTF-8 "key=value" lines, keys sorted
    u32                    tensor count
    per tensor:            u16 name length, name bytes, u8 ndim, u32 * ndim shape,
                           u64 element offset into the payload
    u64                    payload element count
    f32 * count            payload
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"T2MD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_metadata(meta: dict[str, str]) -> bytes:
    lines = []
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in key or "=" in key or "\n" in value:
            raise CheckpointError(f"metadata entry {key!r} is not a single-line key=value")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def decode_metadata(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out


def dumps(tensors: dict[str, np.ndarray], meta: dict[str, str]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    m = encode_metadata(meta)
    buf.write(struct.pack("<I", len(m)))
    buf.write(m)
    buf.write(struct.pack("<I", len(tensors)))
    offset = 0
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<Q", offset))
        offset += arr.size
    buf.write(struct.pack("<Q", offset))
    for arr in tensors.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a T2MD checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (mlen,) = struct.unpack("<I", take(4))
    meta = decode_metadata(bytes(take(mlen)))
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (offset,) = struct.unpack("<Q", take(8))
        entries.append((name, shape, offset))
    (total,) = struct.unpack("<Q", take(8))
    payload = np.frombuffer(bytes(take(4 * total)), dtype="<f4")
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after payload")
    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        n = int(np.prod(shape)) if shape else 1
        if offset + n > total:
            raise CheckpointError(f"tensor {name!r} extends past the payload")
        tensors[name] = payload[offset:offset + n].reshape(shape).astype(np.float32)
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> str:
    """Write atomically; returns the git-style blob hash of the file."""
    raw = dumps(tensors, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)
    return blob_hash(raw)


def load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist") from None
    return loads(raw)


def blob_hash(raw: bytes) -> str:
    """Same digest ``git hash-object`` gives for these bytes."""
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def file_hash(path) -> str:
    return blob_hash(Path(path).read_bytes())


def chain_hash(parent_chain: str, blob: str) -> str:
    """Hash of a checkpoint together with everything that produced it."""
    return hashlib.sha1(f"{parent_chain}:{blob}".encode()).hexdigest()
