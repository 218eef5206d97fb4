"""Binary checkpoint and tensor-container files.

Layout (all integers little-endian)::

    b"LIMCKPT"  u16 version  32-byte config digest
    u32 n + n bytes   rng state, JSON
    u32 n + n bytes   metadata (config, epoch, step, ...), JSON
    u32 count
    count x { u16 n + name, u8 rank, u32 dims[rank], u8 dtype, raw values }

dtype codes: 0 = float32, 1 = float64, 2 = int64.  The tensor container
written by ``extract`` is the same file with an empty rng blob.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"LIMCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    digest: bytes = b"\0" * 32
    tensors: dict = field(default_factory=dict)  # name -> np.ndarray, insertion ordered
    rng: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def epoch(self):
        return self.meta.get("epoch", 0)

    def group(self, prefix):
        """Tensors whose name starts with ``prefix``, keys unchanged."""
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _code(arr):
    try:
        return _CODES[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise FormatError(f"unsupported tensor dtype {arr.dtype}") from None


def dumps(ckpt):
    if len(ckpt.digest) != 32:
        raise FormatError(f"digest must be 32 bytes, got {len(ckpt.digest)}")
    parts = [MAGIC, struct.pack("<H", ckpt.version), bytes(ckpt.digest)]
    for blob in (ckpt.rng, ckpt.meta):
        raw = json.dumps(blob, sort_keys=True).encode() if blob else b""
        parts += [struct.pack("<I", len(raw)), raw]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, value in ckpt.tensors.items():
        arr = np.asarray(value)
        code = _code(arr)
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf, path="<bytes>"):
    r = _Reader(bytes(buf), path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    digest = r.take(32, "config digest")
    blobs = []
    for what in ("rng state", "metadata"):
        (n,) = r.unpack("<I", f"{what} length")
        raw = r.take(n, what)
        try:
            blobs.append(json.loads(raw) if raw else {})
        except ValueError as exc:
            raise FormatError(f"{path}: corrupt {what}: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of tensor {i}")
        name = r.take(n, f"name of tensor {i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        (code,) = r.unpack("<B", f"dtype of {name}")
        if code not in _DTYPES:
            raise FormatError(f"{path}: tensor {name} has unknown dtype code {code}")
        dt = _DTYPES[code]
        raw = r.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes after tensor table")
    return Checkpoint(digest, tensors, blobs[0], blobs[1], version)


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    return loads(buf, path)


def save_vectors(vectors, path, digest=b"\0" * 32, meta=None):
    """Write ``{name: vector}`` in the checkpoint tensor-container format."""
    save_checkpoint(Checkpoint(digest, dict(vectors), {}, meta or {}), path)


def load_vectors(path):
    return load_checkpoint(path).tensors
