"""Binary checkpoint container shared by every stage.

Layout (little-endian)::

    b"GDDS" | u32 schema version | u64 metadata length | metadata (UTF-8 JSON)
    repeated: u32 name length | name | u8 dtype (0=f32, 1=f64) | u32 rank | u64 dims[rank] | data

The metadata records the tensor count and a SHA-256 content hash over the
tensors in name order, so truncation and corruption are caught on load.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, FormatError, UpgradeNeededError

MAGIC = b"GDDS"
SCHEMA_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def content_hash(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(_record(name, tensors[name]))
    return h.hexdigest()


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def kind(self) -> str | None:
        return self.metadata.get("type")

    def content_hash(self) -> str:
        return content_hash(self.tensors)

    def subset(self, prefix: str) -> dict:
        """Tensors under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def to_bytes(self) -> bytes:
        meta = dict(self.metadata)
        meta["schema_version"] = SCHEMA_VERSION
        meta["tensor_count"] = len(self.tensors)
        meta["content_sha256"] = self.content_hash()
        meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = io.BytesIO()
        out.write(MAGIC)
        out.write(struct.pack("<IQ", SCHEMA_VERSION, len(meta_raw)))
        out.write(meta_raw)
        for name in sorted(self.tensors):
            out.write(_record(name, self.tensors[name]))
        return out.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        reader = _Reader(buf)
        if reader.take(4, "magic") != MAGIC:
            raise FormatError("not a checkpoint: header magic mismatch", 0)
        version, meta_len = reader.unpack("<IQ", "header")
        if version != SCHEMA_VERSION:
            raise UpgradeNeededError(
                f"checkpoint schema version {version} is not supported (expected {SCHEMA_VERSION}); "
                "re-export it with a matching release", 4)
        meta_at = reader.pos
        try:
            metadata = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"metadata is not valid JSON: {exc}", meta_at) from None
        tensors = {}
        while not reader.done:
            start = reader.pos
            (name_len,) = reader.unpack("<I", "tensor name length")
            name = reader.take(name_len, "tensor name").decode("utf-8", errors="replace")
            code, rank = reader.unpack("<BI", f"tensor {name!r} header")
            if code not in _DTYPES:
                raise FormatError(f"tensor {name!r} has unknown dtype code {code}", start)
            dims = reader.unpack(f"<{rank}Q", f"tensor {name!r} dims") if rank else ()
            dtype = _DTYPES[code]
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = reader.take(count * dtype.itemsize, f"tensor {name!r} data")
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        expected = metadata.get("tensor_count")
        if expected is not None and expected != len(tensors):
            raise FormatError(f"expected {expected} tensors, found {len(tensors)} (file truncated?)", reader.pos)
        ckpt = cls(tensors, {k: v for k, v in metadata.items() if k not in ("tensor_count", "content_sha256")})
        digest = metadata.get("content_sha256")
        if digest is not None and digest != ckpt.content_hash():
            raise FormatError("content hash does not match stored tensors", reader.pos)
        return ckpt

    @classmethod
    def load(cls, path, expect_type: str | None = None) -> "Checkpoint":
        ckpt = cls.from_bytes(Path(path).read_bytes())
        if expect_type is not None and ckpt.kind != expect_type:
            raise CompatibilityError(f"{path}: expected a {expect_type} checkpoint, found {ckpt.kind}")
        return ckpt


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def with_prefix(prefix: str, state: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in state.items()}
