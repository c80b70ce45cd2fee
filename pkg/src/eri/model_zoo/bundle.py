"""Parameter bundle files.

Layout (all integers little-endian)::

    b"ERIW"  u32 version
    u32 len  architecture id (utf-8)
    u32 len  model config as JSON (utf-8)
    u32 n    registry entries, each:
             u32 len, name (utf-8), u8 dtype code (1 = f32), u32 rank, rank x u64 extents
    payloads f32, row-major, in registry order
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"ERIW"
VERSION = 1
DTYPE_F32 = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_bundle(arch: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(_pack_str(arch))
    out.write(_pack_str(json.dumps(meta or {}, sort_keys=True)))
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        out.write(_pack_str(name))
        out.write(struct.pack("<BI", DTYPE_F32, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    for arr in tensors.values():
        if not np.all(np.isfinite(arr)):
            raise FormatError("refusing to write non-finite parameters")
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("bundle is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("bundle string is not utf-8") from exc


def decode_bundle(buf: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a parameter bundle (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    arch = r.string()
    try:
        meta = json.loads(r.string())
    except json.JSONDecodeError as exc:
        raise FormatError("bundle metadata is not JSON") from exc
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        name = r.string()
        code, rank = r.unpack("<BI")
        if code != DTYPE_F32:
            raise FormatError(f"{name}: unsupported dtype code {code}")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        entries.append((name, tuple(int(s) for s in shape)))
    tensors = {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * n)
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after bundle payload")
    return arch, meta, tensors


def write_bundle(path, arch: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_bundle(arch, tensors, meta))


def read_bundle(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    return decode_bundle(Path(path).read_bytes())


def save_model(path, model, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    if "normalizer" not in meta and getattr(model, "normalizer", None) is not None:
        meta["normalizer"] = model.normalizer.to_dict()
    meta["config"] = model.config.to_dict()
    write_bundle(path, model.config.arch, model.params, meta)


def load_model(path, expect_arch: str | None = None):
    from .architectures import Model, ModelConfig

    arch, meta, tensors = read_bundle(path)
    if expect_arch is not None and arch != expect_arch:
        raise FormatError(f"checkpoint holds a {arch} model, expected {expect_arch}")
    if "config" not in meta:
        raise FormatError("bundle carries no model config")
    cfg = ModelConfig.from_dict(meta["config"])
    if cfg.arch != arch:
        raise FormatError("bundle architecture id disagrees with its config")
    model = Model(cfg, tensors)
    if "normalizer" in meta:
        from ..core_math import Normalizer

        model.normalizer = Normalizer.from_dict(meta["normalizer"])
    return model
