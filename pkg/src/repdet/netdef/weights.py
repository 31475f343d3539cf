"""Binary checkpoint format.

Layout (little-endian)::

    b"RDET"  u32 version
    u32 n_meta   { u32 len, key utf-8, u32 len, value utf-8 } * n_meta
    u32 n_tensor { u32 len, name utf-8, u8 dtype, u8 ndim, u32 dim * ndim,
                   u64 offset, u64 nbytes } * n_tensor
    raw tensor bytes; offsets are relative to the start of this block
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..reparam import fuse_module
from .config import ModelConfig
from .graph import Model

MAGIC = b"RDET"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {v: k for k, v in _DTYPES.items()}


class WeightFormatError(ValueError):
    pass


def state_arrays(m: Model) -> dict[str, np.ndarray]:
    out = {name: t.data for name, t in m.named_parameters()}
    out.update(dict(m.named_buffers()))
    return out


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode(arrays: dict[str, np.ndarray], meta: dict[str, str]) -> bytes:
    head = io.BytesIO()
    head.write(MAGIC + struct.pack("<I", VERSION))
    head.write(struct.pack("<I", len(meta)))
    for k, v in meta.items():
        head.write(_pack_str(k) + _pack_str(v))
    head.write(struct.pack("<I", len(arrays)))
    blobs, offset = [], 0
    for name, a in arrays.items():
        dt = np.dtype(a.dtype).newbyteorder("<")
        if dt not in _TAGS:
            raise WeightFormatError(f"unsupported dtype {a.dtype} for {name}")
        raw = np.ascontiguousarray(a, dtype=dt).tobytes()
        head.write(_pack_str(name) + struct.pack("<BB", _TAGS[dt], a.ndim))
        head.write(struct.pack(f"<{a.ndim}I", *a.shape))
        head.write(struct.pack("<QQ", offset, len(raw)))
        blobs.append(raw)
        offset += len(raw)
    return head.getvalue() + b"".join(blobs)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise WeightFormatError("corrupt string in checkpoint") from e


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise WeightFormatError("bad magic: not an RDET checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise WeightFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n_meta,) = r.unpack("<I")
    meta = {}
    for _ in range(n_meta):
        k = r.string()
        meta[k] = r.string()
    (n_t,) = r.unpack("<I")
    table = []
    for _ in range(n_t):
        name = r.string()
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPES:
            raise WeightFormatError(f"unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{ndim}I")
        offset, nbytes = r.unpack("<QQ")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPES[tag].itemsize:
            raise WeightFormatError(f"size mismatch for {name}")
        table.append((name, _DTYPES[tag], shape, offset, nbytes))
    base = r.pos
    arrays = {}
    for name, dt, shape, offset, nbytes in table:
        if base + offset + nbytes > len(buf):
            raise WeightFormatError(f"truncated checkpoint: data for {name} missing")
        arrays[name] = np.frombuffer(buf, dt, int(np.prod(shape, dtype=np.int64)), base + offset).reshape(shape).copy()
    return arrays, meta


def save_weights(m: Model, path: str | os.PathLike, extra: dict[str, str] | None = None) -> None:
    meta = {
        "format_version": str(VERSION),
        "variant": m.cfg.variant,
        "fused": str(int(m.fused)),
        "ema": str(int(m.ema)),
        "seed": str(m.seed),
        "config": json.dumps(m.cfg.to_dict(), sort_keys=True),
    }
    meta.update(extra or {})
    atomic_write_bytes(path, encode(state_arrays(m), meta))


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode(Path(path).read_bytes())


def _assign(m: Model, arrays: dict[str, np.ndarray]) -> None:
    target = state_arrays(m)
    missing = sorted(set(target) - set(arrays))
    extra = sorted(set(arrays) - set(target))
    if missing or extra:
        raise WeightFormatError(
            f"tensor table does not match model: {len(missing)} missing (e.g. {missing[:3]}), "
            f"{len(extra)} unexpected (e.g. {extra[:3]})")
    for name, dst in target.items():
        src = arrays[name]
        if src.shape != dst.shape:
            raise WeightFormatError(f"shape mismatch for {name}: checkpoint {src.shape}, model {dst.shape}")
    for name, dst in target.items():
        dst[...] = arrays[name]


def load_weights(path: str | os.PathLike, model: Model | None = None) -> Model:
    """Load a checkpoint into ``model`` or into a freshly built one.

    Loading into an explicit model validates the tensor table against it.
    """
    arrays, meta = read_checkpoint(path)
    if model is None:
        try:
            cfg = ModelConfig.from_dict(json.loads(meta["config"]))
            seed = int(meta.get("seed", "0"))
        except (KeyError, ValueError) as e:
            raise WeightFormatError(f"checkpoint metadata unusable: {e}") from e
        model = Model(cfg, seed=seed)
        if meta.get("fused") == "1":
            fuse_module(model)
            model.eval()
    _assign(model, arrays)
    model.ema = meta.get("ema") == "1"
    return model
