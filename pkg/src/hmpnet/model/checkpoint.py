"""Binary checkpoint container.

Layout: b"HMPN" | u32 version | u32 blob length | JSON blob | u32 tensor count |
per tensor: u16 name length, name, u8 dtype, u8 rank, rank x u32 dims, payload.
All integers and payloads little-endian.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .network import HMPNet, build

MAGIC = b"HMPN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def encode_container(meta: dict, tensors) -> bytes:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    tensors = list(tensors)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("bad magic: not an HMPN checkpoint")
    version, blob_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(take(blob_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors.append((name, arr.astype(dt.newbyteorder("=")).copy()))
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return meta, tensors


def read_container(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    return decode_container(Path(path).read_bytes())


def write_container(path, meta: dict, tensors) -> None:
    Path(path).write_bytes(encode_container(meta, tensors))


def model_tensors(model: HMPNet):
    return [(name, p.data) for name, p in model.named_parameters()]


def save_checkpoint(model: HMPNet, path) -> None:
    write_container(path, model.config.to_dict(), model_tensors(model))


def load_state(model: HMPNet, tensors) -> None:
    params = dict(model.named_parameters())
    seen = set()
    for name, arr in tensors:
        if name not in params:
            raise CheckpointError(f"unknown parameter {name!r}")
        if name in seen:
            raise CheckpointError(f"duplicate parameter {name!r}")
        p = params[name]
        if p.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != model shape {p.shape}")
        seen.add(name)
        p.data = np.ascontiguousarray(arr, dtype=arr.dtype)
        p.grad = np.zeros_like(p.data)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")


def load_checkpoint(path) -> HMPNet:
    meta, tensors = read_container(path)
    model = build(ModelConfig.from_dict(meta))
    load_state(model, tensors)
    return model
