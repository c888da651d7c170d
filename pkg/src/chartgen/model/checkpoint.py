"""Checkpoint files.

Layout (little-endian)::

    b"A2CK" | u8 version | u32 header_len | header (UTF-8 "key=value" lines)
    u32 n_tensors
    per tensor: u16 name_len | name | u8 ndim | u32 dims... | float32 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, ShapeMismatch
from .transformer import ChartTransformer, ModelConfig

MAGIC = b"A2CK"
VERSION = 1


def _header_text(config: ModelConfig, extra: dict | None) -> str:
    items = dict(config.to_dict())
    items["dtype"] = "float32"
    lines = [f"{k}={v}" for k, v in sorted(items.items())]
    lines += [f"meta.{k}={v}" for k, v in sorted((extra or {}).items())]
    return "\n".join(lines) + "\n"


def checkpoint_bytes(model: ChartTransformer, extra: dict | None = None) -> bytes:
    header = _header_text(model.config, extra).encode("utf-8")
    out = [MAGIC, struct.pack("<BI", VERSION, len(header)), header, struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def model_from_bytes(data: bytes) -> tuple[ChartTransformer, dict]:
    if data[:4] != MAGIC:
        raise BadMagic("not a checkpoint file")
    version, header_len = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}")
    pos = 9
    header = data[pos:pos + header_len].decode("utf-8")
    pos += header_len
    values, meta = {}, {}
    for line in header.splitlines():
        key, _, value = line.partition("=")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            values[key] = value
    config = ModelConfig.from_dict(values)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(data):
        raise ShapeMismatch("trailing bytes after last tensor")
    expected = ChartTransformer(config).params
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise ShapeMismatch("tensor set does not match the header config")
    return ChartTransformer(config, {k: params[k] for k in expected}), meta


def save_checkpoint(model: ChartTransformer, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def load_checkpoint(path) -> ChartTransformer:
    return model_from_bytes(Path(path).read_bytes())[0]
