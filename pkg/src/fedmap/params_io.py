"""Binary parameter container.

Layout (all integers little-endian)::

    magic        8 bytes   b"FMAPPRM1"
    version      u32       1
    config_len   u32       length of the JSON config block
    config       bytes     UTF-8 JSON: {"network": {...}, "precision": "fp16"|"fp32", ...}
    n_tensors    u32
    table        n_tensors x (u8 name_len, name, u8 role, u8 ndim, ndim x u32 dim)
    values       trainable tensors then buffers, in table order, '<f2' or '<f4'

``role`` is 0 for trainables and 1 for BatchNorm running statistics.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from fedmap.network import ModelParams, NetworkConfig

MAGIC = b"FMAPPRM1"
VERSION = 1
FP16_MAX = float(np.finfo(np.float16).max)
_DTYPES = {"fp16": np.dtype("<f2"), "fp32": np.dtype("<f4")}


class ContainerError(ValueError):
    pass


def _header(params: ModelParams, precision: str, extra: dict | None) -> bytes:
    cfg = {"network": asdict(params.config), "precision": precision}
    if extra:
        cfg.update(extra)
    cfg_bytes = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg_bytes)), cfg_bytes]
    arrays = [(k, 0, v) for k, v in params.trainables.items()]
    arrays += [(k, 1, v) for k, v in params.buffers.items()]
    parts.append(struct.pack("<I", len(arrays)))
    for name, role, arr in arrays:
        nb = name.encode("ascii")
        parts.append(struct.pack("<B", len(nb)) + nb)
        parts.append(struct.pack("<BB", role, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    return b"".join(parts)


def serialize_params(params: ModelParams, precision: str = "fp16", extra: dict | None = None) -> bytes:
    """Pack ``params`` into the container. fp16 values beyond the half-precision
    range saturate to +-65504 and a warning reports how many did."""
    if precision not in _DTYPES:
        raise ValueError(f"precision must be 'fp16' or 'fp32', got {precision!r}")
    if not params.is_finite():
        raise ValueError("parameters must be finite")
    dt = _DTYPES[precision]
    saturated = 0
    chunks = [_header(params, precision, extra)]
    for arr in params.arrays().values():
        a = np.asarray(arr, np.float64)
        if precision == "fp16":
            over = np.abs(a) > FP16_MAX
            saturated += int(over.sum())
            a = np.clip(a, -FP16_MAX, FP16_MAX)
        chunks.append(a.astype(dt).tobytes())
    if saturated:
        warnings.warn(f"{saturated} values saturated to the fp16 range", RuntimeWarning, stacklevel=2)
    return b"".join(chunks)


def _parse(data: bytes):
    if data[:8] != MAGIC:
        raise ContainerError("bad magic")
    try:
        version, cfg_len = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        pos = 16
        cfg = json.loads(data[pos:pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        table = []
        for _ in range(n):
            nl = data[pos]
            name = data[pos + 1:pos + 1 + nl].decode("ascii")
            pos += 1 + nl
            role, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            table.append((name, role, tuple(shape)))
    except (struct.error, IndexError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"truncated or corrupt header: {exc}") from exc
    return cfg, table, pos


def container_layout(data: bytes) -> dict:
    """Byte accounting of a container: header, trainable payload, buffer payload."""
    cfg, table, header = _parse(data)
    item = _DTYPES[cfg["precision"]].itemsize
    trainable = sum(int(np.prod(s)) for _, role, s in table if role == 0)
    buffers = sum(int(np.prod(s)) for _, role, s in table if role == 1)
    return {
        "header_bytes": header,
        "trainable_values": trainable,
        "trainable_bytes": trainable * item,
        "buffer_bytes": buffers * item,
        "total_bytes": len(data),
        "precision": cfg["precision"],
    }


def deserialize_params(data: bytes, dtype=np.float32) -> ModelParams:
    cfg, table, pos = _parse(data)
    net = NetworkConfig(**cfg["network"])
    dt = _DTYPES[cfg["precision"]]
    trainables, buffers = {}, {}
    for name, role, shape in table:
        count = int(np.prod(shape))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(data):
            raise ContainerError(f"tensor {name} truncated")
        arr = np.frombuffer(data, dt, count=count, offset=pos).reshape(shape).astype(dtype)
        pos += nbytes
        (trainables if role == 0 else buffers)[name] = arr
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes")
    return ModelParams(net, trainables, buffers)


def read_extra(data: bytes) -> dict:
    """The JSON config block of a container."""
    return _parse(data)[0]


def save_params(params: ModelParams, path, precision: str = "fp16", extra: dict | None = None) -> int:
    blob = serialize_params(params, precision, extra)
    Path(path).write_bytes(blob)
    return len(blob)


def load_params(path, dtype=np.float32) -> ModelParams:
    return deserialize_params(Path(path).read_bytes(), dtype)
