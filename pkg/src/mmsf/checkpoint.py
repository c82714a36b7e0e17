"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MMSF"                     magic
    u32 version
    u32 config_len, bytes       resolved run config, UTF-8 text
    u32 n_params
    n_params x:
        u16 name_len, bytes     parameter name, UTF-8
        u8  ndim
        ndim x u32              shape
        prod(shape) x f64       values, little-endian
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMSF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, config_text: str) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    cfg = config_text.encode("utf-8")
    buf += struct.pack("<I", len(cfg)) + cfg
    buf += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.asarray(params[name].data if hasattr(params[name], "data") else params[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[dict, str]:
    """Return ``(name -> float64 array, config text)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    config_text = data[pos:pos + clen].decode("utf-8")
    pos += clen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        params[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return params, config_text
