"""Named-array container used for checkpoints and style vectors.

Layout (all integers little-endian u32)::

    b"DGCK"  version:u8  count:u32
    repeated count times:
        name_len:u32  name:utf-8  ndim:u32  dims:u32*ndim  data:f32*prod(dims)
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a deskgan container (bad magic)")
    if len(blob) < 9:
        raise CheckpointError("truncated header")
    version = blob[4]
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    (count,) = struct.unpack_from("<I", blob, 5)
    off = 9
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            off += 4 * n
            out[name] = data.reshape(shape).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt container: {exc}") from exc
    if off != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays))
    os.replace(tmp, path)
    return path


def load(path) -> dict:
    return loads(Path(path).read_bytes())


def save_style_vector(path, w: np.ndarray) -> Path:
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise ValueError(f"style vector must be 2-d (num_styles, latent_dim), got {w.shape}")
    return save(path, {"w": w})


def load_style_vector(path) -> np.ndarray:
    arrays = load(path)
    if "w" not in arrays:
        raise CheckpointError(f"{path} has no array named 'w'")
    return arrays["w"]
