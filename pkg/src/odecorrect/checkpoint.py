"""Versioned container of named float64 tensor blocks plus a JSON header."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"FMCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, "np.ndarray | torch.Tensor"], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", MAGIC, VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            if isinstance(arr, torch.Tensor):
                arr = arr.detach().cpu().numpy()
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), arr.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    try:
        magic, version, hlen = struct.unpack_from("<4sII", data, 0)
    except struct.error:
        raise CheckpointFormatError("file too short for checkpoint header") from None
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}; not a checkpoint")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    pos = 12
    try:
        meta = json.loads(data[pos:pos + hlen])
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<HB", data, pos)
            pos += 3
            name = data[pos:pos + nlen].decode()
            pos += nlen
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise CheckpointFormatError(f"truncated tensor block {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint: {exc}") from None
    return tensors, meta
