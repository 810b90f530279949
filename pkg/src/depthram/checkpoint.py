"""Binary parameter checkpoints.

Layout: b"G4D1", u32 format version, u32 header length, UTF-8 JSON header,
then one little-endian float32 block per layer in header order. All integers
are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"G4D1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str | os.PathLike, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = list(params)
    header = {
        "layers": [{"name": n, "shape": list(params[n].shape)} for n in names],
        **(meta or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (params as float64 arrays, header without the layer table)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    params = {}
    for layer in header.pop("layers"):
        shape = tuple(layer["shape"])
        n = int(np.prod(shape)) if shape else 1
        block = data[off:off + 4 * n]
        if len(block) != 4 * n:
            raise CheckpointError(f"{path}: truncated block for {layer['name']}")
        params[layer["name"]] = np.frombuffer(block, dtype="<f4").astype(np.float64).reshape(shape)
        off += 4 * n
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return params, header
