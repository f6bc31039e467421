"""DSC1 tensor files and model checkpoints.

DSC1 layout (little-endian)::

    b"DSC1" | u32 count | count x (u32 rank | rank x u32 dim | float32 data)

A checkpoint wraps a DSC1 block with a versioned header and JSON metadata::

    b"DSCK" | u32 version | u32 meta_len | meta (utf-8 JSON) | DSC1 block

The metadata carries ``names``, the parameter name of each tensor in order.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"DSC1"
CKPT_MAGIC = b"DSCK"
CKPT_VERSION = 1


class TensorFormatError(ValueError):
    pass


def dump_tensors(arrays, fh) -> None:
    arrays = list(arrays)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(arrays)))
    for arr in arrays:
        a = np.asarray(arr, dtype="<f4")
        fh.write(struct.pack("<I", a.ndim))
        if a.ndim:
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes(order="C"))


def load_tensors(fh) -> list[np.ndarray]:
    if fh.read(4) != MAGIC:
        raise TensorFormatError("not a DSC1 tensor stream")

    def u32s(n):
        raw = fh.read(4 * n)
        if len(raw) != 4 * n:
            raise TensorFormatError("truncated DSC1 stream")
        return struct.unpack(f"<{n}I", raw)

    (count,) = u32s(1)
    out = []
    for _ in range(count):
        (rank,) = u32s(1)
        shape = u32s(rank) if rank else ()
        n = int(np.prod(shape)) if shape else 1
        raw = fh.read(4 * n)
        if len(raw) != 4 * n:
            raise TensorFormatError("truncated DSC1 tensor data")
        out.append(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32))
    return out


def write_tensors(path, arrays) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        dump_tensors(arrays, fh)
    return path


def read_tensors(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        return load_tensors(fh)


def write_checkpoint(path, params: "OrderedDict[str, np.ndarray]", meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta, names=list(params))
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        dump_tensors(params.values(), fh)
    return path


def read_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise TensorFormatError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise TensorFormatError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(data[12:12 + meta_len].decode())
    arrays = load_tensors(io.BytesIO(data[12 + meta_len:]))
    names = meta.pop("names")
    if len(names) != len(arrays):
        raise TensorFormatError(f"{path}: {len(names)} names for {len(arrays)} tensors")
    return OrderedDict(zip(names, arrays)), meta
