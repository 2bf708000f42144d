"""Weight checkpoints: named float32 arrays in a little-endian container.

Layout: magic "RMCW", format version u32, record count u32, then per
record: name length u16, UTF-8 name, rank u8, extents (u32 each), raw
32-bit little-endian floats. Records cover trainable parameters plus
batchnorm running statistics (both are plain named arrays here).
"""

from __future__ import annotations

import os
import struct
from typing import Dict, List, Tuple

import numpy as np

from .nn import Module

MAGIC = b"RMCW"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


def _named_arrays(model: Module) -> List[Tuple[str, np.ndarray]]:
    entries = [(p.name, p.data) for p in model.parameters()]
    entries.extend(model.named_buffers())
    names = [n for n, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate record names in model")
    return entries


def save_checkpoint(model: Module, path) -> None:
    entries = _named_arrays(model)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(
            f"checkpoint truncated while reading {what} (wanted {n} bytes, got {len(data)})")
    return data


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointMagicError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "version/count"))
        if version != VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {version}, expected {VERSION}")
        for i in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, f"record {i} name length"))
            name = _read_exact(fh, nlen, f"record {i} name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} extents"))
            n_items = int(np.prod(shape)) if rank else 1
            raw = _read_exact(fh, 4 * n_items, f"{name} data")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointTruncatedError("trailing bytes after checkpoint payload")
    return out


def load_checkpoint(model: Module, path) -> None:
    """Copy a checkpoint into a model, requiring an exact name/shape match."""
    records = read_checkpoint(path)
    entries = _named_arrays(model)
    model_names = {name for name, _ in entries}
    missing = sorted(model_names - records.keys())
    extra = sorted(records.keys() - model_names)
    if missing or extra:
        raise CheckpointMismatchError(
            f"checkpoint does not match model: missing {missing[:4]}, "
            f"unexpected {extra[:4]} (model has {len(model_names)} records, "
            f"file has {len(records)})")
    for name, arr in entries:
        rec = records[name]
        if rec.shape != arr.shape:
            raise CheckpointMismatchError(
                f"shape mismatch for {name!r}: checkpoint {rec.shape} vs model {arr.shape}")
        arr[...] = rec.astype(arr.dtype)
