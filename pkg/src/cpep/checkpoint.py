"""Binary weight-checkpoint container (CPEPW).

Layout, all integers little-endian::

    magic   5 bytes  b"CPEPW"
    version u32      1 = float32 payload, 2 = float64 payload
    records, one per parameter, in file order:
        name_len u16
        name     UTF-8, name_len bytes
        rank     u8
        extents  rank * u32
        data     prod(extents) raw little-endian scalars

Round trips are byte-identical: loading preserves record order and dtype,
and writing the loaded mapping reproduces the file exactly.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"CPEPW"
_VERSION_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPE_BY_VERSION = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(Exception):
    """Malformed or unreadable checkpoint file."""


def _payload_dtype(arrays):
    dtypes = {np.asarray(a).dtype for a in arrays.values()}
    if len(dtypes) != 1:
        raise CheckpointError(f"checkpoint arrays must share one dtype, got {sorted(map(str, dtypes))}")
    dtype = dtypes.pop()
    if dtype not in _VERSION_BY_DTYPE:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype}; use float32 or float64")
    return dtype


def save_checkpoint(arrays, path):
    """Write a name -> ndarray mapping, preserving mapping order."""
    if not arrays:
        raise CheckpointError("refusing to write an empty checkpoint")
    dtype = _payload_dtype(arrays)
    version = _VERSION_BY_DTYPE[dtype]
    le = np.dtype(dtype.str.replace(">", "<").replace("=", "<"))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", version))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=le)  # tobytes() below emits C order
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"parameter name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise CheckpointError(f"parameter rank too large: {name!r}")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(arr.tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Read a checkpoint back into an ordered name -> ndarray mapping."""
    arrays = {}
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version not in _DTYPE_BY_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        dtype = _DTYPE_BY_VERSION[version]
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise CheckpointError("truncated checkpoint while reading record header")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(f, name_len, "parameter name").decode("utf-8")
            if name in arrays:
                raise CheckpointError(f"duplicate parameter name {name!r}")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, f"rank of {name!r}"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, f"extent of {name!r}"))[0]
                for _ in range(rank)
            )
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(f, count * dtype.itemsize, f"data of {name!r}")
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if not arrays:
        raise CheckpointError("checkpoint contains no parameters")
    return arrays


def weights_hash(arrays):
    """SHA-256 over names, shapes and raw bytes; order independent."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
