"""Binary parameter checkpoints.

Layout (little-endian):
    magic "TNP1" | u32 version | u32 digest_len | digest bytes (utf-8 hex)
    | u32 n_blocks, then per block:
    u32 name_len | name utf-8 | u32 ndim | u32 dims... | float64 data

Round trips are byte-exact: float64 payloads are written verbatim.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .ioutil import atomic_write_bytes

MAGIC = b"TNP1"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, named_arrays, config_digest: str):
    """Write (name, array) pairs in order, tagged with a config digest."""
    buf = io.BytesIO()
    digest = config_digest.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(digest)))
    buf.write(digest)
    items = list(named_arrays.items()) if isinstance(named_arrays, dict) else list(named_arrays)
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    """Return (config_digest, ordered dict name -> float64 array)."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a TNP1 checkpoint")
    version, dlen = struct.unpack("<II", buf.read(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = buf.read(dlen).decode("utf-8")
    (n_blocks,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(n_blocks):
        (nlen,) = struct.unpack("<I", buf.read(4))
        name = buf.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise CheckpointError(f"{path}: truncated block '{name}'")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return digest, out
