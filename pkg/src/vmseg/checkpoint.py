"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      4 bytes  b"VMSU"
    version    u32      currently 1
    count      u32      number of tensors
    per tensor:
        name_len u16, name (UTF-8)
        ndim     u8, dims u32 * ndim
        dtype    u8   (0 = float32, 1 = float64)
        payload  row-major values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"VMSU"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODE_OF.get(arr.dtype)
        if code is None:
            raise CheckpointFormatError("dtype", f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, field: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(field, f"truncated: need {n} bytes at offset {pos}, have {len(view) - pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointFormatError("magic", f"expected {MAGIC!r}, got {bytes(view[:4])!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointFormatError("version", f"unsupported version {version}")
    (count,) = struct.unpack("<I", take(4, "count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("name", f"invalid UTF-8: {exc}") from None
        (ndim,) = struct.unpack("<B", take(1, f"{name}.ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name}.dims"))
        (code,) = struct.unpack("<B", take(1, f"{name}.dtype"))
        if code not in DTYPE_CODES:
            raise CheckpointFormatError(f"{name}.dtype", f"unknown dtype code {code}")
        dt = DTYPE_CODES[code]
        n = int(np.prod(dims, dtype=np.int64))
        payload = take(n * dt.itemsize, f"{name}.payload")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise CheckpointFormatError("payload", f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(net, path=None) -> bytes:
    """Serialise every parameter of ``net``; also written to ``path`` when given."""
    blob = encode_tensors({name: p.data for name, p in net.params.items()})
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def load_checkpoint(blob_or_path, net):
    """Copy tensors from a checkpoint into ``net`` (built from the matching config)."""
    blob = blob_or_path
    if isinstance(blob_or_path, (str, Path)):
        blob = Path(blob_or_path).read_bytes()
    tensors = decode_tensors(blob)
    for name, arr in tensors.items():
        if name not in net.params:
            raise CheckpointFormatError("name", f"unknown tensor {name!r} for this network")
        if arr.shape != net.params[name].shape:
            raise CheckpointFormatError(f"{name}.dims", f"shape {arr.shape} != expected {net.params[name].shape}")
    missing = set(net.params) - set(tensors)
    if missing:
        raise CheckpointFormatError("name", f"checkpoint lacks tensors {sorted(missing)}")
    for name, arr in tensors.items():
        p = net.params[name]
        p.data = arr.copy()
        p.zero_grad()
    return net
