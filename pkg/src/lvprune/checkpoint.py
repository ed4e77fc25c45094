"""Versioned binary checkpoint container.

Layout (all integers little-endian):
  magic    4 bytes  b"LVPR"
  version  u32
  fp_len   u16, then the architecture fingerprint (utf-8)
  rng_len  u32, then the RNG state (utf-8 JSON)
  count    u32
  per tensor: name_len u16, name utf-8, ndim u8, dims u64 each,
              float64 little-endian row-major data

The fingerprint sits before any tensor data, so loading into a mismatched
architecture fails before any computation.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"LVPR"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The checkpoint is malformed or incompatible."""


def save_checkpoint(
    path: str,
    fingerprint: str,
    tensors: dict[str, np.ndarray],
    rng_state: dict | None = None,
) -> None:
    rng_blob = json.dumps(rng_state or {}, sort_keys=True, default=str).encode()
    fp = fingerprint.encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<H", len(fp)))
        fh.write(fp)
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            data = np.ascontiguousarray(array, dtype="<f8")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(data.tobytes())


def _read(fh, size: int) -> bytes:
    blob = fh.read(size)
    if len(blob) != size:
        raise CheckpointError("truncated checkpoint")
    return blob


def load_checkpoint(
    path: str, expected_fingerprint: str | None = None
) -> tuple[str, dict[str, np.ndarray], dict]:
    """Returns (fingerprint, tensors, rng_state); checks the fingerprint
    before reading any tensor payload."""
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise CheckpointError("bad magic bytes (not an LVPR checkpoint)")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        (fp_len,) = struct.unpack("<H", _read(fh, 2))
        fingerprint = _read(fh, fp_len).decode()
        if expected_fingerprint is not None and fingerprint != expected_fingerprint:
            raise CheckpointError(
                f"architecture fingerprint mismatch: checkpoint {fingerprint}, "
                f"config {expected_fingerprint}"
            )
        (rng_len,) = struct.unpack("<I", _read(fh, 4))
        rng_state = json.loads(_read(fh, rng_len).decode()) if rng_len else {}
        (count,) = struct.unpack("<I", _read(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, name_len).decode()
            (ndim,) = struct.unpack("<B", _read(fh, 1))
            shape = tuple(struct.unpack("<Q", _read(fh, 8))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape)
            tensors[name] = data.astype(np.float64)
        return fingerprint, tensors, rng_state
