"""Minimal OSTF writer.

The format is owned by the consuming toolkit; this module only produces it.
Layout: magic "OSTF", u32 version = 1, u8 kind (0 feature map H x W x d,
1 attention stack h_a x H x W), three u32 dims, u32 patch stride, then the
row-major float32 payload. All integers little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OSTF"
VERSION = 1
KIND_FEATURE_MAP = 0
KIND_ATTENTION_STACK = 1

_HEADER = struct.Struct("<4sIB3II")


def write_ostf(kind: int, values: np.ndarray, patch_stride: int, path: str | Path) -> None:
    if kind not in (KIND_FEATURE_MAP, KIND_ATTENTION_STACK):
        raise ValueError(f"unknown kind {kind}")
    if values.ndim != 3:
        raise ValueError(f"payload must be 3-d, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError("payload contains non-finite values")
    arr = np.ascontiguousarray(values, dtype="<f4")
    header = _HEADER.pack(MAGIC, VERSION, kind, arr.shape[0], arr.shape[1], arr.shape[2], patch_stride)
    Path(path).write_bytes(header + arr.tobytes())
