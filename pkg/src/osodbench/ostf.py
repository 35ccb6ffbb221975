"""Reader/writer for the OSTF portable tensor file format.

Layout (all integers little-endian):

    magic   "OSTF"                      4 bytes
    version u32 = 1
    kind    u8   (0 = feature map H x W x d, 1 = attention stack h_a x H x W)
    dims    3 x u32, in the kind's stated order
    stride  u32  patch stride in pixels (0 if not applicable)
    payload dim-product f32 IEEE-754 values, row-major (last dim fastest)

Reading then writing a valid file reproduces it byte for byte.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import OstfDataError, OstfFormatError, OstfTruncationError

MAGIC = b"OSTF"
VERSION = 1
KIND_FEATURE_MAP = 0
KIND_ATTENTION_STACK = 1

_HEADER = struct.Struct("<4sIB3II")  # magic, version, kind, dims, stride


@dataclass(frozen=True)
class FeatureMap:
    """Dense per-patch feature grid of shape (H, W, d), float32."""

    values: np.ndarray
    patch_stride: int = 0

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 3:
            raise ValueError(f"feature map must be H x W x d, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1 or v.shape[2] < 1:
            raise ValueError(f"feature map dims must be >= 1, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("feature map contains non-finite values")
        if self.patch_stride < 0:
            raise ValueError("patch_stride must be >= 0")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class AttentionStack:
    """Stack of h_a non-negative attention maps of shape (h_a, H, W), float32."""

    maps: np.ndarray
    patch_stride: int = 0

    def __post_init__(self) -> None:
        m = self.maps
        if m.ndim != 3:
            raise ValueError(f"attention stack must be h_a x H x W, got shape {m.shape}")
        if m.shape[0] < 1 or m.shape[1] < 1 or m.shape[2] < 1:
            raise ValueError(f"attention dims must be >= 1, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("attention stack contains non-finite values")
        if (m < 0).any():
            raise ValueError("attention values must be >= 0")
        if self.patch_stride < 0:
            raise ValueError("patch_stride must be >= 0")

    @property
    def heads(self) -> int:
        return self.maps.shape[0]

    @property
    def height(self) -> int:
        return self.maps.shape[1]

    @property
    def width(self) -> int:
        return self.maps.shape[2]


def read_tensor_file(path: str | Path) -> FeatureMap | AttentionStack:
    """Read an OSTF file into a fully materialized dense array.

    Raises :class:`OstfFormatError` for a bad header,
    :class:`OstfTruncationError` when the payload length does not match the
    declared dimensions, and :class:`OstfDataError` for values violating the
    type invariants (non-finite anywhere, negative attention).
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise OstfTruncationError(f"{path}: file shorter than the OSTF header")
    magic, version, kind, d0, d1, d2, stride = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise OstfFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise OstfFormatError(f"{path}: unsupported version {version}")
    if kind not in (KIND_FEATURE_MAP, KIND_ATTENTION_STACK):
        raise OstfFormatError(f"{path}: unknown kind {kind}")
    count = d0 * d1 * d2
    payload = raw[_HEADER.size:]
    if len(payload) != count * 4:
        raise OstfTruncationError(
            f"{path}: declared {count} values ({count * 4} bytes) but payload is {len(payload)} bytes"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(d0, d1, d2)
    if not np.isfinite(values).all():
        raise OstfDataError(f"{path}: payload contains non-finite values")
    try:
        if kind == KIND_FEATURE_MAP:
            return FeatureMap(values=values, patch_stride=stride)
        if (values < 0).any():
            raise OstfDataError(f"{path}: attention payload contains negative values")
        return AttentionStack(maps=values, patch_stride=stride)
    except ValueError as exc:
        raise OstfDataError(f"{path}: {exc}") from exc


def write_tensor_file(tensor: FeatureMap | AttentionStack, path: str | Path) -> None:
    """Serialize a tensor to OSTF, bit-exactly invertible by :func:`read_tensor_file`."""
    if isinstance(tensor, FeatureMap):
        kind, arr = KIND_FEATURE_MAP, tensor.values
    elif isinstance(tensor, AttentionStack):
        kind, arr = KIND_ATTENTION_STACK, tensor.maps
    else:
        raise TypeError(f"expected FeatureMap or AttentionStack, got {type(tensor).__name__}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = _HEADER.pack(MAGIC, VERSION, kind, arr.shape[0], arr.shape[1], arr.shape[2], tensor.patch_stride)
    Path(path).write_bytes(header + arr.tobytes())
