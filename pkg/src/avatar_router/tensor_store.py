"""BYAT tensor files, token-grid indexing and pixel-to-token mask pooling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"BYAT"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.uint8): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype(np.uint8)}
HEADER_SIZE = 8


class TensorFormatError(ValueError):
    """Raised when a BYAT file is malformed."""


@dataclass(frozen=True)
class TokenGridDims:
    t_len: int
    h_len: int
    w_len: int

    def __post_init__(self):
        if min(self.t_len, self.h_len, self.w_len) <= 0:
            raise ValueError(f"token grid dims must be positive, got {self}")

    @property
    def size(self) -> int:
        return self.t_len * self.h_len * self.w_len

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.t_len, self.h_len, self.w_len)


def write_tensor(array, path, shape=None) -> None:
    """Write ``array`` as a BYAT file.

    If ``shape`` is given, ``array`` is taken as flat row-major data and must
    hold exactly ``prod(shape)`` elements; nothing is written otherwise.
    """
    data = np.asarray(array)
    if data.dtype not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {data.dtype}; expected float32 or uint8")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if data.size != int(np.prod(shape)):
            raise ValueError(f"data has {data.size} elements but shape {shape} needs {int(np.prod(shape))}")
        data = data.reshape(shape)
    if data.ndim == 0 or data.ndim > 255:
        raise ValueError("rank must be in [1, 255]")
    if any(s <= 0 for s in data.shape):
        raise ValueError(f"all dims must be positive, got {data.shape}")
    if data.dtype == np.float32 and not np.all(np.isfinite(data)):
        raise ValueError("f32 tensor contains non-finite values")

    header = MAGIC + struct.pack("<BBBB", VERSION, _DTYPE_CODES[data.dtype], data.ndim, 0)
    dims = struct.pack(f"<{data.ndim}I", *data.shape)
    payload = np.ascontiguousarray(data).astype(data.dtype.newbyteorder("<"), copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + dims + payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    version, code, rank, _ = struct.unpack("<BBBB", raw[4:8])
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    if rank == 0:
        raise TensorFormatError(f"{path}: rank 0")
    dims_end = HEADER_SIZE + 4 * rank
    if len(raw) < dims_end:
        raise TensorFormatError(f"{path}: truncated dims")
    shape = struct.unpack(f"<{rank}I", raw[HEADER_SIZE:dims_end])
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - dims_end != expected:
        raise TensorFormatError(f"{path}: payload is {len(raw) - dims_end} bytes, expected {expected}")
    out = np.frombuffer(raw, dtype=dtype, offset=dims_end).reshape(shape)
    return out.astype(dtype.newbyteorder("="), copy=True)


def token_flatten(t: int, h: int, w: int, dims: TokenGridDims) -> int:
    if not (0 <= t < dims.t_len and 0 <= h < dims.h_len and 0 <= w < dims.w_len):
        raise IndexError(f"token index {(t, h, w)} out of range for {dims}")
    return t * dims.h_len * dims.w_len + h * dims.w_len + w


def token_unflatten(index: int, dims: TokenGridDims) -> tuple[int, int, int]:
    if not 0 <= index < dims.size:
        raise IndexError(f"flat index {index} out of range for {dims}")
    t, rem = divmod(index, dims.h_len * dims.w_len)
    h, w = divmod(rem, dims.w_len)
    return t, h, w


def token_positions(dims: TokenGridDims) -> np.ndarray:
    """(S, 3) array of (t, h, w) per flat token, in canonical order."""
    t, h, w = np.meshgrid(np.arange(dims.t_len), np.arange(dims.h_len), np.arange(dims.w_len), indexing="ij")
    return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)


def downsample_mask(pixel_mask, spatial_factor: int, patch: int) -> np.ndarray:
    """Area-mean pool an ``n x T x H x W`` mask by ``spatial_factor * patch``."""
    m = np.asarray(pixel_mask)
    if m.ndim != 4:
        raise ValueError(f"expected n x T x H x W mask, got shape {m.shape}")
    k = spatial_factor * patch
    n, t, h, w = m.shape
    if h % k or w % k:
        raise ValueError(f"mask {h}x{w} not divisible by block {k}")
    blocks = m.astype(np.float64).reshape(n, t, h // k, k, w // k, k)
    return blocks.mean(axis=(3, 5)).astype(np.float32)


def with_background(char_probs: np.ndarray) -> np.ndarray:
    """Append the background channel ``1 - sum(chars)`` along axis 0."""
    bg = np.clip(1.0 - char_probs.sum(axis=0, keepdims=True), 0.0, 1.0)
    return np.concatenate([char_probs, bg.astype(char_probs.dtype)], axis=0)


# Half-covered cells are common on the toy grid; characters win such ties.
TIE_MARGIN = 1e-4


def hard_labels(char_probs: np.ndarray) -> np.ndarray:
    """Argmax class per cell, background (index n) included."""
    probs = with_background(char_probs)
    probs[-1] -= TIE_MARGIN
    return probs.argmax(axis=0)
