"""Dense tensor primitives.

Tensors are plain row-major ``numpy.ndarray`` objects of ``float64`` (the
default) or ``float32``. This module adds the few operations the layers need
on top of numpy: a shape-checked matmul, im2col/col2im patch rearrangement
and the ``FBKT`` binary serialization used for checkpoints.

im2col column layout
--------------------
Row ``r`` of the patch matrix is ``c * kh * kw + di * kw + dj`` (channel-major,
then row-major inside the kernel window). Column ``i`` is the output location
``oh * Wo + ow``. Padding contributes zeros.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import DimensionError

DEFAULT_DTYPE = np.float64

_MAGIC = b"FBKT"
_WIDTH_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def as_tensor(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Contiguous copy of ``data`` in one of the supported float widths."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise DimensionError(f"unsupported element type {dtype}; use float32 or float64")
    return np.ascontiguousarray(np.array(data, dtype=dtype))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a`` (m x p) and ``b`` (p x q)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be positive, got {getattr(self, name)}")
        if self.pad < 0:
            raise DimensionError(f"pad must be non-negative, got {self.pad}")

    @property
    def patch_size(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.pad - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel_w) // self.stride + 1
        if h + 2 * self.pad < self.kernel_h or w + 2 * self.pad < self.kernel_w or ho < 1 or wo < 1:
            raise DimensionError(
                f"geometry {self} gives empty output for input {h}x{w}"
            )
        return ho, wo

    def to_dict(self) -> dict:
        return asdict(self)


def _check_input(x: np.ndarray, g: ConvGeometry, batched: bool) -> None:
    rank = 4 if batched else 3
    if x.ndim != rank:
        raise DimensionError(f"expected a rank-{rank} input, got shape {x.shape}")
    if x.shape[-3] != g.in_channels:
        raise DimensionError(
            f"input has {x.shape[-3]} channels, geometry expects {g.in_channels}"
        )


def im2col_batch(x: np.ndarray, g: ConvGeometry) -> np.ndarray:
    """Patch matrices for a batch: (N, C, H, W) -> (N, C*kh*kw, Ho*Wo)."""
    _check_input(x, g, batched=True)
    n, c, h, w = x.shape
    ho, wo = g.output_hw(h, w)
    if g.pad:
        x = np.pad(x, ((0, 0), (0, 0), (g.pad, g.pad), (g.pad, g.pad)))
    s = g.stride
    cols = np.empty((n, c, g.kernel_h, g.kernel_w, ho, wo), dtype=x.dtype)
    for di in range(g.kernel_h):
        for dj in range(g.kernel_w):
            cols[:, :, di, dj] = x[:, :, di:di + s * ho:s, dj:dj + s * wo:s]
    return cols.reshape(n, g.patch_size, ho * wo)


def im2col(x: np.ndarray, g: ConvGeometry) -> np.ndarray:
    """Patch matrix of one image: (C, H, W) -> (C*kh*kw, Ho*Wo)."""
    _check_input(x, g, batched=False)
    return im2col_batch(x[None], g)[0]


def col2im_batch(cols: np.ndarray, g: ConvGeometry, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`im2col_batch`; overlapping contributions are summed."""
    ho, wo = g.output_hw(h, w)
    if cols.ndim != 3 or cols.shape[1:] != (g.patch_size, ho * wo):
        raise DimensionError(
            f"cols shape {cols.shape} does not match geometry "
            f"(expected (N, {g.patch_size}, {ho * wo}))"
        )
    n = cols.shape[0]
    c, s, p = g.in_channels, g.stride, g.pad
    cols = cols.reshape(n, c, g.kernel_h, g.kernel_w, ho, wo)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for di in range(g.kernel_h):
        for dj in range(g.kernel_w):
            out[:, :, di:di + s * ho:s, dj:dj + s * wo:s] += cols[:, :, di, dj]
    if p:
        out = out[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(out)


def col2im(cols: np.ndarray, g: ConvGeometry, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`im2col` for one image: returns (C, H, W)."""
    if cols.ndim != 2:
        raise DimensionError(f"expected a rank-2 patch matrix, got shape {cols.shape}")
    return col2im_batch(cols[None], g, h, w)[0]


# -- serialization -----------------------------------------------------------

def write_tensor(fp: BinaryIO, t: np.ndarray) -> None:
    """Write ``t`` as: b"FBKT", u8 width in bytes, u8 rank, u64 extents, payload."""
    t = np.asarray(t)
    width = t.dtype.itemsize
    if t.dtype.kind != "f" or width not in _WIDTH_CODES:
        raise DimensionError(f"cannot serialize dtype {t.dtype}")
    fp.write(_MAGIC)
    fp.write(struct.pack("<BB", width, t.ndim))
    fp.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    fp.write(np.ascontiguousarray(t, dtype=_WIDTH_CODES[width]).tobytes())


def read_tensor(fp: BinaryIO) -> np.ndarray:
    magic = fp.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    width, rank = struct.unpack("<BB", fp.read(2))
    if width not in _WIDTH_CODES:
        raise ValueError(f"unknown element width code {width}")
    shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    payload = fp.read(count * width)
    if len(payload) != count * width:
        raise ValueError(f"truncated tensor payload: wanted {count * width} bytes, got {len(payload)}")
    dtype = _WIDTH_CODES[width]
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path: str | Path, t: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, t)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_tensor(fp)
