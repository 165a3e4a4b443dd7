"""Dense NCHW tensors, channel slicing, and the im2col/GEMM lowering.

Every convolution in the package is expressed as ``im2col`` followed by
``matmul``. Data is always float32 and C-contiguous, so a channel slice of a
single image is one contiguous block of memory.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BoundsError, DimensionError, GeometryError, ShapeError

DTYPE = np.float32

_MAX_ELEMENTS = np.iinfo(np.int64).max
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_RNG_CHUNK = 1 << 20

MAGIC = b"PCLT"
FORMAT_VERSION = 1


def _check_dims(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if any(d < 1 for d in dims):
        raise DimensionError(f"all dimensions must be >= 1, got {dims}")
    total = 1
    for d in dims:
        total *= d
        if total > _MAX_ELEMENTS:
            raise DimensionError(f"element count of {dims} overflows int64")
    return dims


class Tensor:
    """Immutable 4-D float32 feature map laid out as (n, c, h, w).

    The public constructor copies its input; operators hand freshly allocated
    buffers to :meth:`wrap` instead.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=DTYPE, copy=True, order="C")
        self._adopt(arr)

    def _adopt(self, arr: np.ndarray) -> None:
        if arr.ndim != 4:
            raise DimensionError(f"expected a 4-D (n, c, h, w) array, got shape {arr.shape}")
        _check_dims(arr.shape)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Take ownership of ``arr`` without copying (it becomes read-only)."""
        if arr.dtype != DTYPE or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=DTYPE)
        t = cls.__new__(cls)
        t._adopt(arr)
        return t

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def offset(self, n: int, c: int, y: int, x: int) -> int:
        _, C, H, W = self.shape
        return ((n * C + c) * H + y) * W + x

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


def splitmix64(seed: int, count: int, start: int = 0) -> np.ndarray:
    """Return ``count`` outputs of the SplitMix64 generator seeded with ``seed``.

    Output ``i`` equals the ``start + i + 1``-th value of the sequential
    generator ``state += 0x9E3779B97F4A7C15; mix(state)``, so chunks can be
    produced independently.
    """
    state0 = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = state0 + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniform_buffer(seed: int, count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Deterministic float32 samples in ``[low, high)``.

    Each sample uses the top 24 bits of a SplitMix64 output, giving a value
    exactly representable in float32 before the affine map.
    """
    out = np.empty(count, dtype=DTYPE)
    span = float(high) - float(low)
    for start in range(0, count, _RNG_CHUNK):
        n = min(_RNG_CHUNK, count - start)
        bits = splitmix64(seed, n, start) >> np.uint64(40)
        u = bits.astype(np.float64) * (1.0 / (1 << 24))
        out[start:start + n] = low + span * u
    return out


def tensor_new(shape: Sequence[int], fill: str = "zeros", *, value: float = 0.0,
               seed: int = 0, low: float = 0.0, high: float = 1.0) -> Tensor:
    """Allocate a tensor.

    ``fill`` is one of ``"zeros"``, ``"ones"``, ``"constant"`` (uses ``value``)
    or ``"uniform"`` (SplitMix64 seeded by ``seed`` over ``[low, high)``).
    """
    dims = _check_dims(shape)
    if len(dims) != 4:
        raise DimensionError(f"tensor shape must have 4 dims, got {dims}")
    if fill == "zeros":
        arr = np.zeros(dims, dtype=DTYPE)
    elif fill == "ones":
        arr = np.ones(dims, dtype=DTYPE)
    elif fill == "constant":
        arr = np.full(dims, value, dtype=DTYPE)
    elif fill == "uniform":
        arr = uniform_buffer(seed, int(np.prod(dims)), low, high).reshape(dims)
    else:
        raise ValueError(f"unknown fill mode {fill!r}")
    return Tensor.wrap(arr)


def slice_channels(t: Tensor, start: int, count: int) -> Tensor:
    """Copy channels ``[start, start + count)`` into a new tensor."""
    if start < 0 or count < 1 or start + count > t.c:
        raise BoundsError(f"channel slice [{start}, {start + count}) outside 0..{t.c}")
    return Tensor.wrap(t.data[:, start:start + count].copy())


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.n != b.n or a.h != b.h or a.w != b.w:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return Tensor.wrap(np.concatenate((a.data, b.data), axis=1))


def output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise GeometryError(f"kernel {k} larger than padded input {h}x{w} (pad {pad})")
    ho = output_size(h, k, stride, pad)
    wo = output_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, n, ho, wo), dtype=DTYPE)
    for ky in range(k):
        y_end = ky + stride * (ho - 1) + 1
        for kx in range(k):
            x_end = kx + stride * (wo - 1) + 1
            cols[:, ky, kx] = xp[:, :, ky:y_end:stride, kx:x_end:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def im2col(t: Tensor, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower ``t`` to a ``(C*k*k, n*Hout*Wout)`` patch matrix.

    Row ``(c*k + ky)*k + kx`` holds input channel ``c`` at kernel offset
    ``(ky, kx)``; column ``(n*Hout + oy)*Wout + ox`` is one output position.
    Padded positions contribute zeros.
    """
    return _im2col(t.data, k, stride, pad)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int,
            stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch columns back to an image."""
    n, c, h, w = shape
    ho = output_size(h, k, stride, pad)
    wo = output_size(w, k, stride, pad)
    cols = cols.reshape(c, k, k, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for ky in range(k):
        y_end = ky + stride * (ho - 1) + 1
        for kx in range(k):
            x_end = kx + stride * (wo - 1) + 1
            xp[:, :, ky:y_end:stride, kx:x_end:stride] += cols[:, ky, kx].transpose(1, 0, 2, 3)
    return xp[:, :, pad:pad + h, pad:pad + w]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-major float32 matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a.astype(DTYPE, copy=False), b.astype(DTYPE, copy=False))


def save_tensor(path, arr) -> None:
    """Write ``arr`` in the PCLT binary format (any rank)."""
    arr = np.asarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<BI", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a PCLT file")
    version, rank = struct.unpack_from("<BI", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported PCLT version {version}")
    offset = 4 + 5
    dims = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if offset + 4 * count != len(raw):
        raise ValueError(f"{path}: payload size does not match header dims {dims}")
    return payload.astype(DTYPE).reshape(dims)
