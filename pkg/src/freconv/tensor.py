"""Dense rank-4 tensors, a portable seeded generator, and the FRTN file format.

Tensors are plain ``numpy.ndarray`` objects of rank 4 in ``n, c, h, w``
row-major (C-contiguous) order. Vectors and matrices are degenerate 4-tensors.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ShapeError, SizeOverflowError

DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

MAGIC = b"FRTN"
VERSION = 1
HEADER = struct.Struct("<4sIII4I")


def _check_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"tensors are rank 4, got shape {shape}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    limit = np.iinfo(np.intp).max
    total = 1
    for s in shape:
        total *= s
        if total > limit:
            raise SizeOverflowError(f"element count of shape {shape} overflows the index type")
    return shape


def tensor_create(shape, fill: float = 0.0, dtype=np.float64) -> np.ndarray:
    """Tensor of ``shape`` with every element equal to ``fill``."""
    shape = _check_shape(shape)
    return np.full(shape, fill, dtype=dtype)


def flat_offset(shape, i: int, j: int, y: int, x: int) -> int:
    """Row-major offset of element ``(i, j, y, x)``."""
    _, c, h, w = shape
    return ((i * c + j) * h + y) * w + x


def as_tensor(a, dtype=None) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got rank {a.ndim}")
    return a


# -- random generation -------------------------------------------------------

@dataclass(frozen=True)
class Uniform:
    a: float = 0.0
    b: float = 1.0


@dataclass(frozen=True)
class Normal:
    mu: float = 0.0
    sigma: float = 1.0


class Rng:
    """Seeded generator built on the Philox-4x64 counter-based bit generator.

    Only the raw 64-bit stream of Philox is used; floats and normals are
    derived here (53-bit mantissa uniforms, Box-Muller normals) so the output
    does not depend on numpy's distribution code.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.Philox(key=self.seed, counter=0)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def random(self, size=None):
        """Uniform doubles in [0, 1); a Python float when ``size`` is None."""
        n = 1 if size is None else int(np.prod(size, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, a: float, b: float, size) -> np.ndarray:
        if not a < b:
            raise ParameterError(f"uniform needs a < b, got a={a}, b={b}")
        return a + (b - a) * self.random(size)

    def normal(self, mu: float, sigma: float, size) -> np.ndarray:
        if not sigma > 0:
            raise ParameterError(f"normal needs sigma > 0, got {sigma}")
        n = int(np.prod(size, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (mu + sigma * z).reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream, keyed by this seed and ``tag``."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + int(tag) + 1) & 0xFFFFFFFFFFFFFFFF)


def seeded_fill(rng: Rng, tensor: np.ndarray, dist) -> np.ndarray:
    """Fill ``tensor`` in place with i.i.d. draws from ``dist`` and return it."""
    if isinstance(dist, Uniform):
        values = rng.uniform(dist.a, dist.b, tensor.shape)
    elif isinstance(dist, Normal):
        values = rng.normal(dist.mu, dist.sigma, tensor.shape)
    else:
        raise ParameterError(f"unknown distribution {dist!r}")
    tensor[...] = values
    return tensor


# -- FRTN I/O ----------------------------------------------------------------

def encode_tensor(tensor: np.ndarray) -> bytes:
    t = as_tensor(tensor)
    code = DTYPE_CODES.get(t.dtype)
    if code is None:
        raise ParameterError(f"FRTN stores float32/float64 only, got {t.dtype}")
    head = HEADER.pack(MAGIC, VERSION, code, 4, *t.shape)
    return head + t.astype(DTYPES[code], copy=False).tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", len(buf))
    _, version, code, ndim, *shape = HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", 8)
    if ndim != 4:
        raise FormatError(f"ndim must be 4, got {ndim}", 12)
    dtype = DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64))
    payload = len(buf) - HEADER.size
    found, rem = divmod(payload, dtype.itemsize)
    if found != expected or rem:
        raise FormatError(
            f"shape {tuple(shape)} needs {expected} values, found {found}"
            + (f" plus {rem} stray bytes" if rem else ""),
            HEADER.size,
        )
    data = np.frombuffer(buf, dtype=dtype, offset=HEADER.size, count=expected)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, tensor: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
