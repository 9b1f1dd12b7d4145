"""Low-level numeric kernels shared by every other module.

All kernels are pure functions of their inputs (plus an explicit RNG state),
so repeated calls are bit-identical within a fixed environment.  Default
precision is float32; pass ``dtype=np.float64`` where tests need tighter
accumulation.  Reductions go through numpy/BLAS: with a fixed thread count
results are reproducible run to run, and parallel BLAS is documented to agree
with the single-threaded result within 1e-5 relative.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """Stable 64-bit FNV-1a hash, used to derive named RNG streams."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _mix64(seed: np.uint64, counters: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer applied to (seed, counter); counter-based so any
    # sub-range of the stream can be generated independently.
    z = seed + (counters + np.uint64(1)) * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@dataclass
class SeededRng:
    """Counter-based RNG: the output stream is a pure function of (seed, counter).

    Instances are cheap; give each logical noise stream its own instance and
    never share one across threads.
    """

    seed: int
    counter: int = 0

    def derive(self, label: str) -> "SeededRng":
        """Independent stream keyed by a name; does not advance this stream."""
        mixed = (self.seed ^ fnv1a64(label.encode("utf-8"))) & 0xFFFFFFFFFFFFFFFF
        return SeededRng(seed=int(_mix64(np.uint64(mixed), np.asarray([0], np.uint64))[0]))

    def _raw64(self, n: int) -> np.ndarray:
        counters = np.uint64(self.counter) + np.arange(n, dtype=np.uint64)
        out = _mix64(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF), counters)
        self.counter += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), 53-bit resolution."""
        return (self._raw64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randint(self, lo: int, hi: int, size=None):
        """Integers in [lo, hi); scalar when size is None."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        n = 1 if size is None else int(np.prod(size))
        vals = lo + np.minimum(np.floor(self.uniform(n) * (hi - lo)), hi - lo - 1).astype(np.int64)
        return int(vals[0]) if size is None else vals.reshape(size)

    def choice(self, seq):
        return seq[self.randint(0, len(seq))]


def gaussian_noise(shape, rng: SeededRng, dtype=None) -> np.ndarray:
    """Standard normal draws via Box-Muller from the counter stream.

    Always consumes an even number of counter steps (two per pair), so the
    stream position after a call depends only on the requested size.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) == 0:
        raise ValueError("shape must be nonempty")
    if any(s <= 0 for s in shape):
        raise ValueError(f"all extents must be positive, got {shape}")
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs).reshape(2, pairs)
    u1 = 1.0 - u[0]  # (0, 1] so the log is finite
    u2 = u[1]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    out = z[:n].reshape(shape)
    return out.astype(dtype or DEFAULT_DTYPE)


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-subtraction for stability."""
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise ValueError("last dimension must be >= 1")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit inner-extent validation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents do not match: {a.shape} x {b.shape}")
    return np.matmul(a, b)


# --- CVT1 raw tensor container ------------------------------------------------
# bytes 'C','V','T','1'; 1 byte dtype (1 = f32, 2 = f64); u32 LE rank;
# rank x u32 LE dims; payload row-major LE.

_CVT1_MAGIC = b"CVT1"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_BYTES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def save_cvt1(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_BYTES:
        raise ValueError(f"CVT1 stores f32/f64 only, got {arr.dtype}")
    with open(path, "wb") as f:
        f.write(_CVT1_MAGIC)
        f.write(struct.pack("<B", _DTYPE_BYTES[arr.dtype]))
        f.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_cvt1(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CVT1_MAGIC:
            raise ValueError(f"not a CVT1 file: magic {magic!r}")
        (code,) = struct.unpack("<B", f.read(1))
        if code not in _DTYPE_CODES:
            raise ValueError(f"unknown CVT1 dtype code {code}")
        (rank,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        dt = _DTYPE_CODES[code]
        payload = f.read(int(np.prod(dims, dtype=np.int64)) * dt.itemsize)
        arr = np.frombuffer(payload, dtype=dt).reshape(dims)
    return arr.astype(dt.newbyteorder("="))
