"""Deterministic numeric foundation: seeded RNG, stable softmax, dense matmul,
and the binary tensor container used for all on-disk artifacts.

All reference-path math is float64. Tensor files store float32 payloads
(see `write_tensor`); exact float64 persistence is available through the
bit-split helpers `f64_to_f32_pairs` / `f32_pairs_to_f64`.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Sequence

import numpy as np

from .errors import FormatError, LengthError, ShapeError

TENSOR_MAGIC = b"HFT1"

# splitmix64 constants (Steele, Lea & Flood, "Fast splittable pseudorandom
# number generators", OOPSLA 2014). The generator below is counter-based:
# draw i is the splitmix64 output for state seed + (i + 1) * GOLDEN, so any
# contiguous batch can be produced vectorized and the stream depends only on
# (seed, draw index), never on batch boundaries.
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_MASK64 = 0xFFFFFFFFFFFFFFFF

_INV_2_53 = 2.0**-53


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """Counter-based deterministic generator.

    The raw 64-bit stream is fully specified by the constants above, so the
    integer (and uniform) streams are reproducible bit-exactly for a given
    seed on any platform. Gaussian draws use Box-Muller on that uniform
    stream: a request for n values consumes exactly 2 * ceil(n / 2) raw
    draws (u1 from the first half mapped to (0, 1], u2 from the second half
    mapped to [0, 1)), and pairs are emitted as (r cos, r sin) interleaved.
    Gaussian bit patterns may differ across libm implementations; the
    distribution and the underlying uniform stream do not.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * np.uint64(_GOLDEN))

    def derive(self, stream: int) -> "SeededRng":
        """Independent child generator for a numbered stream."""
        child = _mix64_int(self.seed + (int(stream) + 1) * _GOLDEN)
        return SeededRng(child)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), 53-bit resolution."""
        if n < 0:
            raise ValueError("n must be >= 0")
        raw = self._raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def integers(self, n: int) -> np.ndarray:
        """n raw uint64 draws."""
        return self._raw(n)

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller, filled row-major."""
        if isinstance(shape, (int, np.integer)):
            out_shape: tuple = (int(shape),)
        else:
            out_shape = tuple(int(s) for s in shape)
        n = 1
        for s in out_shape:
            if s < 0:
                raise ValueError("shape entries must be >= 0")
            n *= s
        if n == 0:
            return np.zeros(out_shape, dtype=np.float64)
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        u1 = ((raw[:m] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _INV_2_53
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.empty(2 * m, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(out_shape)


def gaussian_sample(rng: SeededRng, n: int) -> np.ndarray:
    """n values from N(0, 1) on the rng's documented uniform stream."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return rng.normal(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense float64 product with explicit shape checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Rows consisting entirely of -inf come back as all zeros rather than NaN,
    which is what masked-attention callers want for fully inactive rows.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D matrix, got shape {m.shape}")
    row_max = np.max(m, axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(m - row_max)
    denom = e.sum(axis=1, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


# ---------------------------------------------------------------------------
# Tensor container: b"HFT1" | u32 rank | rank * u32 dims | prod(dims) * f32,
# all little-endian.
# ---------------------------------------------------------------------------

_MAX_RANK = 64


def write_tensor(path_or_file, shape: Sequence[int], data) -> None:
    """Write one tensor. float32 input is stored verbatim (bit-preserving);
    anything else is cast to float32 first."""
    dims = tuple(int(d) for d in shape)
    if any(d < 0 for d in dims):
        raise ShapeError(f"negative dimension in shape {dims}")
    count = 1
    for d in dims:
        count *= d
    arr = np.asarray(data)
    if arr.size != count:
        raise ShapeError(f"shape {dims} expects {count} values, got {arr.size}")
    payload = np.ascontiguousarray(arr.reshape(-1), dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)

    if hasattr(path_or_file, "write"):
        path_or_file.write(header)
        path_or_file.write(payload.tobytes())
    else:
        with open(path_or_file, "wb") as f:
            f.write(header)
            f.write(payload.tobytes())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor_from(f: BinaryIO, allow_trailing: bool = True):
    """Read one tensor from an open binary stream. Returns (shape, float32 array)."""
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "header"))
    if rank > _MAX_RANK:
        raise FormatError(f"implausible rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "header"))
    count = 1
    for d in dims:
        count *= d
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise LengthError(
            f"payload for shape {dims} needs {count} f32 values, got {len(payload) // 4}"
        )
    if not allow_trailing:
        extra = f.read(1)
        if extra:
            raise LengthError(f"trailing bytes after payload for shape {dims}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return tuple(dims), data


def read_tensor(path):
    """Read a tensor file. Returns (shape, float32 array); the file must
    contain exactly one tensor."""
    with open(path, "rb") as f:
        return read_tensor_from(f, allow_trailing=False)


# ---------------------------------------------------------------------------
# Exact float64 persistence inside the float32 container: each f64 is split
# into its two 32-bit halves, which are stored bit-for-bit as two "f32"
# payload entries. Pure reinterpretation, no arithmetic, so every f64 bit
# pattern round-trips exactly.
# ---------------------------------------------------------------------------


def f64_to_f32_pairs(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype="<f8")
    u = a.view("<u8")
    hi = (u >> np.uint64(32)).astype("<u4")
    lo = (u & np.uint64(0xFFFFFFFF)).astype("<u4")
    return np.stack([hi, lo]).view("<f4")


def f32_pairs_to_f64(pairs: np.ndarray) -> np.ndarray:
    pairs = np.ascontiguousarray(pairs, dtype="<f4")
    if pairs.ndim < 1 or pairs.shape[0] != 2:
        raise ShapeError(f"expected leading dimension 2, got shape {pairs.shape}")
    u = pairs.view("<u4").astype("<u8")
    rebuilt = np.ascontiguousarray((u[0] << np.uint64(32)) | u[1])
    return rebuilt.view("<f8")


def write_f64_tensor(f: BinaryIO, a: np.ndarray) -> None:
    pairs = f64_to_f32_pairs(np.asarray(a, dtype=np.float64))
    write_tensor(f, pairs.shape, pairs)


def read_f64_tensor(f: BinaryIO) -> np.ndarray:
    shape, pairs = read_tensor_from(f)
    if len(shape) < 1 or shape[0] != 2:
        raise FormatError(f"not a split-f64 tensor: shape {shape}")
    return f32_pairs_to_f64(pairs)


def tensor_bytes(shape: Sequence[int], data) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, shape, data)
    return buf.getvalue()
