"""Dense tensor primitives shared by every layer in the package.

Tensors are plain C-contiguous ``numpy.ndarray`` values of dtype float32 or
float64.  Every primitive here

* checks shapes explicitly (no implicit broadcasting, except the
  vector-over-rows case used for per-dimension recurrence vectors and biases),
* raises :class:`NumericError` instead of returning NaN/Inf,
* optionally bumps a :class:`FlopCounter` passed in by the caller.

Two execution modes exist.  In deterministic mode (the default) ``matmul``
accumulates the inner dimension strictly left to right, so results are
bitwise reproducible and independent of how the operands were stacked.
Performance mode hands products to BLAS.
"""
from __future__ import annotations

import contextlib
import contextvars
import struct
from collections import defaultdict
from typing import BinaryIO, Iterator

import numpy as np
from scipy.special import expit

DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}

_deterministic = contextvars.ContextVar("srupp_deterministic", default=True)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced (or was fed) a non-finite value."""


def is_deterministic() -> bool:
    return _deterministic.get()


def set_deterministic(enabled: bool) -> None:
    _deterministic.set(bool(enabled))


@contextlib.contextmanager
def deterministic(enabled: bool = True) -> Iterator[None]:
    token = _deterministic.set(bool(enabled))
    try:
        yield
    finally:
        _deterministic.reset(token)


class FlopCounter:
    """Per-call floating point operation tally, grouped by a free-form tag.

    Convention: one multiply-accumulate counts as 2 FLOPs; every other
    elementwise primitive (add, mul, exp, sigmoid, max, ...) counts 1 per
    element it produces or consumes.
    """

    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)
        self.scope = "other"

    def add(self, n: int) -> None:
        self.counts[self.scope] += int(n)

    @contextlib.contextmanager
    def tagged(self, scope: str) -> Iterator["FlopCounter"]:
        prev, self.scope = self.scope, scope
        try:
            yield self
        finally:
            self.scope = prev

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def scoped(counter: FlopCounter | None, tag: str):
    """Re-tag FLOPs within the current component, e.g. ``layer3.*`` -> ``layer3.<tag>``."""
    if counter is None:
        return contextlib.nullcontext()
    prefix = counter.scope.rsplit(".", 1)[0] + "." if "." in counter.scope else ""
    return counter.tagged(prefix + tag)


def _count(counter: FlopCounter | None, n: int) -> None:
    if counter is not None:
        counter.add(n)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        bad = np.argwhere(~np.isfinite(out))[0]
        raise NumericError(f"{op}: non-finite value at index {tuple(int(i) for i in bad)}")
    return out


def tensor(data, dtype=np.float64) -> np.ndarray:
    """Validate and copy ``data`` into a contiguous float tensor."""
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.dtype not in DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if any(s <= 0 for s in arr.shape):
        raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
    return _finite(np.ascontiguousarray(arr), "tensor")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def _sequential_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Sum over k strictly in index order; both branches give identical bits.
    m, k = a.shape
    n = b.shape[1]
    if m * n <= 256:
        prod = a.T[:, :, None] * b[:, None, :]
        return np.add.accumulate(prod, axis=0)[-1]
    out = a[:, 0:1] * b[0:1, :]
    for i in range(1, k):
        out += a[:, i : i + 1] * b[i : i + 1, :]
    return out


def matmul(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    _count(counter, 2 * a.shape[0] * a.shape[1] * b.shape[1])
    with np.errstate(over="ignore", invalid="ignore"):
        out = _sequential_matmul(a, b) if is_deterministic() else a @ b
    return _finite(out, "matmul")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a: np.ndarray, b: np.ndarray,
                counter: FlopCounter | None = None) -> np.ndarray:
    """Apply ``add``/``sub``/``mul`` elementwise.

    ``b`` may be a vector whose length equals the last extent of ``a``; it is
    then applied to every row.  No other broadcasting is accepted.
    """
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    _count(counter, a.size)
    with np.errstate(over="ignore", invalid="ignore"):
        out = fn(a, b)  # overflow is reported by _finite instead
    return _finite(out, op)


def add(a, b, counter=None):
    return elementwise("add", a, b, counter)


def sub(a, b, counter=None):
    return elementwise("sub", a, b, counter)


def mul(a, b, counter=None):
    return elementwise("mul", a, b, counter)


def scale(a: np.ndarray, s: float, counter: FlopCounter | None = None) -> np.ndarray:
    _count(counter, a.size)
    return _finite(a * a.dtype.type(s), "scale")


def one_minus(a: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    _count(counter, a.size)
    return 1 - a


def negate(a: np.ndarray) -> np.ndarray:
    return -a


def sigmoid(a: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    _count(counter, a.size)
    return expit(a)


def relu(a: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    _count(counter, a.size)
    return np.maximum(a, 0)


def row_sum(a: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    """Sum along the last axis; counted as one FLOP per summed element."""
    _count(counter, a.size)
    return _finite(a.sum(axis=-1), "row_sum")


def rsqrt(a: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    if (a <= 0).any():
        raise NumericError("rsqrt: non-positive argument")
    _count(counter, 2 * a.size)
    return 1 / np.sqrt(a)


def softmax_rows(a: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Counted as 5 FLOPs per element: max, subtract, exp, sum, divide.
    """
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {a.shape}")
    if not np.isfinite(a).all():
        raise NumericError("softmax_rows: non-finite input")
    _count(counter, 5 * a.size)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Convolution (3x3, stride 2, no padding)
# ---------------------------------------------------------------------------

KERNEL = 3
STRIDE = 2


def conv_out_len(n: int) -> int:
    return (n - KERNEL) // STRIDE + 1


def _im2col(x: np.ndarray, t_out: int, f_out: int) -> np.ndarray:
    c_in = x.shape[0]
    cols = np.empty((c_in, KERNEL, KERNEL, t_out, f_out), dtype=x.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            cols[:, i, j] = x[:, i : i + STRIDE * t_out : STRIDE, j : j + STRIDE * f_out : STRIDE]
    return cols.reshape(c_in * KERNEL * KERNEL, t_out * f_out)


def conv2d(x: np.ndarray, kernels: np.ndarray,
           counter: FlopCounter | None = None) -> np.ndarray:
    """Valid cross-correlation of ``x`` (C_in x T x F) with 3x3 kernels at stride 2.

    Returns C_out x T' x F' with T' = floor((T-1)/2), F' = floor((F-1)/2).
    """
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[2:] != (KERNEL, KERNEL):
        raise DimensionError(f"conv2d: bad shapes input {x.shape}, kernels {kernels.shape}")
    c_out, c_in = kernels.shape[:2]
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d: input has {x.shape[0]} channels, kernels expect {c_in}")
    if x.shape[1] < KERNEL or x.shape[2] < KERNEL:
        raise DimensionError(f"conv2d: input {x.shape} smaller than {KERNEL}x{KERNEL} kernel")
    t_out, f_out = conv_out_len(x.shape[1]), conv_out_len(x.shape[2])
    cols = _im2col(x, t_out, f_out)
    out = matmul(kernels.reshape(c_out, -1), cols, counter)
    return out.reshape(c_out, t_out, f_out)


def conv2d_backward(x: np.ndarray, kernels: np.ndarray,
                    grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. its input and kernels."""
    c_out, c_in = kernels.shape[:2]
    _, t_out, f_out = grad_out.shape
    cols = _im2col(x, t_out, f_out)
    g = grad_out.reshape(c_out, -1)
    grad_k = matmul(g, np.ascontiguousarray(cols.T)).reshape(kernels.shape)
    gcols = matmul(np.ascontiguousarray(kernels.reshape(c_out, -1).T), g)
    gcols = gcols.reshape(c_in, KERNEL, KERNEL, t_out, f_out)
    grad_x = np.zeros_like(x)
    for i in range(KERNEL):
        for j in range(KERNEL):
            grad_x[:, i : i + STRIDE * t_out : STRIDE, j : j + STRIDE * f_out : STRIDE] += gcols[:, i, j]
    return grad_x, grad_k


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

class SeededRng:
    """Reproducible random stream backed by the Philox4x64 counter-based generator.

    Philox output depends only on (key, counter), so a given seed produces the
    same draws on every platform and numpy build.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, low: float, high: float, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def normal(self, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def integers(self, high: int, shape) -> np.ndarray:
        return self._gen.integers(0, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, stream: int) -> "SeededRng":
        """Independent child stream derived from this seed."""
        return SeededRng((self.seed * 0x9E3779B97F4A7C15 + stream + 1) & 0xFFFFFFFFFFFFFFFF)


# ---------------------------------------------------------------------------
# Serialization: dtype code, rank, extents (all u64 little-endian), raw data
# ---------------------------------------------------------------------------

class FormatError(ValueError):
    """Malformed serialized tensor data."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def write_tensor(stream: BinaryIO, arr: np.ndarray) -> None:
    if arr.dtype not in DTYPE_CODES:
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    stream.write(struct.pack("<QQ", DTYPE_CODES[arr.dtype], arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    start = stream.tell()
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", start + len(buf))
    return buf


def read_tensor(stream: BinaryIO) -> np.ndarray:
    start = stream.tell()
    code, rank = struct.unpack("<QQ", _read_exact(stream, 16, "tensor header"))
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", start)
    if rank > 16:
        raise FormatError(f"implausible tensor rank {rank}", start + 8)
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, "tensor extents"))
    if any(s == 0 for s in shape):
        raise FormatError(f"zero extent in shape {shape}", start + 16)
    dtype = DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(stream, count * dtype.itemsize, "tensor data")
    return np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
