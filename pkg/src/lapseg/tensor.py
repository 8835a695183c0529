"""Array conventions and the LRRT binary tensor format.

Dense numpy arrays are the tensor type throughout the library: layout is
batch x channel x height x width (at most 4 axes, row-major), float32 for
training and float64 for gradient verification. Operations are value
semantic - they never alias their inputs into outputs - and any NaN/Inf
produced by an operation is a contract violation raised as NumericalError.
"""

import io

import numpy as np

DEFAULT_DTYPE = np.float32

LRRT_MAGIC = b"LRRT"
LRRT_VERSION = 1


class FormatError(ValueError):
    """Malformed or truncated binary payload."""


class NumericalError(ArithmeticError):
    """Non-finite values where the contract requires finite ones."""


def check_finite(arr, context=""):
    # summing in float64 is one allocation-free pass; any NaN/Inf propagates
    # into the total, and float32 payloads can never overflow it spuriously
    if not np.isfinite(arr.sum(dtype=np.float64)):
        if np.isfinite(arr).all():
            return arr
        raise NumericalError(f"non-finite values{' in ' + context if context else ''}")
    return arr


def as_float(x, dtype=None):
    """Coerce to a float array of the requested (or default) precision."""
    a = np.asarray(x)
    if dtype is None:
        dtype = a.dtype if a.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return np.ascontiguousarray(a, dtype=dtype)


def write_tensor_bytes(arr) -> bytes:
    """Serialize an array to LRRT bytes (float32 payload, little-endian)."""
    a = np.ascontiguousarray(arr, dtype=np.float32)
    if a.ndim > 4:
        raise ValueError(f"tensors are limited to 4 axes, got {a.ndim}")
    out = io.BytesIO()
    out.write(LRRT_MAGIC)
    out.write(np.uint32(LRRT_VERSION).tobytes())
    out.write(np.uint32(a.ndim).tobytes())
    out.write(np.asarray(a.shape, dtype="<u4").tobytes())
    out.write(a.astype("<f4").tobytes())
    return out.getvalue()


def read_tensor_bytes(buf: bytes, offset: int = 0):
    """Parse one LRRT record from bytes; returns (array, bytes consumed)."""
    def take(n):
        nonlocal offset
        if offset + n > len(buf):
            raise FormatError("truncated tensor payload")
        piece = buf[offset:offset + n]
        offset += n
        return piece

    start = offset
    if take(4) != LRRT_MAGIC:
        raise FormatError("bad tensor magic, expected LRRT")
    version = int(np.frombuffer(take(4), dtype="<u4")[0])
    if version != LRRT_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    ndim = int(np.frombuffer(take(4), dtype="<u4")[0])
    if ndim > 4:
        raise FormatError(f"tensor rank {ndim} exceeds the 4-axis limit")
    shape = tuple(int(v) for v in np.frombuffer(take(4 * ndim), dtype="<u4"))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32)
    return data.reshape(shape), offset - start


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(write_tensor_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, used = read_tensor_bytes(buf)
    if used != len(buf):
        raise FormatError("trailing bytes after tensor payload")
    return arr
