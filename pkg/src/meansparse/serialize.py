"""MSTN binary tensor format.

Layout (little-endian)::

    b"MSTN" | u8 dtype code | u8 rank | rank × u64 extents | raw row-major data

dtype codes: 0 = float64, 1 = float32, 2 = int64.
"""

import io
import struct

import numpy as np

from .errors import DataFormatError

MAGIC = b"MSTN"
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


def write_tensor(fp, arr):
    arr = np.asarray(arr)
    le = arr.dtype.newbyteorder("<")
    if le not in _CODES:
        raise DataFormatError(f"MSTN cannot store dtype {arr.dtype}")
    if arr.ndim > 255:
        raise DataFormatError("MSTN rank must fit in one byte")
    fp.write(MAGIC)
    fp.write(struct.pack("<BB", _CODES[le], arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def _read_exact(fp, n, what):
    buf = fp.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated MSTN stream reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fp):
    magic = _read_exact(fp, 4, "magic")
    if magic != MAGIC:
        raise DataFormatError(f"bad MSTN magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(fp, 2, "header"))
    if code not in _DTYPES:
        raise DataFormatError(f"unknown MSTN dtype code {code}")
    dtype = _DTYPES[code]
    shape = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank, "extents"))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(fp, count * dtype.itemsize, "data")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def dumps(arr):
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def loads(raw):
    return read_tensor(io.BytesIO(raw))


def save(path, arr):
    with open(path, "wb") as fp:
        write_tensor(fp, arr)


def load(path):
    with open(path, "rb") as fp:
        return read_tensor(fp)
