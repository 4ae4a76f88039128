"""Shape-prefixed little-endian binary array format.

Layout: 1 byte dtype code, uint32 ndim, ndim * uint32 dims, raw data.
Used for persisted cases and checkpoint archives.
"""

import struct

import numpy as np

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("u1"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<f8"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def array_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, order="C")  # keeps 0-d shape, unlike ascontiguousarray
    if arr.dtype not in _DTYPE_CODES:
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype("<f4")
        elif np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype("<i8")
        else:
            raise TypeError(f"unsupported dtype {arr.dtype}")
    code = _DTYPE_CODES[arr.dtype]
    header = struct.pack("<BI", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes()


def array_from_bytes(blob: bytes) -> np.ndarray:
    code, ndim = struct.unpack_from("<BI", blob, 0)
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 5)
    dtype = _CODE_DTYPES[code]
    offset = 5 + 4 * ndim
    n = int(np.prod(dims)) if ndim else 1
    arr = np.frombuffer(blob, dtype=dtype, count=n, offset=offset)
    return arr.reshape(dims).copy()


def write_array(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(array_to_bytes(arr))


def read_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        return array_from_bytes(f.read())
