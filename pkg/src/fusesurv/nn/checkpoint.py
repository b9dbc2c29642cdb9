"""PFMW parameter files: named 2-D float64 tensors, little-endian.

Layout: ``b"PFMW"``, u32 version, then until EOF one record per tensor:
u16 name length, UTF-8 name, u32 rows, u32 cols, rows*cols f64 row-major.
Vectors are stored as a single row.
"""

import struct

import numpy as np

MAGIC = b"PFMW"
VERSION = 1


def _as_2d(name, value):
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 0:
        return value.reshape(1, 1)
    if value.ndim == 1:
        return value.reshape(1, -1)
    if value.ndim == 2:
        return value
    raise ValueError(f"tensor {name!r} has {value.ndim} dimensions; only up to 2 are storable")


def save_checkpoint(path, tensors):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, value in tensors.items():
            arr = _as_2d(name, value)
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"tensor name too long: {name[:40]}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return an insertion-ordered dict of name -> 2-D float64 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a PFMW file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported PFMW version {version}")
    out = {}
    pos = 8
    while pos < len(data):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated tensor {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += nbytes
    return out
