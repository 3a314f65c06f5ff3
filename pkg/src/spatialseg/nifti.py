"""Minimal single-file NIfTI-1 reader.

Only uncompressed ``n+1`` files holding a 3D uint8, int16 or float32 image are
accepted.  Anything else is rejected with a message saying why.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .volume import LabelMap, Volume

HEADER_SIZE = 348

_DATATYPES = {2: "u1", 4: "i2", 16: "f4"}


class NiftiError(ValueError):
    pass


def _endian(raw: bytes) -> str:
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        return "<"
    if struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        return ">"
    raise NiftiError("sizeof_hdr is not 348; not a NIfTI-1 file")


def read_nifti(path, as_labels: bool = False) -> Volume | LabelMap:
    """Read a NIfTI-1 file into a single-channel Volume (or a LabelMap)."""
    path = Path(path)
    if path.suffix == ".gz":
        raise NiftiError("compressed NIfTI is not supported")
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise NiftiError("file shorter than a NIfTI-1 header")
    e = _endian(raw)
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise NiftiError(f"unsupported magic {magic!r}; only single-file 'n+1' is read")

    dim = struct.unpack(e + "8h", raw[40:56])
    ndim = dim[0]
    if ndim == 4 and dim[4] == 1:
        ndim = 3
    if ndim != 3:
        raise NiftiError(f"only 3D images are supported, got {dim[0]} dimensions")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) <= 0:
        raise NiftiError(f"invalid dims {(nx, ny, nz)}")

    datatype = struct.unpack(e + "h", raw[70:72])[0]
    if datatype not in _DATATYPES:
        raise NiftiError(f"datatype code {datatype} not supported (uint8, int16, float32 only)")
    pixdim = struct.unpack(e + "8f", raw[76:108])
    vox_offset = int(struct.unpack(e + "f", raw[108:112])[0])
    slope, inter = struct.unpack(e + "2f", raw[112:120])

    dtype = np.dtype(_DATATYPES[datatype]).newbyteorder(e)
    count = nx * ny * nz
    offset = max(vox_offset, 352)
    if len(raw) < offset + count * dtype.itemsize:
        raise NiftiError("truncated image data")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    # x is fastest on disk
    arr = arr.reshape(nz, ny, nx).transpose(2, 1, 0).astype(np.float64)
    if slope != 0 and np.isfinite(slope):
        arr = arr * slope + inter

    spacing = tuple(abs(p) if p > 0 else 1.0 for p in pixdim[1:4])
    if as_labels:
        return LabelMap((arr > 0.5).astype(np.uint8), spacing)
    return Volume(arr.astype(np.float32)[None], spacing)
