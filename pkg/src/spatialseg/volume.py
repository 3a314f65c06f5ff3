"""Multi-channel 3D volumes, label maps, the MVOL container and basic spatial ops.

Arrays are held as ``(channels, nx, ny, nz)`` for images and ``(nx, ny, nz)``
for labels.  On disk the payload is x-fastest, then y, then z, then channel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
ENCODING_F32 = 0
ENCODING_U8 = 1

# magic, version, channels, nx, ny, nz, sx, sy, sz, encoding
_HEADER = struct.Struct("<4sHH3I3fB")
_U32_MAX = 2**32 - 1
_U16_MAX = 2**16 - 1


class VolumeError(ValueError):
    """Invalid volume geometry or an out-of-bounds spatial request."""


class MvolFormatError(VolumeError):
    """Malformed MVOL file."""


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) <= 0:
        raise VolumeError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise VolumeError(f"expected (channels, nx, ny, nz) data, got shape {data.shape}")
        if data.shape[0] <= 0:
            raise VolumeError("channel count must be positive")
        _check_dims(data.shape[1:])
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeError(f"spacing must be three positive values, got {spacing}")
        data = np.ascontiguousarray(data, dtype=np.float32)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def value(self, x: int, y: int, z: int, c: int = 0) -> float:
        return float(self.data[c, x, y, z])

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class LabelMap:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"expected (nx, ny, nz) labels, got shape {data.shape}")
        _check_dims(data.shape)
        if data.size and (data.min() < 0 or data.max() > 1):
            raise VolumeError("label values must be 0 or 1")
        data = np.ascontiguousarray(data, dtype=np.uint8)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class VolumeHeader:
    version: int
    channels: int
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    encoding: int
    magic: bytes = MVOL_MAGIC

    def pack(self) -> bytes:
        if max(self.dims) > _U32_MAX or self.channels > _U16_MAX:
            raise VolumeError("dims or channel count overflow the header field width")
        return _HEADER.pack(self.magic, self.version, self.channels, *self.dims, *self.spacing, self.encoding)

    @classmethod
    def unpack(cls, raw: bytes) -> "VolumeHeader":
        if len(raw) < _HEADER.size:
            raise MvolFormatError("truncated header")
        magic, version, channels, nx, ny, nz, sx, sy, sz, encoding = _HEADER.unpack(raw[: _HEADER.size])
        if magic != MVOL_MAGIC:
            raise MvolFormatError(f"bad magic {magic!r}")
        if version != MVOL_VERSION:
            raise MvolFormatError(f"unsupported MVOL version {version}")
        if encoding not in (ENCODING_F32, ENCODING_U8):
            raise MvolFormatError(f"unknown scalar encoding {encoding}")
        return cls(version, channels, (nx, ny, nz), (sx, sy, sz), encoding, magic)

    @property
    def payload_size(self) -> int:
        nx, ny, nz = self.dims
        itemsize = 4 if self.encoding == ENCODING_F32 else 1
        return nx * ny * nz * self.channels * itemsize


def _to_payload(data: np.ndarray, dtype: str) -> bytes:
    # (c, x, y, z) -> (c, z, y, x) in C order is x-fastest
    return np.ascontiguousarray(data.transpose(0, 3, 2, 1), dtype=dtype).tobytes()


def _from_payload(raw: bytes, header: VolumeHeader) -> np.ndarray:
    nx, ny, nz = header.dims
    dtype = "<f4" if header.encoding == ENCODING_F32 else "u1"
    arr = np.frombuffer(raw, dtype=dtype).reshape(header.channels, nz, ny, nx)
    return arr.transpose(0, 3, 2, 1)


def write_mvol(volume: Volume | LabelMap, path) -> None:
    if isinstance(volume, LabelMap):
        header = VolumeHeader(MVOL_VERSION, 1, volume.dims, volume.spacing, ENCODING_U8)
        payload = _to_payload(volume.data[None], "u1")
    else:
        header = VolumeHeader(MVOL_VERSION, volume.channels, volume.dims, volume.spacing, ENCODING_F32)
        payload = _to_payload(volume.data, "<f4")
    Path(path).write_bytes(header.pack() + payload)


def read_mvol(path) -> Volume | LabelMap:
    """Read an MVOL file; label files (u8 encoding) come back as a LabelMap."""
    raw = Path(path).read_bytes()
    header = VolumeHeader.unpack(raw)
    payload = raw[_HEADER.size :]
    if len(payload) < header.payload_size:
        raise MvolFormatError(f"truncated payload: expected {header.payload_size} bytes, found {len(payload)}")
    if len(payload) > header.payload_size:
        raise MvolFormatError("trailing bytes after payload")
    data = _from_payload(payload, header)
    if header.encoding == ENCODING_U8:
        if header.channels != 1:
            raise MvolFormatError("label files must have one channel")
        return LabelMap(data[0].copy(), header.spacing)
    return Volume(data.copy(), header.spacing)


def read_volume(path) -> Volume:
    vol = read_mvol(path)
    if not isinstance(vol, Volume):
        raise MvolFormatError(f"{path} holds labels, expected an image volume")
    return vol


def read_labels(path) -> LabelMap:
    vol = read_mvol(path)
    if not isinstance(vol, LabelMap):
        raise MvolFormatError(f"{path} holds an image volume, expected labels")
    return vol


def mirror_x(volume):
    if isinstance(volume, LabelMap):
        return LabelMap(volume.data[::-1], volume.spacing)
    if isinstance(volume, Volume):
        return Volume(volume.data[:, ::-1], volume.spacing)
    arr = np.asarray(volume)
    # bare arrays: channel-first 4D or plain 3D
    return np.ascontiguousarray(arr[:, ::-1] if arr.ndim == 4 else arr[::-1])


def _window(dims, origin, extent) -> tuple[slice, slice, slice]:
    origin = tuple(int(o) for o in origin)
    extent = tuple(int(e) for e in extent)
    if len(origin) != 3 or len(extent) != 3:
        raise VolumeError("origin and extent must have three components")
    for o, e, d in zip(origin, extent, dims):
        if o < 0 or e <= 0 or o + e > d:
            raise VolumeError(f"window origin={origin} extent={extent} outside dims {tuple(dims)}")
    return tuple(slice(o, o + e) for o, e in zip(origin, extent))


def crop(volume, origin, extent):
    if isinstance(volume, LabelMap):
        sl = _window(volume.dims, origin, extent)
        return LabelMap(volume.data[sl], volume.spacing)
    if isinstance(volume, Volume):
        sl = _window(volume.dims, origin, extent)
        return Volume(volume.data[(slice(None),) + sl], volume.spacing)
    raise TypeError(f"cannot crop {type(volume).__name__}")


def paste_labels(target: np.ndarray, origin, patch: np.ndarray) -> None:
    """Write ``patch`` into ``target`` (in place) at ``origin``.

    Both arrays may carry leading non-spatial axes; the last three are spatial.
    """
    patch = np.asarray(patch)
    sl = _window(target.shape[-3:], origin, patch.shape[-3:])
    target[(Ellipsis,) + sl] = patch


def zscore_normalize(volume: Volume, mask: LabelMap | None = None) -> Volume:
    if mask is None:
        sel = np.ones(volume.dims, dtype=bool)
    else:
        if mask.dims != volume.dims:
            raise VolumeError("mask dims do not match volume dims")
        sel = mask.data.astype(bool)
    if sel.sum() < 2:
        raise VolumeError("need at least two masked voxels to normalize")
    out = np.zeros(volume.data.shape, dtype=np.float32)
    for c in range(volume.channels):
        vals = volume.data[c][sel].astype(np.float64)
        mu = vals.mean()
        sd = vals.std()
        if not sd > 0:
            raise VolumeError(f"channel {c} is constant under the mask")
        out[c][sel] = ((vals - mu) / sd).astype(np.float32)
    return Volume(out, volume.spacing)
