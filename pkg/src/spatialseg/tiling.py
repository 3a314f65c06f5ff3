"""Overlapping sub-volume grid and its fold across the midsagittal plane.

Tile origins along each axis are derived from the tile count rather than a
free stride, so that the grid is mirror-symmetric about the volume centre and
always covers every voxel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .volume import LabelMap, Volume, crop, mirror_x

# Literal strides quoted for the 96^3 / 125 sub-volume setup.  They cannot
# produce a 5x5x5 grid on 181x217x181 volumes and are kept for reference only.
REFERENCE_STRIDES = (76, 76, 67)
DEFAULT_WINDOW = (96, 96, 96)
DEFAULT_GRID = (5, 5, 5)
MNI_DIMS = (181, 217, 181)


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class TilingConfig:
    window: tuple[int, int, int] = DEFAULT_WINDOW
    grid_counts: tuple[int, int, int] = DEFAULT_GRID
    volume_dims: tuple[int, int, int] = MNI_DIMS

    def __post_init__(self):
        for name in ("window", "grid_counts", "volume_dims"):
            val = tuple(int(v) for v in getattr(self, name))
            if len(val) != 3:
                raise TilingError(f"{name} needs three components")
            object.__setattr__(self, name, val)
        for w, g, d in zip(self.window, self.grid_counts, self.volume_dims):
            if w <= 0 or d <= 0:
                raise TilingError("window and dims must be positive")
            if g < 1:
                raise TilingError("grid counts must be >= 1")
            if w > d:
                raise TilingError(f"window {self.window} larger than volume {self.volume_dims}")


@dataclass(frozen=True)
class Region:
    grid_index: tuple[int, int, int]
    origin: tuple[int, int, int]
    extent: tuple[int, int, int]

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))

    def contains(self, voxel) -> bool:
        return all(o <= v < o + e for v, o, e in zip(voxel, self.origin, self.extent))


@dataclass
class NetworkAssignment:
    mapping: dict = field(default_factory=dict)  # grid_index -> (network_id, flip)
    network_count: int = 0

    def network_of(self, grid_index) -> tuple[int, bool]:
        return self.mapping[tuple(grid_index)]

    def members(self, network_id: int) -> list[tuple[tuple[int, int, int], bool]]:
        return [(gi, flip) for gi, (nid, flip) in sorted(self.mapping.items()) if nid == network_id]


def axis_origins(dim: int, window: int, count: int) -> list[int]:
    if window > dim:
        raise TilingError(f"window {window} larger than dim {dim}")
    if count == 1:
        if window != dim:
            raise TilingError(f"a single tile of {window} cannot cover an axis of {dim} voxels")
        return [0]
    span = dim - window
    pos = [0] * count
    for i in range((count + 1) // 2):
        # round half up, in exact integer arithmetic
        pos[i] = (2 * i * span + (count - 1)) // (2 * (count - 1))
    for i in range((count + 1) // 2, count):
        pos[i] = span - pos[count - 1 - i]
    for a, b in zip(pos, pos[1:]):
        if b - a > window:
            raise TilingError(f"{count} tiles of {window} leave a gap on an axis of {dim} voxels")
    return pos


def build_grid(config: TilingConfig) -> list[Region]:
    per_axis = [axis_origins(d, w, g) for d, w, g in zip(config.volume_dims, config.window, config.grid_counts)]
    regions = []
    for ix, x in enumerate(per_axis[0]):
        for iy, y in enumerate(per_axis[1]):
            for iz, z in enumerate(per_axis[2]):
                regions.append(Region((ix, iy, iz), (x, y, z), config.window))
    return regions


def network_count_for(grid_counts) -> int:
    gx, gy, gz = grid_counts
    return math.ceil(gx / 2) * gy * gz


def fold_symmetric(grid: list[Region], config: TilingConfig) -> NetworkAssignment:
    gx, gy, gz = config.grid_counts
    span = config.volume_dims[0] - config.window[0]
    xs = {}
    for r in grid:
        xs[r.grid_index[0]] = r.origin[0]
    for ix in range(gx):
        mirror = gx - 1 - ix
        if ix == mirror:
            continue
        if xs[ix] + xs[mirror] != span:
            raise TilingError("grid is not mirror-symmetric in x; cannot fold")

    ncols = math.ceil(gx / 2)
    mapping = {}
    for r in grid:
        ix, iy, iz = r.grid_index
        col = min(ix, gx - 1 - ix)
        nid = (col * gy + iy) * gz + iz
        mapping[r.grid_index] = (nid, 2 * ix > gx - 1)
    return NetworkAssignment(mapping, ncols * gy * gz)


def identity_assignment(grid: list[Region]) -> NetworkAssignment:
    """Every region is served by one shared network, never flipped."""
    return NetworkAssignment({r.grid_index: (0, False) for r in grid}, 1)


def extract_training_patch(volume: Volume, labels: LabelMap, region: Region, flip: bool):
    img = crop(volume, region.origin, region.extent)
    lab = crop(labels, region.origin, region.extent)
    if flip:
        img, lab = mirror_x(img), mirror_x(lab)
    return img, lab


def is_median(grid_index, grid_counts) -> bool:
    gx = grid_counts[0]
    return gx % 2 == 1 and grid_index[0] == (gx - 1) // 2


def network_patches(volume: Volume, labels: LabelMap, grid: list[Region],
                    assignment: NetworkAssignment, network_id: int, grid_counts):
    """All training patches one case contributes to one network.

    Median-column regions are used both as-is and mirrored, so every network
    sees two patches per case.
    """
    by_index = {r.grid_index: r for r in grid}
    out = []
    for gi, flip in assignment.members(network_id):
        region = by_index[gi]
        out.append(extract_training_patch(volume, labels, region, flip))
        if is_median(gi, grid_counts):
            out.append(extract_training_patch(volume, labels, region, True))
    return out


def coverage_map(grid: list[Region], dims) -> np.ndarray:
    cov = np.zeros(tuple(dims), dtype=np.int32)
    for r in grid:
        cov[r.slices] += 1
    return cov
