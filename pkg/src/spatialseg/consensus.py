"""Whole-volume inference by majority vote over overlapping regions."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from os import PathLike

import numpy as np

from .tiling import NetworkAssignment, Region
from .unet import NetworkParams, load_checkpoint, predict
from .volume import LabelMap, Volume, VolumeError, crop, mirror_x


_QUANT = float(2 ** 40)


class ConsensusError(ValueError):
    pass


class VoteAccumulator:
    def __init__(self, dims, num_classes: int = 2):
        self.dims = tuple(int(d) for d in dims)
        self.num_classes = num_classes
        self.votes = np.zeros((num_classes,) + self.dims, dtype=np.uint32)
        self.prob_sums = np.zeros((num_classes,) + self.dims, dtype=np.float64)
        self.coverage = np.zeros(self.dims, dtype=np.uint32)

    def merge(self, other: "VoteAccumulator") -> "VoteAccumulator":
        if other.dims != self.dims or other.num_classes != self.num_classes:
            raise ConsensusError("cannot merge accumulators of different shape")
        self.votes += other.votes
        self.prob_sums += other.prob_sums
        self.coverage += other.coverage
        return self


@dataclass
class SegmentationResult:
    labels: LabelMap
    vote_fraction: np.ndarray | None = None


def accumulate(acc: VoteAccumulator, region: Region, probabilities) -> None:
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.shape != (acc.num_classes,) + tuple(region.extent):
        raise ConsensusError(f"probabilities {probs.shape} do not match region extent {region.extent}")
    for o, e, d in zip(region.origin, region.extent, acc.dims):
        if o < 0 or o + e > d:
            raise ConsensusError(f"region {region.grid_index} outside volume {acc.dims}")
    sl = region.slices
    winner = probs.argmax(axis=0)
    for c in range(acc.num_classes):
        acc.votes[(c,) + sl] += (winner == c).astype(np.uint32)
    # snap to a 2^-40 grid so sums are exact and independent of accumulation order
    acc.prob_sums[(slice(None),) + sl] += np.round(probs * _QUANT) / _QUANT
    acc.coverage[sl] += 1


def finalize(acc: VoteAccumulator) -> SegmentationResult:
    """Most votes wins; ties go to the larger probability sum, then to background."""
    if (acc.coverage == 0).any():
        raise ConsensusError("some voxels are not covered by any region")
    if acc.num_classes != 2:
        raise ConsensusError("finalize is defined for two classes")
    bg_votes, fg_votes = acc.votes.astype(np.int64)
    bg_prob, fg_prob = acc.prob_sums
    lesion = (fg_votes > bg_votes) | ((fg_votes == bg_votes) & (fg_prob > bg_prob))
    fraction = fg_votes / acc.coverage
    return SegmentationResult(LabelMap(lesion.astype(np.uint8)), fraction)


def _as_predictor(net):
    if isinstance(net, NetworkParams):
        return lambda x: predict(net, x)
    if callable(net):
        return net
    raise TypeError(f"not a network: {type(net).__name__}")


def infer_region(net, volume: Volume, region: Region, flip: bool) -> np.ndarray:
    """Class probabilities over ``region``, in the volume's own orientation."""
    predictor = _as_predictor(net)
    try:
        patch = crop(volume, region.origin, region.extent).data
    except VolumeError as exc:
        raise ConsensusError(str(exc)) from exc
    if flip:
        patch = mirror_x(patch)
    probs = np.asarray(predictor(patch))
    if flip:
        probs = mirror_x(probs)
    return probs


def _load(net):
    if isinstance(net, (str, PathLike)):
        return load_checkpoint(net)
    return net


def segment_volume(networks: dict, assignment: NetworkAssignment, grid: list[Region], volume: Volume,
                   jobs: int = 1, order=None) -> SegmentationResult:
    """Run every network on its regions and fuse the votes.

    ``networks`` maps network id to NetworkParams, a checkpoint path (loaded
    on demand and released after use) or a callable predictor.  ``order``
    optionally permutes the processing order of network ids.
    """
    missing = set(range(assignment.network_count)) - set(networks)
    if missing:
        raise ConsensusError(f"missing networks {sorted(missing)}")
    by_index = {r.grid_index: r for r in grid}
    if set(by_index) != set(assignment.mapping):
        raise ConsensusError("assignment does not match the region grid")
    for r in grid:
        if any(o + e > d for o, e, d in zip(r.origin, r.extent, volume.dims)):
            raise ConsensusError(f"volume dims {volume.dims} do not match the tiling")

    ids = list(order) if order is not None else list(range(assignment.network_count))

    def run(nid) -> VoteAccumulator:
        acc = VoteAccumulator(volume.dims)
        net = _load(networks[nid])  # one resident network per worker
        for gi, flip in assignment.members(nid):
            region = by_index[gi]
            accumulate(acc, region, infer_region(net, volume, region, flip))
        return acc

    total = VoteAccumulator(volume.dims)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for acc in pool.map(run, ids):
                total.merge(acc)
    else:
        for nid in ids:
            total.merge(run(nid))
    return finalize(total)
