"""Two-stage hierarchical specialization: one generic network trained on
patches from every region, then cloned into each region-specialized network
and fine-tuned on that region's (mirror-folded) patches."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .iqda import IqdaPolicy, apply_iqda
from .tiling import (NetworkAssignment, Region, TilingConfig, build_grid, extract_training_patch,
                     fold_symmetric, is_median)
from .training import TrainConfig, TrainResult, train_network
from .unet import NetworkParams, UNetConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchItem:
    case: int
    grid_index: tuple
    flip: bool


class PatchSource:
    """Training/validation patch stream for one network.

    ``layout`` lists the (grid_index, flip) pairs each case contributes; the
    same layout is cut from training and validation cases.  Patches are
    cropped once up front; IQDA is drawn per iteration.
    """

    def __init__(self, train_cases, val_cases, layout, grid, iqda: IqdaPolicy | None = None,
                 patches_per_epoch: int | None = None):
        regions = {r.grid_index: r for r in grid}
        self.items = [PatchItem(c, tuple(gi), bool(f)) for c in range(len(train_cases)) for gi, f in layout]
        self.iqda = iqda
        self.patches_per_epoch = patches_per_epoch
        self._train = [self._cut(train_cases[it.case], it, regions) for it in self.items]
        self._val = [self._cut(case, PatchItem(0, tuple(gi), bool(f)), regions)
                     for case in val_cases for gi, f in layout]
        self.log: list[PatchItem] = []

    @staticmethod
    def _cut(case, item: PatchItem, regions):
        vol, lab = case
        return extract_training_patch(vol, lab, regions[item.grid_index], item.flip)

    def epoch(self, rng):
        if self.patches_per_epoch is None:
            order = rng.permutation(len(self.items))
        else:
            order = rng.integers(0, len(self.items), size=self.patches_per_epoch)
        for i in order:
            img, lab = self._train[i]
            self.log.append(self.items[i])
            if self.iqda is not None:
                img, lab = apply_iqda(img, lab, self.iqda.sample())
            yield img.data, lab.data

    def validation(self):
        return [(img.data, lab.data) for img, lab in self._val]


def split_cases(cases, val_fraction: float, seed):
    """Case-level hold-out; returns (train, validation)."""
    n = len(cases)
    if n < 2:
        raise ValueError("need at least two cases to hold out a validation set")
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    val_idx = sorted(order[:n_val].tolist())
    train_idx = sorted(order[n_val:].tolist())
    return [cases[i] for i in train_idx], [cases[i] for i in val_idx]


def generic_layout(grid: list[Region]):
    return [(r.grid_index, False) for r in grid]


def specialized_layout(assignment: NetworkAssignment, network_id: int, grid_counts):
    """Median-column regions appear twice: as-is and mirrored."""
    layout = []
    for gi, flip in assignment.members(network_id):
        layout.append((gi, flip))
        if is_median(gi, grid_counts):
            layout.append((gi, True))
    return layout


def _iqda_policy(enabled: bool, identity_prob: float, seed) -> IqdaPolicy | None:
    if not enabled:
        return None
    return IqdaPolicy.with_identity(identity_prob, seed=seed)


@dataclass
class HslPlan:
    tiling: TilingConfig
    model: UNetConfig = field(default_factory=UNetConfig)
    stage1: TrainConfig = field(default_factory=TrainConfig)
    stage2: TrainConfig | None = field(default_factory=TrainConfig)  # None: no fine-tuning
    iqda_stage1: bool = True
    iqda_stage2: bool = True
    identity_prob: float = 0.0
    from_scratch: bool = False  # stage 2 from random init: the no-HSL ablation
    seed: int = 0
    jobs: int = 1


@dataclass
class HslResult:
    generic: TrainResult | None
    specialized: dict
    assignment: NetworkAssignment
    grid: list
    sources: dict = field(default_factory=dict)

    def networks(self) -> dict:
        return {nid: res.params for nid, res in self.specialized.items()}


def train_generic(cases, grid, model: UNetConfig, config: TrainConfig, iqda: bool = True,
                  identity_prob: float = 0.0, seed: int = 0, init: NetworkParams | None = None,
                  split_seed: int | None = None):
    """Stage 1: one network on patches drawn from every region of every case."""
    train, val = split_cases(cases, config.val_fraction, seed if split_seed is None else split_seed)
    ss = np.random.SeedSequence(seed).spawn(3)
    params = init if init is not None else NetworkParams.init(model, seed=ss[0])
    src = PatchSource(train, val, generic_layout(grid), grid, _iqda_policy(iqda, identity_prob, ss[1]),
                      config.patches_per_epoch)
    result = train_network(params, src, config, rng=np.random.default_rng(ss[2]))
    return result, src


def specialize(initial: NetworkParams | None, cases, grid, assignment: NetworkAssignment, grid_counts,
               model: UNetConfig, config: TrainConfig | None, iqda: bool = True,
               identity_prob: float = 0.0, seed: int = 0, jobs: int = 1, split_seed: int | None = None):
    """Stage 2.  ``initial=None`` trains every network from its own random init.

    Returns ({network_id: TrainResult}, {network_id: PatchSource}).
    """
    if config is not None:
        train, val = split_cases(cases, config.val_fraction, seed if split_seed is None else split_seed)
    children = np.random.SeedSequence(seed).spawn(assignment.network_count)
    sources = {}

    def one(nid):
        ss = children[nid].spawn(3)
        start = initial.clone() if initial is not None else NetworkParams.init(model, seed=ss[0])
        if config is None:
            return nid, TrainResult(start, [], [], 0, "not-trained"), None
        layout = specialized_layout(assignment, nid, grid_counts)
        if not layout:
            raise ValueError(f"network {nid} has no training patches")
        src = PatchSource(train, val, layout, grid, _iqda_policy(iqda, identity_prob, ss[1]),
                          config.patches_per_epoch)
        return nid, train_network(start, src, config, rng=np.random.default_rng(ss[2])), src

    ids = list(range(assignment.network_count))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(one, ids))
    else:
        done = [one(nid) for nid in ids]
    results = {}
    for nid, res, src in done:
        results[nid] = res
        sources[nid] = src
    return results, sources


def run_hsl(plan: HslPlan, cases) -> HslResult:
    grid = build_grid(plan.tiling)
    assignment = fold_symmetric(grid, plan.tiling)
    ss = np.random.SeedSequence(plan.seed).spawn(2)
    s1 = int(ss[0].generate_state(1)[0])
    s2 = int(ss[1].generate_state(1)[0])
    generic = None
    sources = {}
    if not plan.from_scratch:
        generic, sources["generic"] = train_generic(cases, grid, plan.model, plan.stage1, plan.iqda_stage1,
                                                    plan.identity_prob, s1, split_seed=plan.seed)
    initial = None if plan.from_scratch else generic.params
    specialized, spec_sources = specialize(initial, cases, grid, assignment, plan.tiling.grid_counts,
                                           plan.model, plan.stage2, plan.iqda_stage2, plan.identity_prob,
                                           s2, plan.jobs, split_seed=plan.seed)
    sources.update(spec_sources)
    return HslResult(generic, specialized, assignment, grid, sources)


# -- checkpoint directory ---------------------------------------------------

MANIFEST = "manifest.json"
GENERIC_CKPT = "generic.ckpt"


def network_filename(nid: int) -> str:
    return f"net_{nid}.ckpt"


def write_manifest(directory, tiling: TilingConfig, assignment: NetworkAssignment, networks: dict,
                   histories: dict | None = None, extra: dict | None = None) -> Path:
    """Save every network checkpoint plus the manifest describing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for nid in range(assignment.network_count):
        save_checkpoint(networks[nid], directory / network_filename(nid))
        entries.append({
            "id": nid,
            "file": network_filename(nid),
            "regions": [{"grid_index": list(gi), "flip": flip} for gi, flip in assignment.members(nid)],
            "history": (histories or {}).get(nid),
        })
    manifest = {"tiling": asdict(tiling), "network_count": assignment.network_count, "networks": entries}
    manifest.update(extra or {})
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


class ManifestError(ValueError):
    pass


def read_manifest(directory):
    """Returns (TilingConfig, NetworkAssignment, {network_id: checkpoint path})."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise ManifestError(f"no {MANIFEST} in {directory}")
    data = json.loads(path.read_text())
    tiling = TilingConfig(**{k: tuple(v) for k, v in data["tiling"].items()})
    mapping = {}
    paths = {}
    for entry in data["networks"]:
        nid = int(entry["id"])
        paths[nid] = directory / entry["file"]
        if not paths[nid].exists():
            raise ManifestError(f"missing checkpoint {paths[nid]}")
        for reg in entry["regions"]:
            mapping[tuple(reg["grid_index"])] = (nid, bool(reg["flip"]))
    count = int(data["network_count"])
    if set(paths) != set(range(count)):
        raise ManifestError("manifest does not list every network id")
    grid = build_grid(tiling)
    if set(mapping) != {r.grid_index for r in grid}:
        raise ManifestError("manifest regions do not match the tiling grid")
    return tiling, NetworkAssignment(mapping, count), paths


def load_networks(paths: dict) -> dict:
    return {nid: load_checkpoint(p) for nid, p in paths.items()}
