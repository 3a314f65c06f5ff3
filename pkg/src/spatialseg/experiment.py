"""Cross-domain experiment on phantoms: train on one preset, test on another,
and compare the full pipeline (specialized networks + HSL + IQDA) against a
single generic network trained without IQDA."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .consensus import segment_volume
from .hsl import HslPlan, run_hsl, train_generic
from .metrics import confusion, consistency_dice, dice
from .phantom import PhantomConfig, generate_dataset, get_preset
from .tiling import TilingConfig, build_grid, identity_assignment
from .training import TrainConfig
from .unet import UNetConfig
from .volume import zscore_normalize

log = logging.getLogger(__name__)


def normalize_cases(cases):
    return [(zscore_normalize(vol), lab) for vol, lab in cases]


@dataclass(frozen=True)
class CrossDomainConfig:
    phantom: PhantomConfig = PhantomConfig(dims=(32, 36, 32), lesion_count=(3, 6), lesion_radius=(2.0, 3.5))
    window: tuple[int, int, int] = (20, 20, 20)
    grid: tuple[int, int, int] = (2, 2, 2)
    model: UNetConfig = UNetConfig()
    stage1: TrainConfig = TrainConfig(max_epochs=12, patience=6, learning_rate=1e-3)
    stage2: TrainConfig = TrainConfig(max_epochs=8, patience=4, learning_rate=1e-3)
    domains: tuple[str, str] = ("hi3d", "lo2d")
    n_train: int = 5
    n_test: int = 4


@dataclass
class Trained:
    specialized: dict
    assignment: object
    generic_plain: object  # generic network trained without IQDA


@dataclass
class RepetitionResult:
    seed: int
    dlb_dice: dict = field(default_factory=dict)  # (train, test) -> mean Dice
    generic_dice: dict = field(default_factory=dict)
    dlb_consistency: float = 0.0
    generic_consistency: float = 0.0
    seconds: float = 0.0

    @property
    def dlb_mean_dice(self) -> float:
        return float(np.mean(list(self.dlb_dice.values())))

    @property
    def generic_mean_dice(self) -> float:
        return float(np.mean(list(self.generic_dice.values())))


def _train_domain(cases, cfg: CrossDomainConfig, tiling: TilingConfig, seed: int) -> Trained:
    plan = HslPlan(tiling=tiling, model=cfg.model, stage1=replace(cfg.stage1, seed=seed),
                   stage2=replace(cfg.stage2, seed=seed), seed=seed)
    hsl = run_hsl(plan, cases)
    grid = hsl.grid
    plain, _ = train_generic(cases, grid, cfg.model, replace(cfg.stage1, seed=seed), iqda=False,
                             seed=seed + 7919, split_seed=seed)
    return Trained(hsl.networks(), hsl.assignment, plain.params)


def _segment_all(trained: Trained, grid, cases):
    dlb = [segment_volume(trained.specialized, trained.assignment, grid, vol).labels for vol, _ in cases]
    generic = [segment_volume({0: trained.generic_plain}, identity_assignment(grid), grid, vol).labels
               for vol, _ in cases]
    return dlb, generic


def run_repetition(seed: int, cfg: CrossDomainConfig = CrossDomainConfig()) -> RepetitionResult:
    t0 = time.perf_counter()
    tiling = TilingConfig(cfg.window, cfg.grid, cfg.phantom.dims)
    grid = build_grid(tiling)
    ss = np.random.SeedSequence(seed)
    train_seeds = [int(s) for s in ss.generate_state(len(cfg.domains) * 2)]
    phantom = replace(cfg.phantom, seed=seed)

    train_sets, test_sets, trained = {}, {}, {}
    for i, name in enumerate(cfg.domains):
        preset = get_preset(name)
        train_sets[name] = normalize_cases(generate_dataset(phantom, preset, cfg.n_train, train_seeds[2 * i])[0])
        # test images share subjects across domains so consistency is measured on the same anatomy
        test_sets[name] = normalize_cases(generate_dataset(phantom, preset, cfg.n_test, train_seeds[-1])[0])
    for i, name in enumerate(cfg.domains):
        trained[name] = _train_domain(train_sets[name], cfg, tiling, train_seeds[2 * i + 1] % (2**31))

    result = RepetitionResult(seed)
    segs = {}
    for src in cfg.domains:
        for dst in cfg.domains:
            segs[src, dst] = _segment_all(trained[src], grid, test_sets[dst])
    for src in cfg.domains:
        for dst in cfg.domains:
            if src == dst:
                continue
            truth = [lab for _, lab in test_sets[dst]]
            dlb, gen = segs[src, dst]
            result.dlb_dice[src, dst] = float(np.mean([dice(confusion(p, t)) for p, t in zip(dlb, truth)]))
            result.generic_dice[src, dst] = float(np.mean([dice(confusion(p, t)) for p, t in zip(gen, truth)]))

    a, b = cfg.domains
    dlb_c, gen_c = [], []
    for dst in cfg.domains:
        for k in range(cfg.n_test):
            dlb_c.append(consistency_dice(segs[a, dst][0][k], segs[b, dst][0][k]))
            gen_c.append(consistency_dice(segs[a, dst][1][k], segs[b, dst][1][k]))
    result.dlb_consistency = float(np.mean(dlb_c))
    result.generic_consistency = float(np.mean(gen_c))
    result.seconds = time.perf_counter() - t0
    log.info("rep %d: dlb %.3f generic %.3f | consistency dlb %.3f generic %.3f (%.0fs)", seed,
             result.dlb_mean_dice, result.generic_mean_dice, result.dlb_consistency,
             result.generic_consistency, result.seconds)
    return result
