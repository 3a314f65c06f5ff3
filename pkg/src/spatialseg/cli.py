"""Command-line front end: ``spatialseg <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from . import config as cfgmod
from .consensus import segment_volume
from .hsl import (GENERIC_CKPT, ManifestError, read_manifest, specialize, train_generic, write_manifest)
from .iqda import IqdaPolicy, apply_iqda
from .metrics import CSV_COLUMNS, LFPR_NOTE, consistency_dice, evaluate_cases, mean_hybrid
from .phantom import PRESETS, PhantomConfig, PhantomError, generate_dataset, get_preset, save_dataset
from .tiling import build_grid, fold_symmetric
from .training import NumericalError
from .unet import CheckpointError, load_checkpoint, save_checkpoint
from .volume import MvolFormatError, VolumeError, read_labels, read_volume, write_mvol, zscore_normalize

log = logging.getLogger("spatialseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
IMAGE_SUFFIX = "_image.mvol"
LABEL_SUFFIX = "_labels.mvol"


class UsageError(Exception):
    """Bad inputs that are not a config problem (missing files, wrong dims)."""


# -- data directories ---------------------------------------------------------

def _case_names(directory: Path, suffix: str) -> list[str]:
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    names = sorted(p.name[: -len(suffix)] for p in directory.glob(f"*{suffix}"))
    if not names:
        raise FileNotFoundError(f"no *{suffix} files in {directory}")
    return names


def load_training_cases(directory) -> list:
    directory = Path(directory)
    cases = []
    for name in _case_names(directory, IMAGE_SUFFIX):
        lab_path = directory / f"{name}{LABEL_SUFFIX}"
        if not lab_path.exists():
            raise FileNotFoundError(f"missing labels for case {name}: {lab_path}")
        cases.append((zscore_normalize(read_volume(directory / f"{name}{IMAGE_SUFFIX}")), read_labels(lab_path)))
    return cases


def _check_dims(tiling, cases):
    for vol, _ in cases:
        if vol.dims != tiling.volume_dims:
            raise cfgmod.ConfigError(
                f"tiling.dims is {list(tiling.volume_dims)} but the data has dims {list(vol.dims)}")


def _config(args) -> dict:
    cfg = cfgmod.load(args.config, args.set or ())
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            raise cfgmod.ConfigError("--jobs must be >= 1")
        cfg["io.jobs"] = args.jobs
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


# -- commands -----------------------------------------------------------------

def cmd_phantom(args) -> int:
    dims = tuple(args.dims)
    config = PhantomConfig(dims=dims, seed=args.seed, lesion_count=tuple(args.lesion_count),
                           lesion_radius=tuple(args.lesion_radius))
    cases, manifest = generate_dataset(config, get_preset(args.preset), args.cases, args.seed)
    path = save_dataset(cases, manifest, args.out)
    # a 2x2x2 grid whose windows overlap, cover the phantom and pool cleanly at the default depth
    window = [min(d, -(-((d + 1) // 2 + 8) // 4) * 4) for d in dims]
    (path.parent / "phantom.cfg").write_text(
        f"tiling.dims = {list(dims)}\ntiling.window = {window}\ntiling.grid = [2, 2, 2]\n")
    print(f"wrote {len(cases)} {args.preset} cases to {path.parent}")
    return EXIT_OK


def cmd_train_generic(args) -> int:
    cfg = _config(args)
    plan = cfgmod.hsl_plan(cfg)
    cases = load_training_cases(args.data)
    _check_dims(plan.tiling, cases)
    grid = build_grid(plan.tiling)
    result, _ = train_generic(cases, grid, plan.model, plan.stage1, plan.iqda_stage1, plan.identity_prob,
                              seed=plan.seed, split_seed=plan.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, out / GENERIC_CKPT)
    _write_json(out / "generic.json", {"history": result.summary(), "config": cfg})
    (out / "run.cfg").write_text(cfgmod.dump(cfg))
    print(f"generic network: {result.status}, best epoch {result.best_epoch} of {result.epochs_run}")
    return EXIT_OK


def cmd_specialize(args) -> int:
    cfg = _config(args)
    plan = cfgmod.hsl_plan(cfg, from_scratch=args.from_scratch)
    if args.generic is None and not args.from_scratch:
        raise UsageError("specialize needs --generic CHECKPOINT (or --from-scratch to skip HSL)")
    initial = None
    if not args.from_scratch:
        initial = load_checkpoint(args.generic)
        if initial.config != plan.model:
            raise cfgmod.ConfigError("model.* settings do not match the generic checkpoint")
    cases = load_training_cases(args.data)
    _check_dims(plan.tiling, cases)
    grid = build_grid(plan.tiling)
    assignment = fold_symmetric(grid, plan.tiling)
    results, _ = specialize(initial, cases, grid, assignment, plan.tiling.grid_counts, plan.model, plan.stage2,
                            plan.iqda_stage2, plan.identity_prob, seed=plan.seed, jobs=plan.jobs,
                            split_seed=plan.seed)
    networks = {nid: r.params for nid, r in results.items()}
    histories = {nid: r.summary() for nid, r in results.items()}
    out = Path(args.out)
    write_manifest(out, plan.tiling, assignment, networks, histories,
                   extra={"from_scratch": bool(args.from_scratch), "config": cfg})
    (out / "run.cfg").write_text(cfgmod.dump(cfg))
    print(f"wrote {assignment.network_count} specialized networks to {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    jobs = args.jobs or 1
    tiling, assignment, paths = read_manifest(args.model)
    grid = build_grid(tiling)
    src = Path(args.input)
    if src.is_dir():
        items = [(src / f"{n}{IMAGE_SUFFIX}", Path(args.output) / f"{n}{LABEL_SUFFIX}")
                 for n in _case_names(src, IMAGE_SUFFIX)]
        Path(args.output).mkdir(parents=True, exist_ok=True)
    else:
        items = [(src, Path(args.output))]
    for image_path, out_path in items:
        vol = read_volume(image_path)
        if vol.dims != tiling.volume_dims:
            raise UsageError(f"{image_path} has dims {vol.dims}; the networks expect {tiling.volume_dims}")
        result = segment_volume(paths, assignment, grid, zscore_normalize(vol), jobs=jobs)
        write_mvol(result.labels, out_path)
        log.info("segmented %s -> %s", image_path, out_path)
    print(f"segmented {len(items)} volume(s)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    names = _case_names(truth_dir, LABEL_SUFFIX)
    missing = [n for n in names if not (pred_dir / f"{n}{LABEL_SUFFIX}").exists()]
    if missing:
        raise FileNotFoundError(f"no prediction for cases {missing} in {pred_dir}")

    def load(name):
        return (read_labels(pred_dir / f"{name}{LABEL_SUFFIX}"), read_labels(truth_dir / f"{name}{LABEL_SUFFIX}"))

    with ThreadPoolExecutor(max_workers=cfg["io.jobs"]) as pool:
        pairs = list(pool.map(load, names))
    reports = evaluate_cases(pairs, names, cfg["metrics.connectivity"])
    rows = [r.row() for r in reports]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            writer.writerows(rows)
    writer = csv.writer(sys.stdout)
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([row[0]] + [f"{v:.4f}" for v in row[1:]])
    print(f"mean hybrid x100: {mean_hybrid(reports):.2f}")
    print(f"note: {LFPR_NOTE}")
    return EXIT_OK


def cmd_consistency(args) -> int:
    value = consistency_dice(read_labels(args.a), read_labels(args.b))
    print(f"{value:.6f}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    cfg = _config(args)
    vol = read_volume(args.input)
    policy = IqdaPolicy.with_identity(float(cfg["iqda.identity_prob"]), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_rows = []
    for k in range(args.count):
        alt = policy.sample()
        altered, _ = apply_iqda(vol, None, alt)
        name = f"preview_{k:02d}_{alt.kind}.mvol"
        write_mvol(altered, out / name)
        log_rows.append({"file": name, "kind": alt.kind, "sigma": alt.sigma, "sz": alt.sz})
    _write_json(out / "alterations.json", log_rows)
    print(f"wrote {args.count} augmented copies to {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_config(p):
    p.add_argument("--config", metavar="FILE", help="run configuration file (dotted keys)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatialseg",
        description="Spatially distributed 3D U-Net lesion segmentation on a desk-scale budget.",
        epilog=cfgmod.describe(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="hi3d")
    p.add_argument("--cases", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=list(PhantomConfig().dims), metavar=("NX", "NY", "NZ"))
    p.add_argument("--lesion-count", type=int, nargs=2, default=list(PhantomConfig().lesion_count),
                   metavar=("MIN", "MAX"))
    p.add_argument("--lesion-radius", type=float, nargs=2, default=list(PhantomConfig().lesion_radius),
                   metavar=("MIN", "MAX"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train-generic", help="stage 1: train the generic network",
                       epilog=cfgmod.describe(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--data", required=True, help="directory of *_image.mvol / *_labels.mvol pairs")
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_train_generic)

    p = sub.add_parser("specialize", help="stage 2: clone and fine-tune one network per region",
                       epilog=cfgmod.describe(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--data", required=True)
    p.add_argument("--generic", help="generic checkpoint from train-generic")
    p.add_argument("--from-scratch", action="store_true", help="random init instead of the generic network")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int)
    _add_config(p)
    p.set_defaults(func=cmd_specialize)

    p = sub.add_parser("infer", help="segment one volume or a directory of volumes")
    p.add_argument("--model", required=True, help="directory written by specialize")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="per-case metrics as CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="CSV file to write")
    p.add_argument("--jobs", type=int)
    _add_config(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("consistency", help="Dice between two label maps")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("augment-preview", help="write IQDA-altered copies of a volume")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    _add_config(p)
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (cfgmod.ConfigError, PhantomError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, UsageError, MvolFormatError, VolumeError, CheckpointError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
