"""Run configuration: a plain text file of ``dotted.key = value`` lines.

Values are JSON literals (numbers, true/false, null, [lists], "strings");
a bare word such as a path is taken as a string.  ``#`` starts a
comment.  Unknown keys and malformed lines are rejected with their line number.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .hsl import HslPlan
from .tiling import TilingConfig
from .training import TrainConfig
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    default: object
    help: str
    source: str = ""  # where the default comes from, if it is a published setting


KEYS = {
    "tiling.window": Key([96, 96, 96], "sub-volume size in voxels", "96 per axis"),
    "tiling.grid": Key([5, 5, 5], "sub-volumes per axis", "125 sub-volumes"),
    "tiling.dims": Key([181, 217, 181], "volume dims the grid is built for (1 mm MNI)"),
    "model.input_channels": Key(2, "image channels (T1w + FLAIR)", "2 channels"),
    "model.depth": Key(3, "U-Net resolution levels"),
    "model.base_filters": Key(8, "filters at the top level, doubled per level"),
    "model.gn_groups": Key(8, "group-normalization groups", "GN with 8 groups"),
    "model.dropout": Key(0.5, "dropout after each max-pool", "dropout 0.5"),
    "training.lr": Key(1e-4, "Adam learning rate", "lr 0.0001"),
    "training.beta1": Key(0.9, "Adam first-moment decay", "momentum 0.9"),
    "training.beta2": Key(0.999, "Adam second-moment decay"),
    "training.epsilon": Key(1e-8, "Adam epsilon"),
    "training.max_epochs": Key(500, "epoch cap", "max 500 epochs"),
    "training.patience": Key(50, "early-stopping patience in epochs", "patience 50"),
    "training.batch_size": Key(1, "patches per update (only 1 supported)", "batch size 1"),
    "training.sigma_smooth": Key(1.0, "Jaccard loss smoothness"),
    "training.seed": Key(0, "master random seed"),
    "training.val_fraction": Key(0.2, "fraction of cases held out for validation"),
    "training.patches_per_epoch": Key(None, "patches per epoch (null: one pass over all)"),
    "training.stage2_max_epochs": Key(500, "epoch cap when specializing (0: clone only)"),
    "training.stage2_patience": Key(50, "early-stopping patience when specializing"),
    "iqda.enabled": Key(True, "image-quality augmentation on/off"),
    "iqda.identity_prob": Key(0.0, "probability of leaving a patch unaltered"),
    "iqda.stage1": Key(True, "augment while training the generic network"),
    "iqda.stage2": Key(True, "augment while specializing"),
    "metrics.connectivity": Key(26, "lesion connectivity (6, 18 or 26)"),
    "io.jobs": Key(1, "worker threads for specialization and inference"),
}


def defaults() -> dict:
    return {k: v.default for k, v in KEYS.items()}


_BARE = re.compile(r"[A-Za-z_./~-][\w./~-]*")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if _BARE.fullmatch(text):
            return text
        raise ValueError(f"cannot parse value {text!r}") from None


def parse_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if not value:
            raise ConfigError(f"{origin}:{lineno}: missing value for {key!r}")
        try:
            out[key] = _parse_value(value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return out


def load(path=None, overrides=()) -> dict:
    """Defaults, then the file, then ``key=value`` overrides."""
    cfg = defaults()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg.update(parse_text(text, str(path)))
    for i, item in enumerate(overrides, start=1):
        if "=" not in item:
            raise ConfigError(f"--set #{i}: expected key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"--set #{i}: unknown key {key!r}")
        try:
            cfg[key] = _parse_value(value)
        except ValueError as exc:
            raise ConfigError(f"--set #{i}: {exc}") from None
    validate(cfg)
    return cfg


def dump(cfg: dict) -> str:
    return "".join(f"{k} = {json.dumps(cfg[k])}\n" for k in KEYS)


def _triple(cfg, key):
    val = cfg[key]
    if not (isinstance(val, list) and len(val) == 3 and all(isinstance(v, int) for v in val)):
        raise ConfigError(f"{key} must be a list of three integers, got {val!r}")
    return tuple(val)


def tiling_config(cfg) -> TilingConfig:
    try:
        return TilingConfig(_triple(cfg, "tiling.window"), _triple(cfg, "tiling.grid"), _triple(cfg, "tiling.dims"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def model_config(cfg) -> UNetConfig:
    try:
        return UNetConfig(input_channels=int(cfg["model.input_channels"]), depth=int(cfg["model.depth"]),
                          base_filters=int(cfg["model.base_filters"]), gn_groups=int(cfg["model.gn_groups"]),
                          dropout_rate=float(cfg["model.dropout"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def train_config(cfg, stage: int = 1) -> TrainConfig | None:
    max_epochs = cfg["training.max_epochs"] if stage == 1 else cfg["training.stage2_max_epochs"]
    patience = cfg["training.patience"] if stage == 1 else cfg["training.stage2_patience"]
    if stage == 2 and int(max_epochs) == 0:
        return None
    try:
        return TrainConfig(max_epochs=int(max_epochs), patience=int(patience),
                           batch_size=int(cfg["training.batch_size"]),
                           val_fraction=float(cfg["training.val_fraction"]), seed=int(cfg["training.seed"]),
                           patches_per_epoch=cfg["training.patches_per_epoch"],
                           learning_rate=float(cfg["training.lr"]), beta1=float(cfg["training.beta1"]),
                           beta2=float(cfg["training.beta2"]), epsilon=float(cfg["training.epsilon"]),
                           smoothness=float(cfg["training.sigma_smooth"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training: {exc}") from exc


def hsl_plan(cfg, from_scratch: bool = False) -> HslPlan:
    return HslPlan(tiling=tiling_config(cfg), model=model_config(cfg), stage1=train_config(cfg, 1),
                   stage2=train_config(cfg, 2), iqda_stage1=bool(cfg["iqda.enabled"] and cfg["iqda.stage1"]),
                   iqda_stage2=bool(cfg["iqda.enabled"] and cfg["iqda.stage2"]),
                   identity_prob=float(cfg["iqda.identity_prob"]), from_scratch=from_scratch,
                   seed=int(cfg["training.seed"]), jobs=int(cfg["io.jobs"]))


def validate(cfg) -> None:
    tiling_config(cfg)
    model_config(cfg)
    train_config(cfg, 1)
    train_config(cfg, 2)
    p = cfg["iqda.identity_prob"]
    if not isinstance(p, (int, float)) or not 0.0 <= p <= 1.0:
        raise ConfigError(f"iqda.identity_prob must lie in [0, 1], got {p!r}")
    if cfg["metrics.connectivity"] not in (6, 18, 26):
        raise ConfigError("metrics.connectivity must be 6, 18 or 26")
    if not isinstance(cfg["io.jobs"], int) or cfg["io.jobs"] < 1:
        raise ConfigError("io.jobs must be a positive integer")


def describe() -> str:
    lines = ["configuration keys (default; published setting where one exists):"]
    for k, v in KEYS.items():
        src = f"  [{v.source}]" if v.source else ""
        lines.append(f"  {k} = {json.dumps(v.default)}  {v.help}{src}")
    return "\n".join(lines)
