"""Compact 3D U-Net: GN -> Conv -> ReLU blocks, max-pool + dropout on the way
down, nearest-neighbour upsampling + conv on the way up, softmax head.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn


@dataclass(frozen=True)
class UNetConfig:
    input_channels: int = 2
    num_classes: int = 2
    depth: int = 3
    base_filters: int = 8
    gn_groups: int = 8
    dropout_rate: float = 0.5
    kernel: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.base_filters % self.gn_groups:
            raise ValueError("base_filters must be divisible by gn_groups")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level

    def groups_for(self, channels: int) -> int:
        # raw input channels (e.g. 2) cannot be split into 8 groups
        return math.gcd(self.gn_groups, channels)

    def check_input(self, shape) -> None:
        if len(shape) != 4:
            raise nn.ShapeError(f"expected (channels, x, y, z) input, got {shape}")
        if shape[0] != self.input_channels:
            raise nn.ShapeError(f"expected {self.input_channels} input channels, got {shape[0]}")
        f = 2 ** (self.depth - 1)
        if any(s % f for s in shape[1:]):
            raise nn.ShapeError(f"spatial dims {shape[1:]} must be divisible by {f}")


def _block_specs(cfg: UNetConfig):
    """(name, kind, in_channels, out_channels) for every parameterised layer."""
    specs = []
    c_in = cfg.input_channels
    for lvl in range(cfg.depth):
        f = cfg.filters(lvl)
        specs.append((f"enc{lvl}_0", "gnconv", c_in, f))
        specs.append((f"enc{lvl}_1", "gnconv", f, f))
        c_in = f
    for lvl in range(cfg.depth - 2, -1, -1):
        f = cfg.filters(lvl)
        specs.append((f"up{lvl}", "conv", cfg.filters(lvl + 1), f))
        specs.append((f"dec{lvl}_0", "gnconv", 2 * f, f))
        specs.append((f"dec{lvl}_1", "gnconv", f, f))
    specs.append(("head", "conv1", cfg.filters(0), cfg.num_classes))
    return specs


HEAD_INIT_STD = 0.05


class NetworkParams:
    """Ordered, named parameter blocks of one U-Net."""

    def __init__(self, config: UNetConfig, blocks: "OrderedDict[str, np.ndarray]"):
        self.config = config
        self.blocks = OrderedDict(blocks)

    @classmethod
    def init(cls, config: UNetConfig, seed=0, dtype=np.float32) -> "NetworkParams":
        rng = np.random.default_rng(seed)
        blocks = OrderedDict()
        k = config.kernel
        for name, kind, cin, cout in _block_specs(config):
            if kind == "gnconv":
                blocks[f"{name}.gn.scale"] = np.ones(cin, dtype=dtype)
                blocks[f"{name}.gn.shift"] = np.zeros(cin, dtype=dtype)
            if kind == "conv1":
                # small head weights start the softmax near uniform; a He-scaled head can begin
                # tilted toward background and saturate there within the first epoch
                w = (HEAD_INIT_STD * rng.standard_normal((cout, cin, 1, 1, 1))).astype(dtype)
            else:
                w = nn.he_uniform(rng, (cout, cin, k, k, k), dtype)
            blocks[f"{name}.conv.weight"] = w
            blocks[f"{name}.conv.bias"] = np.zeros(cout, dtype=dtype)
        return cls(config, blocks)

    @property
    def dtype(self):
        return next(iter(self.blocks.values())).dtype

    def clone(self) -> "NetworkParams":
        return NetworkParams(self.config, OrderedDict((k, v.copy()) for k, v in self.blocks.items()))

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.config, OrderedDict((k, v.astype(dtype)) for k, v in self.blocks.items()))

    def size(self) -> int:
        return sum(v.size for v in self.blocks.values())

    def __getitem__(self, key):
        return self.blocks[key]

    def __iter__(self):
        return iter(self.blocks)

    def items(self):
        return self.blocks.items()

    def equals(self, other: "NetworkParams") -> bool:
        """Bit-exact equality of config and every block."""
        if self.config != other.config or list(self.blocks) != list(other.blocks):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.blocks.values(), other.blocks.values())
        )


class ForwardState:
    """Everything backward needs from one forward pass."""

    def __init__(self, x):
        self.input = x
        self.caches = {}
        self.probs = None

    def activation_pattern(self):
        """ReLU masks and pool argmaxes; equal patterns mean no kink was crossed."""
        out = []
        for key in sorted(self.caches):
            cache = self.caches[key]
            if key.endswith(".relu"):
                out.append(cache)
            elif key.endswith(".pool"):
                out.append(cache[0])
        return out


def _gnconv(params, name, x, state, groups_of):
    cfg = params.config
    h, c = nn.group_norm_forward(x, params[f"{name}.gn.scale"], params[f"{name}.gn.shift"], groups_of(x.shape[0]))
    state.caches[f"{name}.gn"] = c
    h, c = nn.conv3d_forward(h, params[f"{name}.conv.weight"], params[f"{name}.conv.bias"])
    state.caches[f"{name}.conv"] = c
    h, m = nn.relu_forward(h)
    state.caches[f"{name}.relu"] = m
    return h


def _gnconv_back(params, name, d, state, grads):
    d = nn.relu_backward(d, state.caches[f"{name}.relu"])
    d, dw, db = nn.conv3d_backward(d, state.caches[f"{name}.conv"])
    grads[f"{name}.conv.weight"] = dw
    grads[f"{name}.conv.bias"] = db
    d, ds, dsh = nn.group_norm_backward(d, state.caches[f"{name}.gn"])
    grads[f"{name}.gn.scale"] = ds
    grads[f"{name}.gn.shift"] = dsh
    return d


def unet_forward(params: NetworkParams, x, training: bool = False, rng=None):
    """Class probabilities ``(num_classes, x, y, z)`` plus the state for backward."""
    cfg = params.config
    x = np.asarray(x)
    cfg.check_input(x.shape)
    x = x.astype(params.dtype, copy=False)
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("training mode with dropout needs a random generator")
    state = ForwardState(x)
    groups_of = cfg.groups_for

    skips = []
    h = x
    for lvl in range(cfg.depth):
        if lvl > 0:
            h, c = nn.max_pool_forward(h)
            state.caches[f"pool{lvl}.pool"] = c
            h, keep = nn.dropout_forward(h, cfg.dropout_rate, training, rng)
            state.caches[f"drop{lvl}"] = keep
        h = _gnconv(params, f"enc{lvl}_0", h, state, groups_of)
        h = _gnconv(params, f"enc{lvl}_1", h, state, groups_of)
        skips.append(h)

    for lvl in range(cfg.depth - 2, -1, -1):
        h = nn.upsample_forward(h)
        h, c = nn.conv3d_forward(h, params[f"up{lvl}.conv.weight"], params[f"up{lvl}.conv.bias"])
        state.caches[f"up{lvl}.conv"] = c
        h = nn.concat_skip(skips[lvl], h)
        h = _gnconv(params, f"dec{lvl}_0", h, state, groups_of)
        h = _gnconv(params, f"dec{lvl}_1", h, state, groups_of)

    logits, c = nn.conv3d_forward(h, params["head.conv.weight"], params["head.conv.bias"])
    state.caches["head.conv"] = c
    state.probs = nn.softmax_forward(logits)
    return state.probs, state


def unet_backward(params: NetworkParams, state: ForwardState | None, dprobs):
    """Gradients of every parameter block and of the input, given dL/dprobs."""
    if state is None or state.probs is None:
        raise RuntimeError("no cached forward state; run unet_forward first")
    cfg = params.config
    grads = {}
    d = nn.softmax_backward(np.asarray(dprobs, dtype=state.probs.dtype), state.probs)
    d, grads["head.conv.weight"], grads["head.conv.bias"] = nn.conv3d_backward(d, state.caches["head.conv"])

    dskips = [None] * cfg.depth
    for lvl in range(0, cfg.depth - 1):
        f = cfg.filters(lvl)
        d = _gnconv_back(params, f"dec{lvl}_1", d, state, grads)
        d = _gnconv_back(params, f"dec{lvl}_0", d, state, grads)
        dskip, d = nn.split_channels(d, [f, f])
        dskips[lvl] = dskip
        d, grads[f"up{lvl}.conv.weight"], grads[f"up{lvl}.conv.bias"] = nn.conv3d_backward(d, state.caches[f"up{lvl}.conv"])
        d = nn.upsample_backward(d)

    for lvl in range(cfg.depth - 1, -1, -1):
        if dskips[lvl] is not None:
            d = d + dskips[lvl]
        d = _gnconv_back(params, f"enc{lvl}_1", d, state, grads)
        d = _gnconv_back(params, f"enc{lvl}_0", d, state, grads)
        if lvl > 0:
            d = nn.dropout_backward(d, state.caches[f"drop{lvl}"])
            d = nn.max_pool_backward(d, state.caches[f"pool{lvl}.pool"])

    ordered = OrderedDict((k, grads[k]) for k in params.blocks)
    return ordered, d


def predict(params: NetworkParams, x) -> np.ndarray:
    return unet_forward(params, x, training=False)[0]


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"UCKP"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: NetworkParams, path) -> None:
    table = []
    payload = []
    for key, arr in params.items():
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        table.append({"id": key, "shape": list(arr.shape), "dtype": dt})
        payload.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    header = json.dumps({"config": asdict(params.config), "blocks": table}, sort_keys=True).encode()
    Path(path).write_bytes(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + b"".join(payload))


def load_checkpoint(path) -> NetworkParams:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CKPT_HEAD.unpack(raw[: _CKPT_HEAD.size])
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_HEAD.size
    header = json.loads(raw[start:start + hlen])
    config = UNetConfig(**header["config"])
    offset = start + hlen
    blocks = OrderedDict()
    for entry in header["blocks"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + n * dt.itemsize
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload in block {entry['id']}")
        blocks[entry["id"]] = np.frombuffer(raw[offset:end], dtype=dt).reshape(entry["shape"]).astype(dt.newbyteorder("="))
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return NetworkParams(config, blocks)
