"""Image-quality data augmentation.

Simulates acquisition-quality variation on image patches: gaussian blur,
unsharp-mask edge enhancement and axial mean filtering (thick-slice
simulation).  Label maps pass through untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import LabelMap, Volume

SIGMA_RANGE = (0.5, 1.75)
SZ_CHOICES = (2, 3, 4)

BLUR = "blur"
SHARPEN = "sharpen"
AXIAL_MEAN = "axial_mean"
IDENTITY = "identity"
KINDS = (BLUR, SHARPEN, AXIAL_MEAN, IDENTITY)


@dataclass(frozen=True)
class Alteration:
    kind: str = IDENTITY
    sigma: float | None = None
    sz: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown alteration {self.kind!r}")
        if self.kind in (BLUR, SHARPEN):
            if self.sigma is None or not (SIGMA_RANGE[0] <= self.sigma <= SIGMA_RANGE[1]):
                raise ValueError(f"{self.kind} sigma must lie in {SIGMA_RANGE}, got {self.sigma}")
        if self.kind == AXIAL_MEAN and self.sz not in SZ_CHOICES:
            raise ValueError(f"axial mean size must be one of {SZ_CHOICES}, got {self.sz}")


class IqdaPolicy:
    """Draws one alteration per training iteration.

    ``probs`` are the probabilities of blur, sharpen, axial mean and identity.
    """

    def __init__(self, probs=(1 / 3, 1 / 3, 1 / 3, 0.0), seed=None, rng=None,
                 sigma_range=SIGMA_RANGE, sz_choices=SZ_CHOICES):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (4,) or (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"policy probabilities must be 4 non-negative values summing to 1, got {probs}")
        lo, hi = sigma_range
        if lo < SIGMA_RANGE[0] or hi > SIGMA_RANGE[1] or lo > hi:
            raise ValueError(f"sigma range must lie within {SIGMA_RANGE}")
        if not set(sz_choices) <= set(SZ_CHOICES) or not sz_choices:
            raise ValueError(f"sz choices must be a subset of {SZ_CHOICES}")
        self.probs = probs / probs.sum()
        self.sigma_range = (float(lo), float(hi))
        self.sz_choices = tuple(int(s) for s in sz_choices)
        self.rng = rng if rng is not None else np.random.default_rng(seed)

    @classmethod
    def with_identity(cls, identity_prob: float, **kwargs) -> "IqdaPolicy":
        rest = (1.0 - identity_prob) / 3.0
        return cls((rest, rest, rest, identity_prob), **kwargs)

    def sample(self) -> Alteration:
        kind = KINDS[self.rng.choice(4, p=self.probs)]
        if kind in (BLUR, SHARPEN):
            return Alteration(kind, sigma=float(self.rng.uniform(*self.sigma_range)))
        if kind == AXIAL_MEAN:
            return Alteration(kind, sz=int(self.rng.choice(self.sz_choices)))
        return Alteration(IDENTITY)


def sample_alteration(policy: IqdaPolicy) -> Alteration:
    return policy.sample()


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    padded = np.pad(arr, pad, mode="edge")
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for j, w in enumerate(kernel):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(j, j + n)
        out += w * padded[tuple(sl)]
    return out


def _spatial(volume):
    if isinstance(volume, Volume):
        return volume.data.astype(np.float64), volume.spacing
    arr = np.asarray(volume, dtype=np.float64)
    return (arr[None] if arr.ndim == 3 else arr), None


def _wrap(arr: np.ndarray, spacing, like):
    if spacing is not None:
        return Volume(arr.astype(np.float32), spacing)
    like = np.asarray(like)
    return arr.reshape(like.shape).astype(like.dtype if like.dtype.kind == "f" else np.float64)


def blur_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    for axis in (1, 2, 3):
        arr = _filter_axis(arr, k, axis)
    return arr


def gaussian_blur(volume, sigma: float):
    """Separable gaussian blur with replicate padding (channel by channel)."""
    arr, spacing = _spatial(volume)
    return _wrap(blur_array(arr, sigma), spacing, volume)


def unsharp_mask(volume, sigma: float, clamp: bool = True):
    arr, spacing = _spatial(volume)
    out = 2.0 * arr - blur_array(arr, sigma)
    if clamp:
        lo = arr.min(axis=(1, 2, 3), keepdims=True)
        hi = arr.max(axis=(1, 2, 3), keepdims=True)
        out = np.clip(out, lo, hi)
    return _wrap(out, spacing, volume)


def axial_mean(volume, sz: int):
    """Mean over the forward window {z, ..., z+sz-1}, clipped at the last slice."""
    if sz not in SZ_CHOICES:
        raise ValueError(f"axial mean size must be one of {SZ_CHOICES}, got {sz}")
    arr, spacing = _spatial(volume)
    nz = arr.shape[3]
    csum = np.concatenate([np.zeros(arr.shape[:3] + (1,)), np.cumsum(arr, axis=3)], axis=3)
    z = np.arange(nz)
    hi = np.minimum(z + sz, nz)
    out = (csum[..., hi] - csum[..., z]) / (hi - z)
    return _wrap(out, spacing, volume)


def apply_iqda(patch: Volume, labels: LabelMap, alteration: Alteration):
    if alteration.kind == BLUR:
        patch = gaussian_blur(patch, alteration.sigma)
    elif alteration.kind == SHARPEN:
        patch = unsharp_mask(patch, alteration.sigma)
    elif alteration.kind == AXIAL_MEAN:
        patch = axial_mean(patch, alteration.sz)
    return patch, labels
