"""Synthetic two-channel brain phantoms with spherical lesions.

Anatomy is a set of nested ellipsoids centred on the x mid-plane, so the
noise-free tissue layout is exactly mirror-symmetric.  Domain presets then
degrade the images (slab averaging, blur, contrast, noise) without touching
the labels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .iqda import blur_array
from .volume import LabelMap, Volume, read_labels, read_volume, write_mvol

# tissue classes
BACKGROUND, CSF, GM, WM, VENTRICLE, LESION = range(6)

# (T1-like, FLAIR-like) intensity per tissue class
INTENSITIES = {
    BACKGROUND: (0.0, 0.0),
    CSF: (0.25, 0.15),
    GM: (0.55, 0.60),
    WM: (0.85, 0.50),
    VENTRICLE: (0.20, 0.10),
    LESION: (0.55, 1.00),
}


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 72, 64)
    # ellipsoid semi-axes as fractions of the half-dims: head, brain (GM outer), WM, ventricles
    head_radii: tuple[float, float, float] = (0.92, 0.92, 0.90)
    brain_radii: tuple[float, float, float] = (0.84, 0.84, 0.80)
    wm_radii: tuple[float, float, float] = (0.66, 0.68, 0.62)
    ventricle_radii: tuple[float, float, float] = (0.16, 0.30, 0.18)
    lesion_count: tuple[int, int] = (4, 10)
    lesion_radius: tuple[float, float] = (1.5, 3.5)
    seed: int = 0


@dataclass(frozen=True)
class DomainPreset:
    name: str
    noise: float = 0.0
    blur_sigma: float = 0.0
    slice_factor: int = 1
    contrast_scale: tuple[float, float] = (1.0, 1.0)
    contrast_offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.slice_factor < 1:
            raise ValueError("slice_factor must be >= 1")
        if self.noise < 0 or self.blur_sigma < 0:
            raise ValueError("noise and blur must be non-negative")


PRESETS = {
    "hi3d": DomainPreset("hi3d", noise=0.02, blur_sigma=0.0, slice_factor=1,
                         contrast_scale=(1.0, 1.0), contrast_offset=(0.0, 0.0)),
    "mid3d": DomainPreset("mid3d", noise=0.04, blur_sigma=0.6, slice_factor=2,
                          contrast_scale=(0.9, 1.1), contrast_offset=(0.05, -0.02)),
    "lo2d": DomainPreset("lo2d", noise=0.06, blur_sigma=1.0, slice_factor=3,
                         contrast_scale=(1.2, 0.8), contrast_offset=(-0.05, 0.05)),
}


def get_preset(name: str) -> DomainPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _grid(dims):
    nx, ny, nz = dims
    # centres at (n-1)/2 make x and nx-1-x exact mirror images
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    x = (np.arange(nx) - cx)[:, None, None]
    y = (np.arange(ny) - cy)[None, :, None]
    z = (np.arange(nz) - cz)[None, None, :]
    return x, y, z


def _ellipsoid(dims, radii):
    x, y, z = _grid(dims)
    hx, hy, hz = (d / 2.0 for d in dims)
    rx, ry, rz = radii[0] * hx, radii[1] * hy, radii[2] * hz
    return (x / rx) ** 2 + (y / ry) ** 2 + (z / rz) ** 2 <= 1.0


def tissue_map(config: PhantomConfig) -> np.ndarray:
    """Integer tissue classes, before lesions."""
    t = np.full(config.dims, BACKGROUND, dtype=np.uint8)
    t[_ellipsoid(config.dims, config.head_radii)] = CSF
    t[_ellipsoid(config.dims, config.brain_radii)] = GM
    t[_ellipsoid(config.dims, config.wm_radii)] = WM
    t[_ellipsoid(config.dims, config.ventricle_radii)] = VENTRICLE
    return t


def sphere_mask(dims, center, radius) -> np.ndarray:
    x = np.arange(dims[0])[:, None, None]
    y = np.arange(dims[1])[None, :, None]
    z = np.arange(dims[2])[None, None, :]
    cx, cy, cz = center
    return (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= radius ** 2


def place_lesions(tissue: np.ndarray, config: PhantomConfig, rng, max_tries: int = 200):
    """Random non-touching spheres fully inside white matter.  Returns the
    painted mask and the (center, radius) list."""
    lo, hi = config.lesion_count
    n = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    wm = tissue == WM
    mask = np.zeros(tissue.shape, dtype=bool)
    halo = np.zeros(tissue.shape, dtype=bool)  # lesions plus a one-voxel margin
    spheres = []
    candidates = np.argwhere(wm)
    for _ in range(n):
        for _ in range(max_tries):
            c = candidates[rng.integers(len(candidates))] + rng.uniform(-0.5, 0.5, size=3)
            r = float(rng.uniform(*config.lesion_radius))
            s = sphere_mask(tissue.shape, c, r)
            if s.any() and wm[s].all() and not halo[s].any():
                mask |= s
                halo |= ndimage.binary_dilation(s, structure=np.ones((3, 3, 3), dtype=bool))
                spheres.append((tuple(float(v) for v in c), r))
                break
        else:
            raise PhantomError(f"could not place a lesion inside white matter after {max_tries} tries")
    return mask, spheres


def _slab_average(arr: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping groups of ``factor`` axial slices and replicate
    each mean back over its group (thick-slice acquisition)."""
    if factor == 1:
        return arr
    nz = arr.shape[-1]
    out = np.empty_like(arr)
    for z0 in range(0, nz, factor):
        z1 = min(z0 + factor, nz)
        out[..., z0:z1] = arr[..., z0:z1].mean(axis=-1, keepdims=True)
    return out


def render_clean(tissue: np.ndarray, lesions: np.ndarray) -> np.ndarray:
    img = np.zeros((2,) + tissue.shape, dtype=np.float64)
    for cls, (t1, flair) in INTENSITIES.items():
        if cls == LESION:
            continue
        sel = tissue == cls
        img[0][sel] = t1
        img[1][sel] = flair
    img[0][lesions] = INTENSITIES[LESION][0]
    img[1][lesions] = INTENSITIES[LESION][1]
    return img


def degrade(img: np.ndarray, preset: DomainPreset, rng) -> np.ndarray:
    out = _slab_average(img, preset.slice_factor)
    if preset.blur_sigma > 0:
        out = blur_array(out, preset.blur_sigma)
    scale = np.asarray(preset.contrast_scale, dtype=np.float64)[:, None, None, None]
    offset = np.asarray(preset.contrast_offset, dtype=np.float64)[:, None, None, None]
    out = out * scale + offset
    if preset.noise > 0:
        out = out + rng.normal(0.0, preset.noise, size=out.shape)
    return out


def generate_case(config: PhantomConfig, preset: DomainPreset, case_seed: int):
    """(2-channel Volume, LabelMap).  Lesion placement depends only on the
    seeds, so different presets share identical labels."""
    anat_rng = np.random.default_rng([config.seed, case_seed, 0])
    noise_rng = np.random.default_rng([config.seed, case_seed, 1])
    tissue = tissue_map(config)
    lesions, _ = place_lesions(tissue, config, anat_rng)
    img = degrade(render_clean(tissue, lesions), preset, noise_rng)
    return Volume(img.astype(np.float32)), LabelMap(lesions.astype(np.uint8))


def generate_dataset(config: PhantomConfig, preset: DomainPreset, n_cases: int, seed: int):
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    case_seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n_cases)]
    cases = [generate_case(config, preset, s) for s in case_seeds]
    manifest = {
        "config": asdict(config),
        "preset": asdict(preset),
        "seed": seed,
        "case_seeds": case_seeds,
        "cases": [f"case_{i:03d}" for i in range(n_cases)],
    }
    return cases, manifest


def regenerate(manifest: dict):
    config = PhantomConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["config"].items()})
    preset = DomainPreset(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["preset"].items()})
    return [generate_case(config, preset, s) for s in manifest["case_seeds"]]


def save_dataset(cases, manifest: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, (vol, lab) in zip(manifest["cases"], cases):
        write_mvol(vol, out / f"{name}_image.mvol")
        write_mvol(lab, out / f"{name}_labels.mvol")
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cases = [(read_volume(directory / f"{n}_image.mvol"), read_labels(directory / f"{n}_labels.mvol"))
             for n in manifest["cases"]]
    return cases, manifest
