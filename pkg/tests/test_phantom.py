import numpy as np
import pytest

from spatialseg.phantom import (LESION, PRESETS, WM, DomainPreset, PhantomConfig, PhantomError, _slab_average,
                                generate_case, generate_dataset, get_preset, load_dataset, place_lesions,
                                regenerate, save_dataset, tissue_map)

SMALL = PhantomConfig(dims=(24, 28, 24), lesion_count=(2, 4), lesion_radius=(1.0, 2.0), seed=1)


def _axial_hf_energy(img):
    return float((np.diff(img, axis=-1) ** 2).sum())


def test_no_lesions_gives_empty_labels():
    cfg = PhantomConfig(dims=(16, 16, 16), lesion_count=(0, 0))
    vol, lab = generate_case(cfg, get_preset("hi3d"), 3)
    assert not lab.data.any()
    assert vol.channels == 2


def test_same_seed_same_case():
    a = generate_case(SMALL, get_preset("lo2d"), 9)
    b = generate_case(SMALL, get_preset("lo2d"), 9)
    assert a[0] == b[0] and a[1] == b[1]
    c = generate_case(SMALL, get_preset("lo2d"), 10)
    assert not np.array_equal(a[1].data, c[1].data) or not np.array_equal(a[0].data, c[0].data)


def test_presets_share_labels():
    labels = [generate_case(SMALL, p, 5)[1] for p in PRESETS.values()]
    assert all(l == labels[0] for l in labels)
    assert labels[0].data.any()


def test_thick_slices_remove_axial_detail():
    thin = DomainPreset("thin", slice_factor=1)
    thick = DomainPreset("thick", slice_factor=3)
    v1, l1 = generate_case(SMALL, thin, 2)
    v3, l3 = generate_case(SMALL, thick, 2)
    assert l1 == l3
    assert _axial_hf_energy(v3.data) < _axial_hf_energy(v1.data)


def test_slab_average_profile():
    arr = np.arange(7, dtype=float).reshape(1, 1, 7)
    assert _slab_average(arr, 3).ravel().tolist() == [1, 1, 1, 4, 4, 4, 6]
    assert _slab_average(arr, 1) is arr


def test_tissue_map_is_mirror_symmetric():
    t = tissue_map(SMALL)
    assert np.array_equal(t, t[::-1])
    assert (t == WM).any()
    assert not (t == LESION).any()


def test_lesions_inside_white_matter_and_apart():
    tissue = tissue_map(SMALL)
    rng = np.random.default_rng(0)
    mask, spheres = place_lesions(tissue, SMALL, rng)
    assert (tissue[mask] == WM).all()
    assert SMALL.lesion_count[0] <= len(spheres) <= SMALL.lesion_count[1]
    from spatialseg.metrics import connected_components
    assert connected_components(mask, 26)[1] == len(spheres)


def test_impossible_placement_raises():
    cfg = PhantomConfig(dims=(12, 12, 12), lesion_count=(3, 3), lesion_radius=(5.0, 6.0))
    with pytest.raises(PhantomError):
        place_lesions(tissue_map(cfg), cfg, np.random.default_rng(0), max_tries=20)


def test_lesions_brighter_on_flair_in_clean_domain():
    vol, lab = generate_case(SMALL, get_preset("hi3d"), 1)
    flair = vol.data[1]
    inside = lab.data.astype(bool)
    wm = tissue_map(SMALL) == WM
    assert flair[inside].mean() > flair[wm & ~inside].mean() + 0.3


def test_regenerate_and_disk_round_trip(tmp_path):
    cases, manifest = generate_dataset(SMALL, get_preset("mid3d"), 2, 17)
    again = regenerate(manifest)
    for (v, l), (v2, l2) in zip(cases, again):
        assert v.data.tobytes() == v2.data.tobytes() and l == l2
    save_dataset(cases, manifest, tmp_path)
    loaded, m2 = load_dataset(tmp_path)
    assert m2["case_seeds"] == manifest["case_seeds"]
    for (v, l), (v2, l2), (v3, l3) in zip(cases, loaded, regenerate(m2)):
        assert v == v2 and l == l2
        assert v.data.tobytes() == v3.data.tobytes() and l == l3


def test_preset_validation():
    with pytest.raises(ValueError):
        get_preset("ultra")
    with pytest.raises(ValueError):
        DomainPreset("x", slice_factor=0)
    with pytest.raises(ValueError):
        DomainPreset("x", noise=-1.0)
    with pytest.raises(ValueError):
        generate_dataset(SMALL, get_preset("hi3d"), 0, 0)


def test_lesion_voxels_equal_sum_of_sphere_memberships():
    tissue = tissue_map(SMALL)
    mask, spheres = place_lesions(tissue, SMALL, np.random.default_rng(4))
    total = 0
    for (cx, cy, cz), r in spheres:
        # plain membership loop over the bounding box
        for x in range(int(cx - r) - 1, int(cx + r) + 2):
            for y in range(int(cy - r) - 1, int(cy + r) + 2):
                for z in range(int(cz - r) - 1, int(cz + r) + 2):
                    total += (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= r * r
    assert int(mask.sum()) == total
