from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialseg.iqda import (AXIAL_MEAN, BLUR, IDENTITY, SHARPEN, Alteration, IqdaPolicy, apply_iqda, axial_mean,
                             blur_array, gaussian_blur, gaussian_kernel, unsharp_mask)
from spatialseg.volume import LabelMap, Volume

from oracles import axial_window_mean, dense_blur


def test_kernel_normalized_and_radius():
    k = gaussian_kernel(1.0)
    assert len(k) == 7
    assert abs(k.sum() - 1.0) < 1e-15
    assert len(gaussian_kernel(1.75)) == 2 * 6 + 1


def test_impulse_center_weight_and_dense_oracle():
    arr = np.zeros((9, 9, 9))
    arr[4, 4, 4] = 1.0
    out = gaussian_blur(arr, 1.0)
    w0 = gaussian_kernel(1.0)[3]
    assert abs(out[4, 4, 4] - w0 ** 3) < 1e-12
    assert np.max(np.abs(out - dense_blur(arr, 1.0))) < 1e-6


def test_blur_random_small_instances_match_dense_oracle():
    rng = np.random.default_rng(7)
    for _ in range(6):
        shape = tuple(rng.integers(2, 6, size=3))
        arr = rng.normal(size=shape)
        sigma = float(rng.uniform(0.5, 1.0))
        assert np.max(np.abs(gaussian_blur(arr, sigma) - dense_blur(arr, sigma))) < 1e-6


def test_blur_variance_decreases_with_sigma():
    noise = np.random.default_rng(0).normal(size=(16, 16, 16))
    variances = [gaussian_blur(noise, s).var() for s in (0.5, 1.0, 1.75)]
    assert variances[0] > variances[1] > variances[2]


@settings(max_examples=25, deadline=None)
@given(st.floats(-100, 100), st.floats(0.5, 1.75), st.sampled_from([2, 3, 4]))
def test_filters_fix_constant_volumes(c, sigma, sz):
    vol = np.full((5, 4, 6), c)
    assert np.max(np.abs(gaussian_blur(vol, sigma) - c)) <= 1e-6 * max(1.0, abs(c))
    assert np.max(np.abs(unsharp_mask(vol, sigma) - c)) <= 1e-6 * max(1.0, abs(c))
    assert np.max(np.abs(axial_mean(vol, sz) - c)) <= 1e-6 * max(1.0, abs(c))


def test_unsharp_step_edge_overshoot_then_clamped():
    profile = np.zeros((12, 1, 1))
    profile[6:] = 1.0
    raw = unsharp_mask(profile, 1.0, clamp=False)[:, 0, 0]
    # hand computation: next to the edge the blurred value is below 1, so 2x - blur exceeds 1
    blurred = blur_array(profile[None], 1.0)[0, :, 0, 0]
    assert raw[6] == pytest.approx(2 - blurred[6])
    assert raw[6] > 1.0 and raw[5] < 0.0
    clamped = unsharp_mask(profile, 1.0)[:, 0, 0]
    assert clamped.min() >= 0.0 and clamped.max() <= 1.0


def test_unsharp_plus_blur_is_twice_input():
    arr = np.random.default_rng(4).normal(size=(2, 6, 5, 7))
    total = unsharp_mask(arr, 0.8, clamp=False) + gaussian_blur(arr, 0.8)
    assert np.max(np.abs(total - 2 * arr)) < 1e-6


def test_axial_profile():
    arr = np.array([0.0, 4.0, 8.0, 12.0]).reshape(1, 1, 4)
    assert axial_mean(arr, 2).ravel().tolist() == [2.0, 6.0, 10.0, 12.0]


@pytest.mark.parametrize("sz", [2, 3, 4])
def test_axial_matches_brute_force(sz):
    arr = np.random.default_rng(sz).normal(size=(4, 3, 9))
    assert np.max(np.abs(axial_mean(arr, sz) - axial_window_mean(arr, sz))) < 1e-6


def test_axial_rejects_other_sizes():
    with pytest.raises(ValueError):
        axial_mean(np.zeros((2, 2, 2)), 5)


def test_volume_in_volume_out():
    vol = Volume(np.random.default_rng(0).normal(size=(2, 4, 4, 4)), spacing=(1.0, 1.0, 2.0))
    out = gaussian_blur(vol, 1.0)
    assert isinstance(out, Volume) and out.spacing == vol.spacing
    assert np.allclose(out.data[1], gaussian_blur(vol.data[1].astype(np.float64), 1.0), atol=1e-6)


def test_alteration_validation():
    with pytest.raises(ValueError):
        Alteration(BLUR, sigma=2.0)
    with pytest.raises(ValueError):
        Alteration(AXIAL_MEAN, sz=5)
    with pytest.raises(ValueError):
        Alteration("rotate")


def test_policy_pure_blur():
    policy = IqdaPolicy((1, 0, 0, 0), seed=0)
    for _ in range(200):
        alt = policy.sample()
        assert alt.kind == BLUR and 0.5 <= alt.sigma <= 1.75


def test_policy_frequencies():
    policy = IqdaPolicy(seed=123)
    counts = Counter(policy.sample().kind for _ in range(30000))
    assert set(counts) == {BLUR, SHARPEN, AXIAL_MEAN}
    for kind in (BLUR, SHARPEN, AXIAL_MEAN):
        assert abs(counts[kind] / 30000 - 1 / 3) < 0.02


def test_policy_deterministic_and_identity_share():
    p1, p2 = IqdaPolicy(seed=5), IqdaPolicy(seed=5)
    assert [p1.sample() for _ in range(50)] == [p2.sample() for _ in range(50)]
    p = IqdaPolicy.with_identity(0.4, seed=1)
    share = sum(p.sample().kind == IDENTITY for _ in range(5000)) / 5000
    assert abs(share - 0.4) < 0.03
    with pytest.raises(ValueError):
        IqdaPolicy((0.5, 0.5, 0.5, 0.0))


def test_apply_keeps_labels():
    rng = np.random.default_rng(3)
    vol = Volume(rng.normal(size=(2, 5, 5, 5)))
    lab = LabelMap((rng.random((5, 5, 5)) > 0.5).astype(np.uint8))
    img, out_lab = apply_iqda(vol, lab, Alteration(IDENTITY))
    assert img == vol and out_lab == lab
    img, out_lab = apply_iqda(vol, lab, Alteration(BLUR, sigma=1.0))
    assert img == gaussian_blur(vol, 1.0) and out_lab == lab
    _, out_lab = apply_iqda(vol, lab, Alteration(AXIAL_MEAN, sz=4))
    assert out_lab == lab
