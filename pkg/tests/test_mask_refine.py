import math

import numpy as np
import pytest

from patchward.core import DefenseConfig, ParamError
from patchward.localization import binarize
from patchward.mask_refine import (
    dilate,
    disk_element,
    gaussian_kernel,
    gaussian_smooth,
    refine,
    remove_small_components,
)


# -- independent oracles -----------------------------------------------------

def brute_smooth(mask, sigma):
    """Reference Gaussian smoothing: explicit loops with reflect padding."""
    radius = math.ceil(3 * sigma)
    ax = np.arange(-radius, radius + 1, dtype=float)
    k1 = np.exp(-(ax**2) / (2 * sigma**2))
    kernel = np.outer(k1, k1)
    kernel /= kernel.sum()
    h, w = mask.shape
    # edge-repeating reflection (numpy calls it "symmetric")
    padded = np.pad(mask, radius, mode="symmetric")
    out = np.zeros_like(mask, dtype=float)
    for i in range(h):
        for j in range(w):
            out[i, j] = (padded[i : i + 2 * radius + 1, j : j + 2 * radius + 1] * kernel).sum()
    return out


def brute_dilate(mask, radius):
    """Reference dilation: enumerate disk offsets."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    offsets = [
        (di, dj)
        for di in range(-radius, radius + 1)
        for dj in range(-radius, radius + 1)
        if di * di + dj * dj <= radius * radius
    ]
    for i in range(h):
        for j in range(w):
            if mask[i, j] > 0.5:
                for di, dj in offsets:
                    if 0 <= i + di < h and 0 <= j + dj < w:
                        out[i + di, j + dj] = 1.0
    return out


class TestGaussianSmooth:
    def test_sigma_zero_identity(self):
        m = np.random.default_rng(0).uniform(size=(10, 10))
        assert np.array_equal(gaussian_smooth(m, 0.0), m)

    def test_impulse_center_weight(self):
        # analytic kernel: center weight of the normalized sigma=1 kernel
        m = np.zeros((15, 15))
        m[7, 7] = 1.0
        out = gaussian_smooth(m, 1.0)
        kern = gaussian_kernel(1.0)
        assert out[7, 7] == pytest.approx(kern[kern.shape[0] // 2, kern.shape[1] // 2])
        assert out.sum() == pytest.approx(1.0)  # interior impulse: mass preserved

    def test_all_ones_preserved(self):
        m = np.ones((12, 12))
        assert np.allclose(gaussian_smooth(m, 2.0), 1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        m = (rng.uniform(size=(9, 11)) > 0.6).astype(float)
        for sigma in (0.5, 1.0, 1.7):
            assert np.allclose(gaussian_smooth(m, sigma), brute_smooth(m, sigma), atol=1e-12)


class TestDilate:
    def test_radius_zero_identity(self):
        m = (np.random.default_rng(1).uniform(size=(8, 8)) > 0.5).astype(float)
        assert np.array_equal(dilate(m, 0), m)

    def test_single_pixel_plus_shape(self):
        # disk of radius 1 = 4-neighborhood + center
        m = np.zeros((9, 9))
        m[4, 4] = 1.0
        out = dilate(m, 1)
        expected = np.zeros((9, 9))
        for di, dj in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]:
            expected[4 + di, 4 + dj] = 1.0
        assert np.array_equal(out, expected)

    def test_all_ones(self):
        m = np.ones((6, 6))
        assert np.array_equal(dilate(m, 3), m)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        m = (rng.uniform(size=(12, 12)) > 0.8).astype(float)
        for radius in (1, 2, 3):
            assert np.array_equal(dilate(m, radius), brute_dilate(m, radius))

    def test_disk_element_radius2(self):
        el = disk_element(2)
        assert el.shape == (5, 5)
        assert el[2, 2] and el[0, 2] and el[2, 0]
        assert not el[0, 0]  # corner: 2^2 + 2^2 > 2^2


class TestProperties:
    """Property suite over seeded random masks (superset, monotonicity,
    threshold monotonicity, determinism, idempotence)."""

    CASES = 300

    def _random_masks(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(self.CASES):
            h = int(rng.integers(4, 20))
            w = int(rng.integers(4, 20))
            yield rng.uniform(size=(h, w))

    def test_dilate_superset_and_monotone(self):
        for soft in self._random_masks(11):
            m = (soft > 0.7).astype(float)
            d1 = dilate(m, 1)
            d2 = dilate(m, 2)
            assert np.all(d1 >= m)  # superset of input
            assert np.all(d2 >= d1)  # monotone in radius

    def test_binarize_threshold_monotone(self):
        for soft in self._random_masks(13):
            lo = binarize(soft, 0.3)
            hi = binarize(soft, 0.7)
            assert np.all(lo >= hi)  # higher threshold selects a subset

    def test_refine_deterministic(self):
        cfg = DefenseConfig(sigma_smooth=0.8, dilate_radius=1)
        for soft in self._random_masks(17):
            a = refine(soft, cfg)
            b = refine(soft, cfg)
            assert np.array_equal(a, b)

    def test_despeckle_idempotent(self):
        for soft in self._random_masks(19):
            m = (soft > 0.6).astype(float)
            once = remove_small_components(m, 4)
            twice = remove_small_components(once, 4)
            assert np.array_equal(once, twice)


class TestBinarize:
    def test_below_threshold(self):
        assert not binarize(np.full((4, 4), 0.4), 0.5).any()

    def test_tie_is_one(self):
        out = binarize(np.full((2, 2), 0.5), 0.5)
        assert np.all(out == 1.0)

    def test_idempotent_on_binary(self):
        rng = np.random.default_rng(2)
        s = rng.uniform(size=(6, 6))
        once = binarize(s, 0.5)
        assert np.array_equal(binarize(once, 0.5), once)

    def test_tau_out_of_range(self):
        with pytest.raises(ParamError):
            binarize(np.zeros((2, 2)), 0.0)
        with pytest.raises(ParamError):
            binarize(np.zeros((2, 2)), 1.0)


class TestRefine:
    def test_all_zero_passthrough(self):
        cfg = DefenseConfig()
        out = refine(np.zeros((16, 16)), cfg)
        assert not out.any()

    def test_blob_and_speckles_fixture(self):
        """16x16 case: a 6x6 blob survives and grows by ~r; isolated speckles die.

        Expected output computed with the independent brute-force oracles.
        """
        raw = np.zeros((16, 16))
        raw[5:11, 5:11] = 1.0  # solid blob, side 6
        raw[1, 1] = 1.0  # speckle
        raw[14, 2] = 1.0  # speckle
        cfg = DefenseConfig(tau_bin=0.5, sigma_smooth=1.0, dilate_radius=2)

        # oracle: binarize -> smooth -> binarize -> (despeckle) -> dilate
        initial = (raw >= 0.5).astype(float)
        smoothed = brute_smooth(initial, 1.0)
        rebinar = (smoothed >= 0.5).astype(float)
        expected = brute_dilate(rebinar, 2)  # speckles already die at re-binarize

        out = refine(raw, cfg)
        assert np.array_equal(out, expected)
        # speckles gone even before dilation could spread them
        assert out[1, 1] == 0.0 and out[14, 2] == 0.0
        # blob retained and enlarged by about the dilation radius per side
        assert np.all(out[5:11, 5:11] == 1.0)
        rows = np.where(out.any(axis=1))[0]
        assert rows.min() <= 4 and rows.max() >= 11

    def test_stage_capture(self):
        stages = {}
        refine(np.zeros((8, 8)), DefenseConfig(), stages=stages)
        assert set(stages) == {"initial", "smoothed", "rebinarized", "despeckled", "final"}

    def test_despeckle_drops_small_components(self):
        raw = np.zeros((40, 40))
        raw[5:15, 5:15] = 1.0  # 100 px blob
        raw[30, 30] = 1.0  # 1 px component
        cfg = DefenseConfig(sigma_smooth=0.0, dilate_radius=0, min_area_frac=0.002)
        out = refine(raw, cfg)  # min_area = round(0.002 * 1600) = 3
        assert out[10, 10] == 1.0
        assert out[30, 30] == 0.0
