import numpy as np
import pytest

from patchward.core import DefenseConfig, RngStream, make_schedule, ratio_to_step
from patchward.diffusion import CondShiftDenoiser, Conditioning, ZeroDenoiser
from patchward.localization import aap_difference, estimate_soft_mask


@pytest.fixture
def sched():
    return make_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def cfg():
    return DefenseConfig(t_star=0.01, reps=3)  # small ratio keeps preds unclamped


@pytest.fixture
def image():
    return np.full((8, 8, 3), 0.5)


def prompt_stub():
    return Conditioning.from_vectors(np.zeros((2, 4)))


class TestAapDifference:
    def test_conditioning_blind_model_gives_zeros(self, sched, cfg, image):
        model = ZeroDenoiser(sched)  # ignores conditioning entirely
        diff = aap_difference(image, cfg, prompt_stub(), model, sched, RngStream(0), 0)
        assert diff.shape == (8, 8)
        assert np.allclose(diff, 0.0, atol=1e-12)

    def test_constant_channel_offset(self, sched, cfg, image):
        # conditioned prediction shifted by exactly 0.2 on channel 0
        t = ratio_to_step(cfg.t_star, sched)
        ab = sched.alpha_bar[t]
        # pm-space shift of 0.4 <=> 0.2 in pixel scale
        c = 0.4 * np.sqrt(ab) / np.sqrt(1.0 - ab)
        model = CondShiftDenoiser(sched, shift=np.array([c, 0.0, 0.0]))
        diff = aap_difference(image, cfg, prompt_stub(), model, sched, RngStream(1), 0)
        assert np.allclose(diff, 0.2 / 3.0, atol=1e-9)

    def test_same_noise_within_pair(self, sched, cfg, image):
        # with a conditioning-blind model the two branches see the same noisy
        # instance, so the difference is exactly zero (not merely small)
        model = ZeroDenoiser(sched)
        diff = aap_difference(image, cfg, prompt_stub(), model, sched, RngStream(2), 5)
        assert np.array_equal(diff, np.zeros_like(diff))

    def test_fresh_noise_across_repetitions(self, sched, image):
        cfg = DefenseConfig(t_star=0.5, reps=2)
        model = ZeroDenoiser(sched)
        rng = RngStream(3)
        # repetition index changes the drawn noise; probe via the noisy input
        # by checking aap under a model that echoes the input difference
        from patchward.diffusion import forward_noise

        t = ratio_to_step(0.5, sched)
        n0 = forward_noise(image, t, sched, rng.child("noise", 0))
        n1 = forward_noise(image, t, sched, rng.child("noise", 1))
        assert not np.array_equal(n0, n1)


class TestEstimateSoftMask:
    def test_m1_equals_single_difference_rescaled(self, sched, image):
        cfg = DefenseConfig(t_star=0.01, reps=1)
        t = ratio_to_step(cfg.t_star, sched)
        ab = sched.alpha_bar[t]
        c = 0.3 * np.sqrt(ab) / np.sqrt(1.0 - ab)
        model = CondShiftDenoiser(sched, shift=np.array([c, 0.0, 0.0]))
        rng = RngStream(4)
        single = aap_difference(image, cfg, prompt_stub(), model, sched, rng, 0)
        soft = estimate_soft_mask(image, cfg, prompt_stub(), model, sched, RngStream(4))
        peak = single.max()
        assert np.allclose(soft, single / peak, atol=1e-12)

    def test_mean_of_captured_repetitions(self, sched, image):
        cfg = DefenseConfig(t_star=0.5, reps=3)
        t = ratio_to_step(0.5, sched)
        ab = sched.alpha_bar[t]
        c = 0.2 * np.sqrt(ab) / np.sqrt(1.0 - ab)
        model = CondShiftDenoiser(sched, shift=np.array([c, c, 0.0]))
        capture = []
        soft = estimate_soft_mask(
            image, cfg, prompt_stub(), model, sched, RngStream(5), capture=capture
        )
        assert len(capture) == 3
        # brute-force average oracle over the stored per-repetition maps
        mean = sum(capture) / 3.0
        peak = mean.max()
        expected = mean / peak if peak > 0 else mean
        assert np.allclose(soft, expected, atol=1e-12)

    def test_all_zero_repetitions_no_nan(self, sched, image):
        cfg = DefenseConfig(reps=2)
        model = ZeroDenoiser(sched)
        soft = estimate_soft_mask(image, cfg, prompt_stub(), model, sched, RngStream(6))
        assert np.array_equal(soft, np.zeros_like(soft))
        assert np.all(np.isfinite(soft))

    def test_output_in_unit_range(self, sched, image):
        cfg = DefenseConfig(t_star=0.3, reps=2)
        t = ratio_to_step(0.3, sched)
        ab = sched.alpha_bar[t]
        c = 0.1 * np.sqrt(ab) / np.sqrt(1.0 - ab)
        model = CondShiftDenoiser(sched, shift=np.array([c, 0.0, c]))
        soft = estimate_soft_mask(image, cfg, prompt_stub(), model, sched, RngStream(7))
        assert soft.min() >= 0.0 and soft.max() <= 1.0
