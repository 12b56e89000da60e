import numpy as np
import pytest
import torch

from patchward.core import DefenseConfig, RngStream, make_schedule
from patchward.data import make_toy_dataset
from patchward.diffusion import CondShiftDenoiser, Conditioning, ZeroDenoiser
from patchward.pipeline import DefensePipeline, IdentityDefense, differentiable_defense
from patchward.prompt_tuning import init_prompt
from patchward.toy_model import DenoiserTrainConfig, train_toy_denoiser


@pytest.fixture(scope="module")
def small_model():
    images, labels, names = make_toy_dataset(16, size=16, seed=0)
    cfg = DenoiserTrainConfig(epochs=2, batch_size=8, T=100, base=8, d_cond=8, seed=0)
    return train_toy_denoiser(images, labels, names, cfg)


def prompts_for(model):
    pl = init_prompt(["adversarial"], model, role="localization", rng=RngStream(0, "L"))
    pr = init_prompt(["clean"], model, role="restoration", rng=RngStream(0, "R"))
    return pl, pr


class TestDefensePipeline:
    def test_blind_model_returns_input(self):
        sched = make_schedule(100, 1e-4, 0.02)
        model = ZeroDenoiser(sched)
        cfg = DefenseConfig(reps=1, inpaint_steps=2)
        pipe = DefensePipeline(model, cfg, Conditioning.empty(), Conditioning.empty())
        x = np.random.default_rng(0).uniform(size=(12, 12, 3))
        res = pipe.defend(x, RngStream(1))
        assert not res.patch_found
        assert np.array_equal(res.image, x)

    def test_deterministic(self, small_model):
        pl, pr = prompts_for(small_model)
        cfg = DefenseConfig(reps=2, inpaint_steps=3)
        pipe = DefensePipeline(small_model, cfg, pl, pr)
        x = np.random.default_rng(1).uniform(size=(16, 16, 3))
        a = pipe.defend(x, RngStream(2, "d"))
        b = pipe.defend(x, RngStream(2, "d"))
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    def test_zero_fill_mode(self, small_model):
        pl, pr = prompts_for(small_model)
        cfg = DefenseConfig(reps=1, inpaint_steps=2)
        pipe = DefensePipeline(small_model, cfg, pl, pr, restore_mode="zero_fill")
        x = np.random.default_rng(2).uniform(size=(16, 16, 3))
        res = pipe.defend(x, RngStream(3))
        if res.patch_found:
            assert np.all(res.image[res.mask > 0.5] == 0.0)
        assert pipe.name == "patchward_zero_fill"

    def test_unmasked_region_preserved(self, small_model):
        pl, pr = prompts_for(small_model)
        cfg = DefenseConfig(reps=1, inpaint_steps=3)
        pipe = DefensePipeline(small_model, cfg, pl, pr)
        x = np.random.default_rng(3).uniform(size=(16, 16, 3))
        res = pipe.defend(x, RngStream(4))
        outside = res.mask < 0.5
        assert np.array_equal(res.image[outside], x[outside])


class TestBpdaBridge:
    def test_forward_value_equals_true_defense(self, small_model):
        pl, pr = prompts_for(small_model)
        cfg = DefenseConfig(reps=1, inpaint_steps=2)
        pipe = DefensePipeline(small_model, cfg, pl, pr)
        x = np.random.default_rng(4).uniform(size=(16, 16, 3))
        rng = RngStream(5, "b")
        out = pipe.bpda_forward(torch.as_tensor(x, dtype=torch.float32), rng)
        true = pipe.defend(x, RngStream(5, "b").child("true")).image
        assert np.allclose(out.detach().numpy(), true, atol=1e-6)

    def test_gradient_reaches_input(self, small_model):
        pl, pr = prompts_for(small_model)
        cfg = DefenseConfig(reps=1, inpaint_steps=2)
        pipe = DefensePipeline(small_model, cfg, pl, pr)
        x = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(0), requires_grad=True)
        out = pipe.bpda_forward(x, RngStream(6))
        out.sum().backward()
        assert x.grad is not None
        assert torch.isfinite(x.grad).all()
        assert x.grad.abs().sum() > 0

    def test_identity_defense_bridge(self):
        d = IdentityDefense()
        x = torch.rand(8, 8, 3, generator=torch.Generator().manual_seed(1))
        assert torch.equal(d.bpda_forward(x, RngStream(0)), x)


class TestDifferentiableDefense:
    def test_gradients_reach_both_prompts(self, small_model):
        cfg = DefenseConfig(reps=1, inpaint_steps=2)
        x = np.random.default_rng(5).uniform(size=(16, 16, 3))
        vec_L = torch.randn(4, small_model.d_cond, generator=torch.Generator().manual_seed(2), requires_grad=True)
        vec_R = torch.randn(4, small_model.d_cond, generator=torch.Generator().manual_seed(3), requires_grad=True)
        soft, mask, restored = differentiable_defense(
            x, vec_L, vec_R, small_model, cfg, RngStream(7), inpaint_steps=2, reps=1
        )
        loss = soft.sum() + restored.sum()
        g_L, g_R = torch.autograd.grad(loss, [vec_L, vec_R], allow_unused=True)
        assert g_L is not None and g_L.abs().sum() > 0
        assert g_R is not None and g_R.abs().sum() > 0

    def test_mask_is_binary_in_forward(self, small_model):
        cfg = DefenseConfig(reps=1, inpaint_steps=2)
        x = np.random.default_rng(6).uniform(size=(16, 16, 3))
        vec_L = torch.randn(4, small_model.d_cond, generator=torch.Generator().manual_seed(4))
        _soft, mask, _restored = differentiable_defense(
            x, vec_L, None, small_model, cfg, RngStream(8), inpaint_steps=1, reps=1
        )
        vals = set(np.unique(mask.detach().numpy()))
        assert vals <= {0.0, 1.0}

    def test_matches_numpy_localization_scale(self):
        # conditioning-sensitive oracle: torch soft mask equals numpy soft mask
        sched = make_schedule(1000, 1e-4, 0.02)
        from patchward.core import ratio_to_step
        from patchward.localization import estimate_soft_mask

        t = ratio_to_step(0.5, sched)
        ab = sched.alpha_bar[t]
        c = 0.2 * np.sqrt(ab) / np.sqrt(1.0 - ab)
        model = CondShiftDenoiser(sched, shift=np.array([c, 0.0, 0.0]))
        cfg = DefenseConfig(t_star=0.5, reps=1, inpaint_steps=1)
        x = np.full((8, 8, 3), 0.5)
        vec = torch.zeros(2, 4, dtype=torch.float64)
        soft_t, _m, _r = differentiable_defense(
            x, vec, None, model, cfg, RngStream(9), inpaint_steps=1, reps=1
        )
        soft_np = estimate_soft_mask(
            x, cfg, Conditioning.from_vectors(np.zeros((2, 4))), model, sched, RngStream(9)
        )
        assert np.allclose(soft_t.detach().numpy(), soft_np, atol=1e-5)
