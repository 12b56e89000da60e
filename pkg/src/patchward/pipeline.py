"""End-to-end defense pipeline: localize -> refine -> restore.

Alongside the plain numpy inference path there is a differentiable torch
path (used by prompt tuning) and a BPDA bridge (true defense in the
forward pass, differentiable surrogate in the backward pass) used by the
adaptive attack.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import DefenseConfig, RngStream, ratio_to_step
from .diffusion import Conditioning, from_pm, inpaint_pm, predict_x0_pm, to_pm
from .localization import estimate_soft_mask
from .mask_refine import refine
from .restoration import restore, zero_fill


@dataclass
class DefenseResult:
    image: np.ndarray
    mask: np.ndarray
    soft: np.ndarray
    patch_found: bool


def _cond_from(prompt) -> Conditioning:
    if isinstance(prompt, Conditioning):
        return prompt
    return prompt.conditioning()  # PromptEmbedding


class DefensePipeline:
    """Full defense: anomaly-difference localization, mask refinement and
    mask-conditioned restoration under two prompts.

    restore_mode: "inpaint" (default), "zero_fill" (ablation), or "none".
    """

    def __init__(
        self,
        model,
        cfg: DefenseConfig,
        prompt_L,
        prompt_R,
        restore_mode: str = "inpaint",
        name: str | None = None,
    ):
        if restore_mode not in ("inpaint", "zero_fill", "none"):
            raise ValueError(f"unknown restore_mode: {restore_mode}")
        self.model = model
        self.cfg = cfg
        self.prompt_L = _cond_from(prompt_L)
        self.prompt_R = _cond_from(prompt_R)
        self.restore_mode = restore_mode
        self.name = name or ("patchward" if restore_mode == "inpaint" else f"patchward_{restore_mode}")

    def localize(self, x: np.ndarray, rng: RngStream, capture=None):
        soft = estimate_soft_mask(
            x, self.cfg, self.prompt_L, self.model, self.model.schedule, rng, capture=capture
        )
        mask = refine(soft, self.cfg)
        return soft, mask

    def defend(self, x: np.ndarray, rng: RngStream) -> DefenseResult:
        soft, mask = self.localize(x, rng.child("localize"))
        patch_found = bool(mask.any())
        if self.restore_mode == "none" or not patch_found:
            out = np.array(x, copy=True)
        elif self.restore_mode == "zero_fill":
            out = zero_fill(x, mask)
        else:
            out = restore(x, mask, self.prompt_R, self.model, self.cfg, rng.child("restore"))
        return DefenseResult(image=out, mask=mask, soft=soft, patch_found=patch_found)

    def __call__(self, x: np.ndarray, rng: RngStream) -> np.ndarray:
        return self.defend(x, rng).image

    # -- adaptive-attack bridge -------------------------------------------

    def _prompt_tensor(self, cond: Conditioning, dtype):
        if cond.is_empty:
            return None
        v = cond.vectors
        if not torch.is_tensor(v):
            v = torch.as_tensor(np.asarray(v), dtype=dtype)
        return v.to(dtype)

    def bpda_forward(self, x: torch.Tensor, rng: RngStream) -> torch.Tensor:
        """Forward pass = true defense; backward pass = gradients of the
        differentiable surrogate (straight-through refine, single-step
        posterior-mean restoration)."""
        vec_L = self._prompt_tensor(self.prompt_L, x.dtype)
        vec_R = self._prompt_tensor(self.prompt_R, x.dtype)
        _soft, mask_t, restored_diff = differentiable_defense(
            x,
            vec_L,
            vec_R,
            self.model,
            self.cfg,
            rng.child("surrogate"),
            inpaint_steps=1,
            reps=1,
        )
        if self.restore_mode == "zero_fill":
            restored_diff = (1.0 - mask_t[:, :, None]) * x
        elif self.restore_mode == "none":
            restored_diff = x

        x_np = np.clip(x.detach().numpy().astype(np.float64), 0.0, 1.0)
        true_out = self.defend(x_np, rng.child("true")).image
        true_t = torch.as_tensor(true_out, dtype=x.dtype)
        return restored_diff + (true_t - restored_diff).detach()


class IdentityDefense:
    """No-op defense used for undefended baselines and degenerate tests."""

    name = "undefended"

    def defend(self, x: np.ndarray, rng: RngStream) -> DefenseResult:
        h, w = x.shape[:2]
        zero = np.zeros((h, w), dtype=np.float64)
        return DefenseResult(image=np.array(x, copy=True), mask=zero, soft=zero, patch_found=False)

    def __call__(self, x: np.ndarray, rng: RngStream) -> np.ndarray:
        return np.array(x, copy=True)

    def bpda_forward(self, x: torch.Tensor, rng: RngStream) -> torch.Tensor:
        return x


# ---------------------------------------------------------------------------
# Differentiable path
# ---------------------------------------------------------------------------

def differentiable_defense(
    x_adv,
    vec_L: torch.Tensor | None,
    vec_R: torch.Tensor | None,
    model,
    cfg: DefenseConfig,
    rng: RngStream,
    inpaint_steps: int,
    reps: int = 1,
):
    """Torch twin of the defense with gradients flowing to both prompts.

    The hard refinement is computed by the real (non-differentiable)
    refine on detached values and bridged straight-through, so its
    backward Jacobian is the identity w.r.t. the soft mask.

    Returns (soft (H, W), mask_ste (H, W), restored (H, W, C) in [0, 1])
    as torch tensors.
    """
    if torch.is_tensor(x_adv):
        x_t = x_adv.to(torch.float32)
    else:
        x_t = torch.as_tensor(np.asarray(x_adv), dtype=torch.float32)
    z_adv = to_pm(x_t).permute(2, 0, 1)[None]  # (1, C, H, W)

    sched = model.schedule
    t = ratio_to_step(cfg.t_star, sched)
    ab = float(sched.alpha_bar[t])
    cond_L = Conditioning.empty() if vec_L is None else Conditioning.from_vectors(vec_L)
    cond_R = Conditioning.empty() if vec_R is None else Conditioning.from_vectors(vec_R)

    diffs = []
    h, w, c = x_t.shape
    for rep in range(reps):
        # same (H, W, C) draw layout as the numpy localization path, so both
        # paths see identical noise for identical streams
        eps_hwc = rng.child("noise", rep).normal((h, w, c))
        eps = torch.as_tensor(eps_hwc, dtype=z_adv.dtype).permute(2, 0, 1)[None]
        z_t = np.sqrt(ab) * z_adv + np.sqrt(1.0 - ab) * eps
        pred_a = from_pm(predict_x0_pm(z_t, t, cond_L, model))
        pred_b = from_pm(predict_x0_pm(z_t, t, Conditioning.empty(), model))
        diffs.append((pred_a - pred_b).abs().mean(dim=1)[0])  # (H, W)
    soft = torch.stack(diffs).mean(dim=0)
    peak = soft.max()
    if float(peak.detach()) > 0.0:
        soft = soft / peak

    hard = torch.as_tensor(
        refine(soft.detach().numpy().astype(np.float64), cfg), dtype=soft.dtype
    )
    mask_ste = soft + (hard - soft).detach()

    mask_b = mask_ste[None, None]
    z0 = inpaint_pm(z_adv, mask_b, cond_R, model, inpaint_steps, rng.child("inpaint"))
    restored_pm = mask_b * z0 + (1.0 - mask_b) * z_adv
    restored = from_pm(restored_pm)[0].permute(1, 2, 0)
    return soft, mask_ste, restored
