"""Restore the localized region with the mask-conditioned inpainting sampler."""
from __future__ import annotations

import numpy as np

from .core import DefenseConfig, RngStream, ShapeError, validate_image
from .diffusion import Conditioning, DenoiserModel, inpaint
from .mask_refine import gaussian_smooth


def restore(
    x_adv: np.ndarray,
    mask: np.ndarray,
    prompt_R: Conditioning,
    model: DenoiserModel,
    cfg: DefenseConfig,
    rng: RngStream,
) -> np.ndarray:
    """Regenerate the masked region under prompt_R; untouched outside the mask.

    With feather_sigma=0 (default) the unmasked pixels are bit-equal to the
    input; an all-zero mask returns the input unchanged.
    """
    validate_image(x_adv)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x_adv.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} != image dims {x_adv.shape[:2]}")
    if not mask.any():
        return np.array(x_adv, copy=True)
    restored = inpaint(x_adv, mask, prompt_R, model, cfg.inpaint_steps, rng)
    if cfg.feather_sigma > 0:
        weight = np.clip(gaussian_smooth(mask, cfg.feather_sigma), 0.0, 1.0)
        weight = np.maximum(weight, mask)[:, :, None]
        restored = weight * restored + (1.0 - weight) * x_adv
    return restored


def zero_fill(x_adv: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Ablation restore: blank the masked region instead of regenerating it."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x_adv.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} != image dims {x_adv.shape[:2]}")
    return np.where(mask[:, :, None] > 0.5, 0.0, x_adv)
