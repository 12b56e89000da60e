"""Patch localization: average prompted-vs-unprompted one-step prediction
differences over several noise draws, then binarize.

Both predictions of a pair share the same noisy instance so the difference
isolates the conditioning; each repetition draws fresh noise.
"""
from __future__ import annotations

import numpy as np

from .core import DefenseConfig, ParamError, RngStream, ratio_to_step, save_image_png
from .diffusion import Conditioning, DenoiserModel, forward_noise, predict_x0_one_step


def aap_difference(
    x_adv: np.ndarray,
    cfg: DefenseConfig,
    prompt_L: Conditioning,
    model: DenoiserModel,
    sched,
    rng: RngStream,
    rep: int,
) -> np.ndarray:
    """One repetition of the anomaly map: per-pixel channel-mean |prompted - unprompted|."""
    t = ratio_to_step(cfg.t_star, sched)
    noisy = forward_noise(x_adv, t, sched, rng.child("noise", rep))
    pred_prompted = predict_x0_one_step(noisy, t, prompt_L, model)
    pred_plain = predict_x0_one_step(noisy, t, Conditioning.empty(), model)
    return np.abs(pred_prompted - pred_plain).mean(axis=2)


def estimate_soft_mask(
    x_adv: np.ndarray,
    cfg: DefenseConfig,
    prompt_L: Conditioning,
    model: DenoiserModel,
    sched,
    rng: RngStream,
    capture: list | None = None,
) -> np.ndarray:
    """Mean of cfg.reps anomaly maps, rescaled to [0, 1] by its maximum.

    A zero-max map passes through as zeros. `capture`, when given, collects
    the per-repetition maps (instrumentation hook).
    """
    maps = [
        aap_difference(x_adv, cfg, prompt_L, model, sched, rng, rep)
        for rep in range(cfg.reps)
    ]
    if capture is not None:
        capture.extend(maps)
    soft = np.mean(maps, axis=0)
    peak = soft.max()
    if peak > 0.0:
        soft = soft / peak
    return soft


def binarize(soft: np.ndarray, tau: float) -> np.ndarray:
    """Threshold at tau with >= convention; returns a {0, 1} float array."""
    if not (0.0 < tau < 1.0):
        raise ParamError(f"tau must be in (0, 1), got {tau}")
    return (np.asarray(soft, dtype=np.float64) >= tau).astype(np.float64)


def dump_difference_maps(maps, out_dir, prefix="aap_rep") -> list:
    """Debug output: write per-repetition difference maps as grayscale heatmaps."""
    import os

    paths = []
    os.makedirs(out_dir, exist_ok=True)
    for i, m in enumerate(maps):
        peak = m.max()
        norm = m / peak if peak > 0 else m
        path = os.path.join(out_dir, f"{prefix}{i}.png")
        save_image_png(path, norm[:, :, None])
        paths.append(path)
    return paths
