"""Mask refinement: binarize, Gaussian smoothing, despeckle and dilation.

Fixed order: binarize -> smooth -> re-binarize -> drop small components ->
dilate. Dilation last means the final mask may extend slightly past the
true patch border, which helps the restoration blend in.
"""
from __future__ import annotations

import logging
import math

import numpy as np
from scipy import ndimage

from .core import DefenseConfig, ParamError, save_image_png
from .localization import binarize

logger = logging.getLogger(__name__)

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian kernel with radius ceil(3 * sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g1 = np.exp(-(ax**2) / (2.0 * sigma**2))
    kernel = np.outer(g1, g1)
    return kernel / kernel.sum()


def gaussian_smooth(mask: np.ndarray, sigma: float) -> np.ndarray:
    """Convolve with a normalized Gaussian, reflect padding; sigma=0 is identity."""
    if sigma < 0:
        raise ParamError(f"sigma must be >= 0, got {sigma}")
    mask = np.asarray(mask, dtype=np.float64)
    if sigma == 0:
        return mask.copy()
    return ndimage.convolve(mask, gaussian_kernel(sigma), mode="reflect")


def disk_element(radius: int) -> np.ndarray:
    """Disk structuring element: offsets with di^2 + dj^2 <= radius^2."""
    if radius < 0:
        raise ParamError(f"radius must be >= 0, got {radius}")
    ax = np.arange(-radius, radius + 1)
    return (ax[:, None] ** 2 + ax[None, :] ** 2) <= radius**2


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological dilation with a disk element; radius=0 is identity."""
    mask = np.asarray(mask, dtype=np.float64)
    if radius == 0:
        return mask.copy()
    grown = ndimage.binary_dilation(mask > 0.5, structure=disk_element(radius))
    return grown.astype(np.float64)


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    """Drop 8-connected components with fewer than min_area pixels."""
    mask = np.asarray(mask, dtype=np.float64)
    if min_area <= 1:
        return mask.copy()
    labels, n = ndimage.label(mask > 0.5, structure=_EIGHT_CONNECTED)
    if n == 0:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels].astype(np.float64)


def refine(
    raw: np.ndarray, cfg: DefenseConfig, stages: dict | None = None
) -> np.ndarray:
    """Turn a soft anomaly map into the final patch mask.

    Deterministic; an all-zero result is returned as-is with a logged
    warning (no patch found). `stages`, when given, collects the
    intermediate masks for debugging dumps.
    """
    raw = np.asarray(raw, dtype=np.float64)
    h, w = raw.shape
    min_area = max(1, int(round(cfg.min_area_frac * h * w)))

    initial = binarize(raw, cfg.tau_bin)
    smoothed = gaussian_smooth(initial, cfg.sigma_smooth)
    rebinarized = binarize(smoothed, cfg.tau_bin)
    despeckled = remove_small_components(rebinarized, min_area)
    final = dilate(despeckled, cfg.dilate_radius)

    if stages is not None:
        stages.update(
            initial=initial,
            smoothed=smoothed,
            rebinarized=rebinarized,
            despeckled=despeckled,
            final=final,
        )
    if not final.any():
        logger.warning("refine: empty mask, no patch region found")
    return final


def dump_refine_stages(stages: dict, out_dir, prefix="refine_") -> list:
    """Write each refinement stage as a PNG."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, arr in stages.items():
        path = os.path.join(out_dir, f"{prefix}{name}.png")
        save_image_png(path, np.asarray(arr, dtype=np.float64)[:, :, None])
        paths.append(path)
    return paths
