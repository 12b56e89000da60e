"""Synthetic shape dataset for desk-scale experiments.

Four classes of a single colored shape over a smooth gradient background:
box, disk, cross, stripes. Images are low-frequency on purpose so that
optimized adversarial patches sit far outside the training distribution.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import RngStream

CLASS_NAMES = ("box", "disk", "cross", "stripes")


def _background(h, w, gen) -> np.ndarray:
    top = gen.uniform(0.25, 0.75, size=3)
    bottom = gen.uniform(0.25, 0.75, size=3)
    ramp = np.linspace(0.0, 1.0, h)[:, None, None]
    grad = (1.0 - ramp) * top[None, None, :] + ramp * bottom[None, None, :]
    return np.broadcast_to(grad, (h, w, 3)).copy()


def _shape_mask(label: int, h, w, gen) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    cy = int(gen.integers(h // 3, 2 * h // 3))
    cx = int(gen.integers(w // 3, 2 * w // 3))
    if label == 0:  # box
        half = int(gen.integers(h // 6, h // 3))
        mask[max(cy - half, 0) : cy + half, max(cx - half, 0) : cx + half] = True
    elif label == 1:  # disk
        r = int(gen.integers(h // 6, h // 3))
        yy, xx = np.ogrid[:h, :w]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    elif label == 2:  # cross
        arm = int(gen.integers(h // 4, int(h / 2.2)))
        thick = max(h // 12, 2)
        mask[max(cy - arm, 0) : cy + arm, max(cx - thick, 0) : cx + thick] = True
        mask[max(cy - thick, 0) : cy + thick, max(cx - arm, 0) : cx + arm] = True
    else:  # stripes
        period = int(gen.integers(max(h // 5, 4), max(h // 3, 6)))
        phase = int(gen.integers(0, period))
        rows = (np.arange(h) + phase) % period < period // 2
        mask[rows, :] = True
    return mask


def make_toy_dataset(n: int, size: int = 32, seed: int = 0):
    """Generate n labeled shape images.

    Returns (images (n, size, size, 3) float64 in [0, 1], labels (n,) int64,
    class_names).
    """
    gen = RngStream(seed, "toy-data").np
    images = np.zeros((n, size, size, 3), dtype=np.float64)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        label = i % len(CLASS_NAMES)
        img = _background(size, size, gen)
        mask = _shape_mask(label, size, size, gen)
        bg_mean = img[~mask].mean(axis=0) if (~mask).any() else np.full(3, 0.5)
        while True:
            color = gen.uniform(0.05, 0.95, size=3)
            if np.abs(color - bg_mean).sum() > 0.8:
                break
        img[mask] = color
        # soften edges so the data stays low-frequency
        for c in range(3):
            img[:, :, c] = ndimage.gaussian_filter(img[:, :, c], sigma=0.6, mode="reflect")
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = label
    return images, labels, CLASS_NAMES
