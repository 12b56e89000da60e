"""Patch attacks: square patch at a random position, content optimized by
signed gradient ascent on the classifier's cross-entropy; the adaptive
variant differentiates through the defense via its BPDA bridge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import BoundsError, ParamError, RangeError, RngStream, ShapeError

DEFAULT_STEP_SIZE = 2.0 / 255.0


@dataclass
class PatchSpec:
    """Ground truth of one attack: square location, content and area fraction."""

    top_left: tuple[int, int]
    side: int
    content: np.ndarray  # (side, side, C)
    area_frac: float

    def __post_init__(self):
        if self.side < 1:
            raise ParamError(f"patch side must be >= 1, got {self.side}")
        self.content = np.asarray(self.content, dtype=np.float64)
        if self.content.shape[:2] != (self.side, self.side):
            raise ShapeError(
                f"content shape {self.content.shape} does not match side {self.side}"
            )
        if self.content.min() < 0.0 or self.content.max() > 1.0:
            raise RangeError("patch content must lie in [0, 1]")

    def check_bounds(self, h: int, w: int) -> None:
        r, c = self.top_left
        if r < 0 or c < 0 or r + self.side > h or c + self.side > w:
            raise BoundsError(
                f"patch at {self.top_left} side {self.side} exceeds {h}x{w} image"
            )

    def mask(self, h: int, w: int) -> np.ndarray:
        self.check_bounds(h, w)
        m = np.zeros((h, w), dtype=np.float64)
        r, c = self.top_left
        m[r : r + self.side, c : c + self.side] = 1.0
        return m

    @staticmethod
    def random(h: int, w: int, channels: int, area_frac: float, rng: RngStream) -> "PatchSpec":
        side = max(1, int(round(math.sqrt(area_frac * h * w))))
        if side > min(h, w):
            raise BoundsError(f"area_frac {area_frac} gives side {side} > image {h}x{w}")
        pos = rng.child("pos")
        top = int(pos.integers(0, h - side + 1))
        left = int(pos.integers(0, w - side + 1))
        content = rng.child("content").uniform(0.0, 1.0, size=(side, side, channels))
        return PatchSpec(
            top_left=(top, left), side=side, content=content, area_frac=side * side / (h * w)
        )


def apply_patch(x: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Paste the patch content; all pixels outside the square are bit-equal to x."""
    x = np.asarray(x, dtype=np.float64)
    spec.check_bounds(x.shape[0], x.shape[1])
    out = x.copy()
    r, c = spec.top_left
    out[r : r + spec.side, c : c + spec.side] = spec.content
    return out


def _optimize_patch(
    x: np.ndarray,
    y: int,
    clf,
    spec0: PatchSpec,
    iters: int,
    rng: RngStream,
    step_size: float,
    forward_fn,
    history: list | None = None,
):
    """Signed-gradient ascent on cross-entropy over the patch content,
    keeping the best (highest-loss) iterate seen."""
    h, w = x.shape[:2]
    r, c = spec0.top_left
    s = spec0.side
    x_t = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    y_t = torch.tensor([int(y)])
    content = torch.as_tensor(spec0.content, dtype=torch.float32)

    def eval_loss(cont, it, need_grad):
        cont = cont.clone().requires_grad_(need_grad)
        x_p = x_t.clone()
        x_p[r : r + s, c : c + s] = cont
        out = forward_fn(x_p, it)
        loss = F.cross_entropy(clf.logits_t(out), y_t)
        grad = torch.autograd.grad(loss, cont)[0] if need_grad else None
        return loss.detach(), grad

    best_loss = -float("inf")
    best_content = content.clone()
    for it in range(iters):
        loss, grad = eval_loss(content, it, need_grad=True)
        if float(loss) > best_loss:
            best_loss = float(loss)
            best_content = content.clone()
        if history is not None:
            history.append(best_loss)
        with torch.no_grad():
            content = (content + step_size * grad.sign()).clamp(0.0, 1.0)
    if iters > 0:
        loss, _ = eval_loss(content, iters, need_grad=False)
        if float(loss) > best_loss:
            best_loss = float(loss)
            best_content = content.clone()
        if history is not None:
            history.append(best_loss)

    spec = PatchSpec(
        top_left=spec0.top_left,
        side=s,
        content=best_content.numpy().astype(np.float64),
        area_frac=spec0.area_frac,
    )
    return spec, apply_patch(x, spec)


def patch_attack(
    x: np.ndarray,
    y: int,
    clf,
    area_frac: float,
    iters: int,
    rng: RngStream,
    step_size: float = DEFAULT_STEP_SIZE,
    history: list | None = None,
):
    """Untargeted patch attack against the bare classifier.

    Position is sampled once and kept fixed; with iters=0 the content stays
    random (classifier-independent). Returns (PatchSpec, patched image).
    """
    spec0 = PatchSpec.random(x.shape[0], x.shape[1], x.shape[2], area_frac, rng)
    if iters == 0:
        return spec0, apply_patch(x, spec0)
    return _optimize_patch(
        x, y, clf, spec0, iters, rng, step_size, forward_fn=lambda xp, it: xp, history=history
    )


def bpda_adaptive_attack(
    x: np.ndarray,
    y: int,
    clf,
    defense,
    iters: int,
    rng: RngStream,
    area_frac: float = 0.05,
    step_size: float = DEFAULT_STEP_SIZE,
    history: list | None = None,
) -> np.ndarray:
    """Adaptive patch attack: each iteration runs the full defense forward and
    differentiates through the defense's BPDA bridge (straight-through
    thresholds, single-step restoration surrogate)."""
    spec0 = PatchSpec.random(x.shape[0], x.shape[1], x.shape[2], area_frac, rng)
    if iters == 0:
        return apply_patch(x, spec0)
    _spec, patched = _optimize_patch(
        x,
        y,
        clf,
        spec0,
        iters,
        rng,
        step_size,
        forward_fn=lambda xp, it: defense.bpda_forward(xp, rng.child("bpda", it)),
        history=history,
    )
    return patched
