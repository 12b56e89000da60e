"""Learnable prompt vectors and the three-part tuning loss.

Two prompts are tuned with plain gradient descent on a few-shot attacked
set: one steers localization, one steers restoration. The total loss sums
a mask cross-entropy, an L1 image distance and a feature-space perceptual
distance; thresholding steps are bridged with straight-through gradients
so the localization prompt receives signal through the restoration path
as well.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import (
    DefenseConfig,
    DivergenceError,
    LayerError,
    ParamError,
    RngStream,
    ShapeError,
)
from .diffusion import Conditioning

CE_EPS = 1e-7
NORM_EPS = 1e-12


def _as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_ce(mask_true, mask_soft) -> torch.Tensor:
    """Per-pixel binary cross-entropy between the ground-truth patch mask and
    the soft estimated mask, averaged over all pixels."""
    m = _as_tensor(mask_true)
    p = _as_tensor(mask_soft).to(m.dtype)
    if m.shape != p.shape:
        raise ShapeError(f"mask shapes differ: {tuple(m.shape)} vs {tuple(p.shape)}")
    p = p.clamp(CE_EPS, 1.0 - CE_EPS)
    return -(m * p.log() + (1.0 - m) * (1.0 - p).log()).mean()


def loss_l1(x_r, x) -> torch.Tensor:
    """Mean absolute pixel distance."""
    a = _as_tensor(x_r)
    b = _as_tensor(x).to(a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def _unit_normalize(f: torch.Tensor) -> torch.Tensor:
    # f: (B, C, H, W); normalize over channels per spatial location
    return f / (f.norm(dim=1, keepdim=True) + NORM_EPS)


def loss_perceptual(x_r, x, classifier, weights: dict | None = None) -> torch.Tensor:
    """Channel-weighted squared distance between unit-normalized activations,
    spatially averaged per layer and summed over the configured layers."""
    if weights is not None:
        unknown = set(weights) - set(classifier.feature_layers)
        if unknown:
            raise LayerError(f"weights refer to unknown layers: {sorted(unknown)}")
    feats_r = classifier.features(_as_tensor(x_r, dtype=torch.float32))
    feats_c = classifier.features(_as_tensor(x, dtype=torch.float32))
    total = None
    for layer in classifier.feature_layers:
        fr = _unit_normalize(feats_r[layer])
        fc = _unit_normalize(feats_c[layer])
        w = None if weights is None else weights.get(layer)
        diff = fr - fc
        if w is not None:
            w = _as_tensor(w, dtype=diff.dtype)
            diff = w[None, :, None, None] * diff
        contrib = diff.pow(2).sum(dim=1).mean()  # 1/(H W) sum_hw ||.||^2, batch of 1
        total = contrib if total is None else total + contrib
    return total


def loss_total(
    mask_true,
    mask_soft,
    x_r,
    x,
    classifier,
    weights: dict | None = None,
    coeffs: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> torch.Tensor:
    """Sum of the three tuning losses with per-term multipliers (default 1)."""
    c_ce, c_l1, c_d = coeffs
    total = (
        c_ce * loss_ce(mask_true, mask_soft)
        + c_l1 * loss_l1(x_r, x)
        + c_d * loss_perceptual(x_r, x, classifier, weights).to(torch.float64)
    )
    return total


def binarize_ste(soft: torch.Tensor, tau: float) -> torch.Tensor:
    """Threshold in the forward pass, identity in the backward pass."""
    hard = (soft >= tau).to(soft.dtype)
    return soft + (hard - soft).detach()


# ---------------------------------------------------------------------------
# Prompt embeddings
# ---------------------------------------------------------------------------

@dataclass
class PromptEmbedding:
    """n learnable context vectors for one of the two prompt roles."""

    vectors: np.ndarray  # (n, d_cond)
    role: str  # "localization" | "restoration"
    init_source: str = "random"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ParamError(f"vectors must be (n, d), got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ParamError("prompt vectors must be finite")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d_cond(self) -> int:
        return self.vectors.shape[1]

    def conditioning(self) -> Conditioning:
        return Conditioning.from_vectors(self.vectors)

    def save(self, prefix) -> None:
        np.savez(f"{prefix}.npz", vectors=self.vectors)
        with open(f"{prefix}.json", "w") as f:
            json.dump(
                {
                    "n": self.n,
                    "d_cond": self.d_cond,
                    "role": self.role,
                    "init_source": self.init_source,
                },
                f,
                indent=2,
            )

    @classmethod
    def load(cls, prefix) -> "PromptEmbedding":
        vectors = np.load(f"{prefix}.npz")["vectors"]
        with open(f"{prefix}.json") as f:
            meta = json.load(f)
        return cls(vectors=vectors, role=meta["role"], init_source=meta["init_source"])


def init_prompt(
    tokens: list[str] | None,
    model,
    role: str,
    n: int = 16,
    rng: RngStream | None = None,
) -> PromptEmbedding:
    """Build an n-vector prompt: manual tokens are embedded into the model's
    conditioning space and padded with N(0, 0.02) rows; `tokens=None` gives a
    fully random init."""
    rng = rng or RngStream(0, ("prompt-init", role))
    d = model.d_cond
    vectors = rng.normal((n, d)) * 0.02
    source = "random"
    if tokens:
        for i, tok in enumerate(tokens[:n]):
            vectors[i] = model.embed_token(tok)
        source = "manual:" + " ".join(tokens)
    return PromptEmbedding(vectors=vectors, role=role, init_source=source)


# ---------------------------------------------------------------------------
# Few-shot tuning
# ---------------------------------------------------------------------------

@dataclass
class Shot:
    x_clean: np.ndarray
    x_adv: np.ndarray
    mask: np.ndarray  # ground-truth patch mask
    label: int


@dataclass
class FewShotSet:
    shots: list
    attack_name: str = "advp"

    def __post_init__(self):
        if len(self.shots) < 1:
            raise ParamError("few-shot set must contain at least one shot")

    @property
    def k(self) -> int:
        return len(self.shots)


@dataclass
class TuningHandles:
    """Pipeline pieces the tuning loop needs."""

    model: object
    classifier: object
    cfg: DefenseConfig
    inpaint_steps: int = 6  # shortened differentiable sampler during tuning
    use_ce: bool = True
    use_l1: bool = True
    use_perceptual: bool = True
    feature_weights: dict | None = None


@dataclass
class TuneResult:
    prompt_L: PromptEmbedding
    prompt_R: PromptEmbedding
    trace: list = field(default_factory=list)

    def epoch_means(self, k: int) -> list:
        totals = [row["total"] for row in self.trace]
        return [
            float(np.mean(totals[i : i + k])) for i in range(0, len(totals) - k + 1, k)
        ]

    def save_trace_csv(self, path) -> None:
        cols = ["step", "shot", "loss_ce", "loss_l1", "loss_perceptual", "total"]
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=cols)
            writer.writeheader()
            for row in self.trace:
                writer.writerow({c: row[c] for c in cols})


def tune_prompts(
    fewshot: FewShotSet,
    init_L: PromptEmbedding,
    init_R: PromptEmbedding,
    steps: int,
    lr: float,
    handles: TuningHandles,
    rng: RngStream,
) -> TuneResult:
    """Plain gradient descent on both prompts through the defense pipeline.

    One shot is visited per step (cyclic order); localization runs a single
    difference repetition per step for tractability. Raises DivergenceError
    if the loss becomes non-finite.
    """
    from .pipeline import differentiable_defense

    if steps < 0:
        raise ParamError("steps must be >= 0")
    if not (handles.use_ce or handles.use_l1 or handles.use_perceptual):
        raise ParamError("at least one tuning loss must be enabled")

    # float64 leaves so lr=0 / steps=0 leave the embeddings bit-identical;
    # the model casts to its own dtype at the boundary
    vec_L = torch.tensor(init_L.vectors, dtype=torch.float64, requires_grad=True)
    vec_R = torch.tensor(init_R.vectors, dtype=torch.float64, requires_grad=True)
    trace: list = []

    for step in range(steps):
        shot_idx = step % fewshot.k
        shot = fewshot.shots[shot_idx]
        soft_t, _mask_t, restored_t = differentiable_defense(
            shot.x_adv,
            vec_L,
            vec_R,
            handles.model,
            handles.cfg,
            rng.child("tune-step", step),
            inpaint_steps=handles.inpaint_steps,
            reps=1,
        )
        parts = {"loss_ce": 0.0, "loss_l1": 0.0, "loss_perceptual": 0.0}
        total = None
        if handles.use_ce:
            term = loss_ce(shot.mask, soft_t)
            parts["loss_ce"] = float(term)
            total = term if total is None else total + term
        if handles.use_l1:
            term = loss_l1(restored_t, shot.x_clean).to(torch.float64)
            parts["loss_l1"] = float(term)
            total = term if total is None else total + term
        if handles.use_perceptual:
            term = loss_perceptual(
                restored_t, shot.x_clean, handles.classifier, handles.feature_weights
            ).to(torch.float64)
            parts["loss_perceptual"] = float(term)
            total = term if total is None else total + term

        if not torch.isfinite(total):
            raise DivergenceError(f"non-finite tuning loss at step {step}: {total}")
        grad_L, grad_R = torch.autograd.grad(total, [vec_L, vec_R], allow_unused=True)
        with torch.no_grad():
            if grad_L is not None:
                vec_L -= lr * grad_L
            if grad_R is not None:
                vec_R -= lr * grad_R
        trace.append({"step": step, "shot": shot_idx, "total": float(total), **parts})

    tuned_L = PromptEmbedding(
        vectors=vec_L.detach().numpy().astype(np.float64),
        role=init_L.role,
        init_source=init_L.init_source,
    )
    tuned_R = PromptEmbedding(
        vectors=vec_R.detach().numpy().astype(np.float64),
        role=init_R.role,
        init_source=init_R.init_source,
    )
    return TuneResult(prompt_L=tuned_L, prompt_R=tuned_R, trace=trace)
