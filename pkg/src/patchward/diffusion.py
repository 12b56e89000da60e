"""Denoiser interface and the diffusion operations the defense is built on.

All public functions take and return images in the [0, 1] convention; the
math runs in [-1, 1] ("pm") space. Noisy intermediates returned by
`forward_noise` are *not* clamped -- they live in the noised space and may
exceed [0, 1]. Final predicted / sampled images are clamped.
"""
from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np
import torch

from .core import (
    NoiseSchedule,
    NumericalError,
    ParamError,
    RngStream,
    ShapeError,
    validate_image,
)

ALPHA_BAR_FLOOR = 1e-8


def to_pm(x):
    """[0, 1] -> [-1, 1]."""
    return x * 2.0 - 1.0


def from_pm(z):
    """[-1, 1] -> [0, 1]."""
    return (z + 1.0) / 2.0


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

@dataclass
class Conditioning:
    """Text-style conditioning: a stack of context vectors, or the empty branch.

    `vectors` is an (n, d_cond) array or tensor; it is ignored when
    `is_empty` is set, in which case the model substitutes its learned
    null embedding.
    """

    vectors: object = None
    is_empty: bool = False

    @classmethod
    def empty(cls) -> "Conditioning":
        return cls(vectors=None, is_empty=True)

    @classmethod
    def from_vectors(cls, vectors) -> "Conditioning":
        if torch.is_tensor(vectors):
            if vectors.ndim != 2 or vectors.shape[0] < 1:
                raise ParamError(f"conditioning must be (n, d), got {tuple(vectors.shape)}")
            if not torch.all(torch.isfinite(vectors)):
                raise ParamError("conditioning vectors must be finite")
            return cls(vectors=vectors, is_empty=False)
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ParamError(f"conditioning must be (n, d), got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ParamError("conditioning vectors must be finite")
        return cls(vectors=vectors, is_empty=False)

    def pooled(self, dtype=None) -> torch.Tensor | None:
        """Mean over the n context vectors as a torch tensor, or None if empty."""
        if self.is_empty:
            return None
        v = self.vectors
        if not torch.is_tensor(v):
            v = torch.as_tensor(np.asarray(v))
        if dtype is not None:
            v = v.to(dtype)
        return v.mean(dim=0)


# ---------------------------------------------------------------------------
# Denoiser interface
# ---------------------------------------------------------------------------

class DenoiserModel(abc.ABC):
    """Noise predictor driving every diffusion operation.

    Implementations own a NoiseSchedule and predict eps of the same shape
    as their (pm-space) image input. `options` is an opaque passthrough
    for backend-specific sampler settings (e.g. guidance scale) that the
    toy backend does not consume.
    """

    schedule: NoiseSchedule
    d_cond: int = 0
    channels: int = 3
    supports_inpaint_channels: bool = False
    dtype: torch.dtype = torch.float32
    options: dict = {}

    @abc.abstractmethod
    def predict_eps(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        cond: Conditioning,
        mask: torch.Tensor | None = None,
        known: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Predict the noise in `z` (B, C, H, W) at integer timesteps `t` (B,).

        `mask` (B, 1, H, W) and `known` (B, C, H, W) are the extra
        inpainting input channels; None means all-zero (plain denoising).
        """


def _img_to_batch(x: np.ndarray, dtype) -> torch.Tensor:
    # (H, W, C) float -> (1, C, H, W) tensor in pm space
    z = to_pm(np.asarray(x, dtype=np.float64))
    return torch.as_tensor(z.transpose(2, 0, 1)[None], dtype=dtype)


def _batch_to_img(z: torch.Tensor) -> np.ndarray:
    return from_pm(z[0].detach().cpu().numpy().astype(np.float64).transpose(1, 2, 0))


def _check_t(t: int, sched: NoiseSchedule) -> int:
    t = int(t)
    if not (0 <= t < sched.T):
        raise ParamError(f"step {t} outside schedule [0, {sched.T})")
    return t


# ---------------------------------------------------------------------------
# Forward noising
# ---------------------------------------------------------------------------

def forward_noise_with_eps(
    x0: np.ndarray, t: int, sched: NoiseSchedule, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Noise `x0` to step t; also return the pm-space eps that was drawn."""
    validate_image(x0)
    t = _check_t(t, sched)
    ab = sched.alpha_bar[t]
    eps = rng.normal(x0.shape)
    z_t = np.sqrt(ab) * to_pm(np.asarray(x0, dtype=np.float64)) + np.sqrt(1.0 - ab) * eps
    return from_pm(z_t), eps


def forward_noise(x0: np.ndarray, t: int, sched: NoiseSchedule, rng: RngStream) -> np.ndarray:
    """sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps in pm space, mapped back to [0, 1] frame.

    The result is intentionally not clamped: clamping would censor the
    noise distribution and break the variance contract. Treat the output
    as a noisy working array rather than a valid display image.
    """
    noisy, _ = forward_noise_with_eps(x0, t, sched, rng)
    return noisy


# ---------------------------------------------------------------------------
# One-step prediction
# ---------------------------------------------------------------------------

def predict_x0_pm(
    z_t: torch.Tensor,
    t: int,
    cond: Conditioning,
    model: DenoiserModel,
    mask: torch.Tensor | None = None,
    known: torch.Tensor | None = None,
) -> torch.Tensor:
    """Differentiable pm-space one-step x0 estimate, clamped to [-1, 1]."""
    sched = model.schedule
    t = _check_t(t, sched)
    ab = float(sched.alpha_bar[t])
    if ab < ALPHA_BAR_FLOOR:
        raise NumericalError(
            f"alpha_bar[{t}]={ab:.3g} below floor {ALPHA_BAR_FLOOR:.0e}; step too close to T"
        )
    tt = torch.full((z_t.shape[0],), t, dtype=torch.long, device=z_t.device)
    eps_hat = model.predict_eps(z_t, tt, cond, mask=mask, known=known)
    z0 = (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return z0.clamp(-1.0, 1.0)


def predict_x0_one_step(
    x_t: np.ndarray, t: int, cond: Conditioning, model: DenoiserModel
) -> np.ndarray:
    """Closed-form clean-image estimate from a noisy image with one model call."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 3 or x_t.shape[2] != model.channels:
        raise ShapeError(f"expected (H, W, {model.channels}) array, got {x_t.shape}")
    with torch.no_grad():
        z0 = predict_x0_pm(_img_to_batch(x_t, model.dtype), t, cond, model)
    return _batch_to_img(z0)


# ---------------------------------------------------------------------------
# Inpainting sampler
# ---------------------------------------------------------------------------

def _respaced_timesteps(T: int, steps: int) -> np.ndarray:
    ts = np.unique(np.round(np.linspace(T - 1, 0, num=min(steps, T))).astype(int))
    return ts[::-1]  # descending


def inpaint_pm(
    known_pm: torch.Tensor,
    mask_t: torch.Tensor,
    cond: Conditioning,
    model: DenoiserModel,
    steps: int,
    rng: RngStream,
    eta: float = 1.0,
) -> torch.Tensor:
    """Differentiable reverse sampler conditioned on inpaint channels.

    known_pm: (B, C, H, W) pm-space image whose unmasked region is trusted.
    mask_t:   (B, 1, H, W), 1 inside the region to regenerate.
    Returns the raw generated pm-space image (no compositing).
    """
    if steps < 1:
        raise ParamError(f"steps must be >= 1, got {steps}")
    sched = model.schedule
    ab = sched.alpha_bar
    masked_known = known_pm * (1.0 - mask_t)
    timesteps = _respaced_timesteps(sched.T, steps)

    z = torch.as_tensor(rng.normal(tuple(known_pm.shape)), dtype=known_pm.dtype)
    z0 = z
    for i, t in enumerate(timesteps):
        z0 = predict_x0_pm(z, int(t), cond, model, mask=mask_t, known=masked_known)
        if i == len(timesteps) - 1:
            break
        t_next = int(timesteps[i + 1])
        ab_t, ab_n = float(ab[t]), float(ab[t_next])
        eps_hat = (z - np.sqrt(ab_t) * z0) / np.sqrt(1.0 - ab_t)
        sigma = eta * np.sqrt((1.0 - ab_n) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_n)
        sigma = min(sigma, np.sqrt(1.0 - ab_n))
        dir_coef = np.sqrt(max(1.0 - ab_n - sigma**2, 0.0))
        noise = torch.as_tensor(rng.normal(tuple(z.shape)), dtype=z.dtype)
        z = np.sqrt(ab_n) * z0 + dir_coef * eps_hat + sigma * noise
    return z0


def inpaint(
    x_known: np.ndarray,
    mask: np.ndarray,
    cond: Conditioning,
    model: DenoiserModel,
    steps: int,
    rng: RngStream,
) -> np.ndarray:
    """Regenerate the masked region of `x_known`; composite keeps the rest bit-exact."""
    validate_image(x_known)
    if not model.supports_inpaint_channels:
        raise ParamError("model does not support inpainting input channels")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x_known.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} != image spatial dims {x_known.shape[:2]}")
    if steps < 1:
        raise ParamError(f"steps must be >= 1, got {steps}")

    known_pm = _img_to_batch(x_known, model.dtype)
    mask_t = torch.as_tensor(mask[None, None], dtype=model.dtype)
    with torch.no_grad():
        z0 = inpaint_pm(known_pm, mask_t, cond, model, steps, rng)
    generated = _batch_to_img(z0)
    return np.where(mask[:, :, None] > 0.5, generated, x_known)


# ---------------------------------------------------------------------------
# Global purification baseline
# ---------------------------------------------------------------------------

def diffpure_baseline(
    x_adv: np.ndarray,
    t_star: float,
    model: DenoiserModel,
    sched: NoiseSchedule,
    rng: RngStream,
) -> np.ndarray:
    """Noise the whole image to step(t_star), then run the full unconditional
    reverse chain back to step 0. t_star = 0 is the identity."""
    validate_image(x_adv)
    from .core import ratio_to_step

    if t_star == 0.0:
        return np.array(x_adv, dtype=np.float64, copy=True)
    t_idx = ratio_to_step(t_star, sched)
    noisy = forward_noise(x_adv, t_idx, sched, rng.child("fwd"))

    ab = sched.alpha_bar
    beta = sched.beta
    z = _img_to_batch(noisy, model.dtype)
    empty = Conditioning.empty()
    with torch.no_grad():
        for t in range(t_idx, -1, -1):
            z0 = predict_x0_pm(z, t, empty, model)
            if t == 0:
                z = z0
                break
            ab_t, ab_p = float(ab[t]), float(ab[t - 1])
            alpha_t = 1.0 - float(beta[t])
            # q-posterior mean with the clipped x0 estimate
            mean = (
                np.sqrt(ab_p) * float(beta[t]) / (1.0 - ab_t) * z0
                + np.sqrt(alpha_t) * (1.0 - ab_p) / (1.0 - ab_t) * z
            )
            var = (1.0 - ab_p) / (1.0 - ab_t) * float(beta[t])
            noise = torch.as_tensor(rng.normal(tuple(z.shape)), dtype=z.dtype)
            z = mean + np.sqrt(var) * noise
    return _batch_to_img(z.clamp(-1.0, 1.0))


# ---------------------------------------------------------------------------
# Ready-made oracle denoisers (used for contracts and tests)
# ---------------------------------------------------------------------------

class FixedEpsDenoiser(DenoiserModel):
    """Returns a fixed eps array regardless of input: the exact-inversion oracle."""

    def __init__(self, eps: np.ndarray, schedule: NoiseSchedule, channels: int = 3):
        self.schedule = schedule
        self.channels = channels
        self.d_cond = 0
        self.supports_inpaint_channels = True
        self.dtype = torch.float64
        self.options = {}
        self._eps = np.asarray(eps, dtype=np.float64)

    def predict_eps(self, z, t, cond, mask=None, known=None):
        e = torch.as_tensor(self._eps.transpose(2, 0, 1)[None], dtype=z.dtype)
        return e.expand(z.shape[0], -1, -1, -1)


class ZeroDenoiser(DenoiserModel):
    """Predicts zero noise everywhere; conditioning-blind."""

    def __init__(self, schedule: NoiseSchedule, channels: int = 3):
        self.schedule = schedule
        self.channels = channels
        self.d_cond = 0
        self.supports_inpaint_channels = True
        self.dtype = torch.float64
        self.options = {}

    def predict_eps(self, z, t, cond, mask=None, known=None):
        return torch.zeros_like(z)


class CondShiftDenoiser(DenoiserModel):
    """Predicts zeros when unconditioned and a constant per-channel shift
    otherwise; isolates the conditioning dependence of downstream ops."""

    def __init__(self, schedule: NoiseSchedule, shift: np.ndarray, channels: int = 3):
        self.schedule = schedule
        self.channels = channels
        self.d_cond = 0
        self.supports_inpaint_channels = True
        self.dtype = torch.float64
        self.options = {}
        self._shift = np.asarray(shift, dtype=np.float64).reshape(1, channels, 1, 1)

    def predict_eps(self, z, t, cond, mask=None, known=None):
        if cond.is_empty:
            return torch.zeros_like(z)
        return torch.as_tensor(self._shift, dtype=z.dtype).expand_as(z).clone()
