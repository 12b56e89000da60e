"""Shared domain types: images, noise schedules, configuration and seeded RNG streams.

Pixel convention is [0, 1] everywhere at module boundaries; diffusion math
rescales to [-1, 1] internally (see :mod:`patchward.diffusion`).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml
from PIL import Image as PILImage


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class PatchwardError(Exception):
    """Base class for all toolkit errors."""


class RangeError(PatchwardError):
    """Pixel values outside the allowed range."""


class ShapeError(PatchwardError):
    """Array shape or channel count is invalid."""


class ParamError(PatchwardError):
    """A parameter violates its precondition."""


class NumericalError(PatchwardError):
    """An operation would be numerically unstable."""


class DataError(PatchwardError):
    """Dataset is empty, inconsistent, or insufficient."""


class LayerError(PatchwardError):
    """A requested feature layer does not exist."""


class BoundsError(PatchwardError):
    """A region falls outside the image bounds."""


class DivergenceError(PatchwardError):
    """An optimization produced a non-finite loss."""


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def validate_image(img: np.ndarray) -> np.ndarray:
    """Check that `img` is an H x W x C array with finite values in [0, 1].

    Returns the input unchanged; raises RangeError / ShapeError otherwise.
    """
    img = np.asarray(img)
    if img.ndim != 3:
        raise ShapeError(f"expected H x W x C array, got shape {img.shape}")
    if img.shape[2] not in (1, 3):
        raise ShapeError(f"channel count must be 1 or 3, got {img.shape[2]}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"empty spatial dims: {img.shape}")
    if not np.all(np.isfinite(img)):
        raise RangeError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise RangeError(
            f"pixel values outside [0, 1]: min={img.min():.4g}, max={img.max():.4g}"
        )
    return img


def load_image_png(path) -> np.ndarray:
    """Read a PNG into a float64 H x W x C array in [0, 1]."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_image_png(path, img: np.ndarray) -> None:
    """Write an H x W x C float array in [0, 1] to PNG (8-bit)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if u8.shape[2] == 1:
        PILImage.fromarray(u8[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(u8, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete forward-diffusion schedule.

    beta[t] is the per-step noise variance, alpha_bar[t] the cumulative
    product of (1 - beta) up to and including step t.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if beta.shape != (self.T,) or alpha_bar.shape != (self.T,):
            raise ParamError("schedule arrays must have length T")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ParamError("beta values must lie strictly in (0, 1)")
        if np.any(np.diff(beta) < 0.0):
            raise ParamError("beta must be non-decreasing")
        if np.any(np.diff(alpha_bar) >= 0.0):
            raise ParamError("alpha_bar must be strictly decreasing")
        beta.setflags(write=False)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear beta schedule with T steps between beta_min and beta_max."""
    if T < 2:
        raise ParamError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParamError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def ratio_to_step(ratio: float, sched: NoiseSchedule) -> int:
    """Map a noise ratio in [0, 1] onto a schedule index, round-to-nearest."""
    if not (0.0 <= ratio <= 1.0):
        raise ParamError(f"ratio must be in [0, 1], got {ratio}")
    step = int(math.floor(ratio * (sched.T - 1) + 0.5))
    return min(max(step, 0), sched.T - 1)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class DefenseConfig:
    """Knobs of the defense pipeline.

    t_star:         noise ratio used for localization noising.
    reps:           number of difference repetitions averaged per mask.
    tau_bin:        binarization threshold on the max-rescaled soft mask.
    sigma_smooth:   Gaussian smoothing std (pixels) in mask refinement.
    dilate_radius:  disk radius (pixels) for final mask dilation.
    min_area_frac:  connected components below this fraction of the image
                    area are dropped during refinement.
    inpaint_steps:  reverse-sampler evaluations used for restoration.
    feather_sigma:  optional soft blend at restore time; 0 disables it and
                    keeps the unmasked region bit-exact.
    """

    t_star: float = 0.5
    reps: int = 3
    tau_bin: float = 0.5
    sigma_smooth: float = 1.0
    dilate_radius: int = 2
    min_area_frac: float = 5e-4
    inpaint_steps: int = 50
    feather_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.t_star <= 1.0):
            raise ParamError(f"t_star must be in [0, 1], got {self.t_star}")
        if self.reps < 1:
            raise ParamError(f"reps must be >= 1, got {self.reps}")
        if not (0.0 < self.tau_bin < 1.0):
            raise ParamError(f"tau_bin must be in (0, 1), got {self.tau_bin}")
        if self.sigma_smooth < 0.0:
            raise ParamError("sigma_smooth must be >= 0")
        if self.dilate_radius < 0:
            raise ParamError("dilate_radius must be >= 0")
        if self.inpaint_steps < 1:
            raise ParamError("inpaint_steps must be >= 1")
        if self.min_area_frac < 0.0:
            raise ParamError("min_area_frac must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParamError(f"unknown defense config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> dict:
    """Load a YAML config file (nested sections of key/value pairs)."""
    with open(path, "r") as f:
        cfg = yaml.safe_load(f) or {}
    if not isinstance(cfg, dict):
        raise ParamError("config root must be a mapping")
    return cfg


def defense_config_from_file(path, section: str = "defense") -> DefenseConfig:
    cfg = load_config(path)
    return DefenseConfig.from_dict(cfg.get(section, {}) or {})


def config_hash(mapping: dict) -> str:
    """Stable short hash of a resolved configuration mapping."""
    blob = json.dumps(mapping, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if 0 <= int(key) < 2**32:
            return int(key)
        key = str(int(key))
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:4], "little")


class RngStream:
    """Deterministic random stream addressed by (seed, stream path).

    Identical (seed, path) always reproduces the same draw sequence, and
    children derived with different keys are statistically independent,
    so per-image substreams can be keyed by image id regardless of
    scheduling order.
    """

    def __init__(self, seed: int, stream=()):
        if isinstance(stream, (int, np.integer, str)):
            stream = (stream,)
        self.seed = int(seed)
        self.stream = tuple(_key_to_int(k) for k in stream)
        self._gen = None

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(_key_to_int(k) for k in keys))

    @property
    def np(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
            self._gen = np.random.default_rng(ss)
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self.np.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.np.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.np.integers(low, high, size)

    def shuffle(self, x) -> None:
        self.np.shuffle(x)

    def torch_seed(self) -> int:
        """Derive a 63-bit seed for torch generators from this stream."""
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=self.stream + (_key_to_int("torch"),)
        )
        return int(ss.generate_state(1, np.uint64)[0] >> 1)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"
