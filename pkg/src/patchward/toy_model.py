"""Trainable toy conditional denoiser: a small UNet with FiLM conditioning.

Input channels are [noisy image | mask | masked known image] (2C+1), so one
model serves plain denoising (zero mask/known) and mask-conditioned
inpainting. Conditioning is a pooled context vector; a learned null
embedding stands in for the empty-text branch and is trained with
conditioning dropout so that prompted and unprompted predictions genuinely
differ.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .core import DataError, NoiseSchedule, ParamError, RngStream, make_schedule
from .diffusion import Conditioning, DenoiserModel, to_pm


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class FilmBlock(nn.Module):
    """Conv -> GroupNorm -> FiLM(scale, shift from the embedding) -> SiLU."""

    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(min(8, c_out), c_out)
        self.film = nn.Linear(emb_dim, 2 * c_out)

    def forward(self, x, emb):
        h = self.norm(self.conv(x))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        return F.silu(h * (1.0 + scale) + shift)


class ToyUNet(nn.Module):
    def __init__(self, in_channels=7, out_channels=3, base=32, emb_dim=96, d_cond=32):
        super().__init__()
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_mlp = nn.Sequential(nn.Linear(d_cond, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.emb_dim = emb_dim

        c1, c2, c3 = base, base * 2, base * 3
        self.enc1 = FilmBlock(in_channels, c1, emb_dim)
        self.enc1b = FilmBlock(c1, c1, emb_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = FilmBlock(c2, c2, emb_dim)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid = FilmBlock(c3, c3, emb_dim)
        self.mid2 = FilmBlock(c3, c3, emb_dim)
        self.up2 = nn.ConvTranspose2d(c3, c2, 2, stride=2)
        self.dec2 = FilmBlock(c2 * 2, c2, emb_dim)
        self.up1 = nn.ConvTranspose2d(c2, c1, 2, stride=2)
        self.dec1 = FilmBlock(c1 * 2, c1, emb_dim)
        self.out = nn.Conv2d(c1, out_channels, 3, padding=1)

    def forward(self, x, t, cond_vec):
        emb = self.time_mlp(_timestep_embedding(t, self.emb_dim)) + self.cond_mlp(cond_vec)
        h1 = self.enc1b(self.enc1(x, emb), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h3 = self.mid2(self.mid(self.down2(h2), emb), emb)
        u2 = self.dec2(torch.cat([self.up2(h3), h2], dim=1), emb)
        u1 = self.dec1(torch.cat([self.up1(u2), h1], dim=1), emb)
        return self.out(u1)


# ---------------------------------------------------------------------------
# Denoiser wrapper
# ---------------------------------------------------------------------------

def _hash_token_vector(token: str, d: int, scale: float = 1.0) -> np.ndarray:
    digest = hashlib.sha256(token.encode()).digest()
    seed = int.from_bytes(digest[:8], "little")
    gen = np.random.default_rng(seed)
    return gen.standard_normal(d) * scale


class ToyDenoiser(DenoiserModel):
    """Conditional eps predictor over 2C+1 stacked input channels."""

    supports_inpaint_channels = True
    dtype = torch.float32

    def __init__(
        self,
        schedule: NoiseSchedule,
        channels: int = 3,
        d_cond: int = 32,
        base: int = 32,
        class_names: tuple[str, ...] = (),
        options: dict | None = None,
    ):
        self.schedule = schedule
        self.channels = channels
        self.d_cond = d_cond
        self.base = base
        self.class_names = tuple(class_names)
        self.options = dict(options or {})
        self.net = ToyUNet(
            in_channels=2 * channels + 1, out_channels=channels, base=base, d_cond=d_cond
        )
        self.class_embed = nn.Embedding(max(len(self.class_names), 1), d_cond)
        self.null_embed = nn.Parameter(torch.zeros(d_cond))

    def parameters(self):
        yield from self.net.parameters()
        yield from self.class_embed.parameters()
        yield self.null_embed

    def _cond_vec(self, cond: Conditioning, batch: int, dtype) -> torch.Tensor:
        if cond.is_empty:
            v = self.null_embed.to(dtype)
        else:
            v = cond.pooled(dtype=dtype)
        return v[None, :].expand(batch, -1)

    def predict_eps(self, z, t, cond, mask=None, known=None):
        b, c, h, w = z.shape
        if mask is None:
            mask = torch.zeros(b, 1, h, w, dtype=z.dtype)
        if known is None:
            known = torch.zeros(b, c, h, w, dtype=z.dtype)
        x = torch.cat([z, mask, known], dim=1).to(self.dtype)
        cond_vec = self._cond_vec(cond, b, self.dtype)
        out = self.net(x, t, cond_vec)
        return out.to(z.dtype)

    # -- vocabulary -------------------------------------------------------

    def embed_label(self, label: int) -> Conditioning:
        with torch.no_grad():
            v = self.class_embed(torch.tensor([int(label)]))
        return Conditioning.from_vectors(v.numpy().astype(np.float64))

    def embed_token(self, token: str) -> np.ndarray:
        """Class names map to learned embeddings; anything else to a stable
        hash-seeded vector in the same space."""
        token = token.strip().lower()
        if token in self.class_names:
            with torch.no_grad():
                v = self.class_embed(torch.tensor([self.class_names.index(token)]))
            return v[0].numpy().astype(np.float64)
        return _hash_token_vector(token, self.d_cond, scale=0.02)

    # -- persistence ------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "net": self.net.state_dict(),
            "class_embed": self.class_embed.state_dict(),
            "null_embed": self.null_embed.detach().clone(),
        }

    def load_state_dict(self, sd: dict) -> None:
        self.net.load_state_dict(sd["net"])
        self.class_embed.load_state_dict(sd["class_embed"])
        with torch.no_grad():
            self.null_embed.copy_(sd["null_embed"])

    def save(self, path) -> None:
        torch.save(
            {
                "format": "patchward-toy-denoiser-v1",
                "state": self.state_dict(),
                "channels": self.channels,
                "d_cond": self.d_cond,
                "base": self.base,
                "class_names": list(self.class_names),
                "options": self.options,
                "schedule": {
                    "T": self.schedule.T,
                    "beta": np.asarray(self.schedule.beta),
                },
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "ToyDenoiser":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        beta = np.asarray(blob["schedule"]["beta"], dtype=np.float64)
        sched = NoiseSchedule(T=blob["schedule"]["T"], beta=beta, alpha_bar=np.cumprod(1.0 - beta))
        model = cls(
            schedule=sched,
            channels=blob["channels"],
            d_cond=blob["d_cond"],
            base=blob["base"],
            class_names=tuple(blob["class_names"]),
            options=blob.get("options", {}),
        )
        model.load_state_dict(blob["state"])
        model.eval()
        return model

    def eval(self):
        self.net.eval()
        return self

    def train(self):
        self.net.train()
        return self


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class DenoiserTrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 2e-3
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    d_cond: int = 32
    base: int = 32
    cond_dropout: float = 0.1
    inpaint_prob: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _random_rect_mask(h, w, gen: torch.Generator) -> torch.Tensor:
    side_h = int(torch.randint(max(h // 8, 2), max(h // 2, 3), (1,), generator=gen))
    side_w = int(torch.randint(max(w // 8, 2), max(w // 2, 3), (1,), generator=gen))
    top = int(torch.randint(0, h - side_h + 1, (1,), generator=gen))
    left = int(torch.randint(0, w - side_w + 1, (1,), generator=gen))
    m = torch.zeros(1, h, w)
    m[:, top : top + side_h, left : left + side_w] = 1.0
    return m


def train_toy_denoiser(
    images: np.ndarray,
    labels: np.ndarray,
    class_names: tuple[str, ...],
    cfg: DenoiserTrainConfig | None = None,
    progress: bool = False,
) -> ToyDenoiser:
    """Fit the toy eps predictor on an image set with class conditioning.

    Each batch mixes plain-denoising examples (zero mask/known channels)
    with inpainting examples (random rectangle mask, masked clean image in
    the known channels); 10% of examples drop conditioning to the null
    embedding. Returns the trained model with `loss_history` attached.
    """
    cfg = cfg or DenoiserTrainConfig()
    images = np.asarray(images, dtype=np.float64)
    if images.size == 0:
        raise DataError("empty dataset")
    if images.ndim != 4:
        raise DataError(f"expected (N, H, W, C) images, got shape {images.shape}")
    if len({img.shape for img in images}) != 1:
        raise DataError("inconsistent image shapes")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != images.shape[0]:
        raise DataError("labels length does not match image count")
    n, h, w, c = images.shape

    sched = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    torch.manual_seed(RngStream(cfg.seed, "denoiser-init").torch_seed())
    model = ToyDenoiser(
        schedule=sched, channels=c, d_cond=cfg.d_cond, base=cfg.base, class_names=class_names
    )
    model.train()

    gen = torch.Generator().manual_seed(RngStream(cfg.seed, "denoiser-train").torch_seed())
    data = torch.as_tensor(to_pm(images).transpose(0, 3, 1, 2), dtype=torch.float32)
    label_t = torch.as_tensor(labels)
    ab = torch.tensor(sched.alpha_bar, dtype=torch.float32)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    losses = []
    epochs = range(cfg.epochs)
    if progress:
        epochs = tqdm(epochs, desc="train denoiser")
    for _epoch in epochs:
        perm = torch.randperm(n, generator=gen)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x0 = data[idx]
            b = x0.shape[0]
            t = torch.randint(0, cfg.T, (b,), generator=gen)
            eps = torch.randn(b, c, h, w, generator=gen)
            a = ab[t][:, None, None, None]
            z_t = a.sqrt() * x0 + (1.0 - a).sqrt() * eps

            mask = torch.zeros(b, 1, h, w)
            for j in range(b):
                if torch.rand(1, generator=gen).item() < cfg.inpaint_prob:
                    mask[j] = _random_rect_mask(h, w, gen)
            known = x0 * (1.0 - mask)

            cond_vecs = model.class_embed(label_t[idx])
            drop = torch.rand(b, generator=gen) < cfg.cond_dropout
            cond_vecs = torch.where(
                drop[:, None], model.null_embed[None, :].expand(b, -1), cond_vecs
            )

            inp = torch.cat([z_t, mask, known], dim=1)
            pred = model.net(inp, t, cond_vecs)
            loss = F.mse_loss(pred, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        losses.append(epoch_loss / max(batches, 1))

    model.eval()
    model.loss_history = losses
    model.train_config = cfg.to_dict()
    return model
