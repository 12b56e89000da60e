"""Toy convolutional classifier with a named feature-layer registry.

Stands in for a full-scale backbone: small enough to train on CPU in
seconds, exposes post-activation conv features for the perceptual loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DataError, LayerError, RngStream


class ToyCNN(nn.Module):
    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 3, padding=1)
        self.conv3 = nn.Conv2d(width * 2, width * 4, 3, padding=1)
        self.fc = nn.Linear(width * 4, num_classes)

    def forward(self, x, taps: dict | None = None):
        h = F.relu(self.conv1(x))
        if taps is not None:
            taps["block1"] = h
        h = F.max_pool2d(h, 2)
        h = F.relu(self.conv2(h))
        if taps is not None:
            taps["block2"] = h
        h = F.max_pool2d(h, 2)
        h = F.relu(self.conv3(h))
        if taps is not None:
            taps["block3"] = h
        h = h.mean(dim=(2, 3))
        return self.fc(h)


class ClassifierModel:
    """Wrapper holding the network, class names and the feature registry."""

    feature_layers = ("block1", "block2", "block3")

    def __init__(self, net: ToyCNN, class_names, width: int = 16):
        self.net = net
        self.class_names = tuple(class_names)
        self.width = width
        self.num_classes = len(self.class_names)
        self.net.eval()
        # inference wrapper: weights are frozen, gradients flow to inputs only
        for p in self.net.parameters():
            p.requires_grad_(False)

    def _to_batch(self, x) -> torch.Tensor:
        if torch.is_tensor(x):
            t = x
        else:
            t = torch.as_tensor(np.asarray(x, dtype=np.float32))
        if t.ndim == 3:  # (H, W, C) -> (1, C, H, W)
            t = t.permute(2, 0, 1)[None]
        return t.to(next(self.net.parameters()).dtype)

    def logits_t(self, x, taps: dict | None = None) -> torch.Tensor:
        return self.net(self._to_batch(x), taps=taps)

    def logits(self, x) -> np.ndarray:
        with torch.no_grad():
            return self.logits_t(x).numpy()

    def predict(self, x) -> int:
        return int(np.argmax(self.logits(x), axis=1)[0])

    def features(self, x, layers=None) -> dict:
        """Post-activation feature maps for the requested layers."""
        layers = tuple(layers) if layers is not None else self.feature_layers
        missing = [l for l in layers if l not in self.feature_layers]
        if missing:
            raise LayerError(f"unknown feature layers: {missing}")
        taps: dict = {}
        self.logits_t(x, taps=taps)
        return {l: taps[l] for l in layers}

    def save(self, path) -> None:
        torch.save(
            {
                "format": "patchward-toy-classifier-v1",
                "state": self.net.state_dict(),
                "class_names": list(self.class_names),
                "width": self.width,
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        net = ToyCNN(num_classes=len(blob["class_names"]), width=blob["width"])
        net.load_state_dict(blob["state"])
        return cls(net, blob["class_names"], width=blob["width"])


@dataclass
class ClassifierTrainConfig:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 2e-3
    width: int = 16
    val_frac: float = 0.2
    seed: int = 0


def train_toy_classifier(
    images: np.ndarray,
    labels: np.ndarray,
    class_names,
    cfg: ClassifierTrainConfig | None = None,
) -> ClassifierModel:
    """Train the toy classifier; attaches `val_accuracy` to the result."""
    cfg = cfg or ClassifierTrainConfig()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if images.size == 0:
        raise DataError("empty dataset")
    if images.ndim != 4:
        raise DataError(f"expected (N, H, W, C) images, got {images.shape}")
    if labels.shape[0] != images.shape[0]:
        raise DataError("labels length does not match image count")

    n = images.shape[0]
    rng = RngStream(cfg.seed, "clf-split")
    order = np.arange(n)
    rng.shuffle(order)
    n_val = int(round(n * cfg.val_frac))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise DataError("no training examples after validation split")

    torch.manual_seed(RngStream(cfg.seed, "clf-init").torch_seed())
    net = ToyCNN(num_classes=len(class_names), width=cfg.width)
    gen = torch.Generator().manual_seed(RngStream(cfg.seed, "clf-train").torch_seed())

    x = torch.as_tensor(images.transpose(0, 3, 1, 2))
    y = torch.as_tensor(labels)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    net.train()
    for _epoch in range(cfg.epochs):
        perm = train_idx[torch.randperm(len(train_idx), generator=gen).numpy()]
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            logits = net(x[idx])
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()

    model = ClassifierModel(net, class_names, width=cfg.width)
    if n_val > 0:
        with torch.no_grad():
            preds = net(x[val_idx]).argmax(dim=1).numpy()
        model.val_accuracy = float((preds == labels[val_idx]).mean())
    else:
        model.val_accuracy = float("nan")
    return model
