"""Contrastive + reconstruction (ConRe) pretraining of the speech/face encoders."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ContractError, NumericError, UsageError
from .ops import generator
from .perceptual import FeatureExtractor, perceptual_distance

DEFAULT_TAU = 0.07


class ChannelAttention(nn.Module):
    """Channel gate from avg- and max-pooled descriptors through a shared MLP."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.SiLU(), nn.Linear(hidden, channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate = torch.sigmoid(self.mlp(x.mean(dim=-1)) + self.mlp(x.amax(dim=-1)))
        return x * gate.unsqueeze(-1)


class SpeechEncoder(nn.Module):
    """1-D conv stack over spectrogram frames, (B, frames, bins) -> (B, dim)."""

    def __init__(self, n_bins: int, dim: int = 128, channels: int = 64, n_layers: int = 3):
        super().__init__()
        self.n_bins, self.dim, self.channels, self.n_layers = n_bins, dim, channels, n_layers
        layers = []
        c = n_bins
        for i in range(n_layers):
            layers += [nn.Conv1d(c, channels, 5, stride=2 if i else 1, padding=2), nn.SiLU()]
            c = channels
        self.convs = nn.Sequential(*layers)
        self.attention = ChannelAttention(channels)
        self.head = nn.Linear(channels, dim)

    def config(self) -> dict:
        return {"n_bins": self.n_bins, "dim": self.dim, "channels": self.channels, "n_layers": self.n_layers}

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.dim() != 3 or spec.shape[-1] != self.n_bins:
            raise ContractError(f"speech encoder expects (B, frames, {self.n_bins}), got {tuple(spec.shape)}")
        h = self.attention(self.convs(spec.transpose(1, 2)))
        return self.head(h.mean(dim=-1))


class FaceEncoder(nn.Module):
    """Strided conv encoder (B, 3, S, S) -> (B, dim)."""

    def __init__(self, image_size: int = 64, dim: int = 128, width: int = 16, n_down: int = 3):
        super().__init__()
        self.image_size, self.dim, self.width, self.n_down = image_size, dim, width, n_down
        layers = []
        c = 3
        for i in range(n_down):
            layers += [nn.Conv2d(c, width * 2**i, 4, stride=2, padding=1), nn.SiLU()]
            c = width * 2**i
        self.convs = nn.Sequential(*layers)
        side = image_size // 2**n_down
        self.head = nn.Linear(c * side * side, dim)

    def config(self) -> dict:
        return {"image_size": self.image_size, "dim": self.dim, "width": self.width, "n_down": self.n_down}

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.convs(images).flatten(1))


class FaceDecoder(nn.Module):
    """Mirror of ``FaceEncoder``; sigmoid output in [0, 1]."""

    def __init__(self, image_size: int = 64, dim: int = 128, width: int = 16, n_up: int = 3):
        super().__init__()
        self.image_size, self.dim, self.width, self.n_up = image_size, dim, width, n_up
        self.side = image_size // 2**n_up
        self.c0 = width * 2 ** (n_up - 1)
        self.head = nn.Linear(dim, self.c0 * self.side * self.side)
        layers = []
        c = self.c0
        for i in reversed(range(n_up)):
            out = 3 if i == 0 else width * 2 ** (i - 1)
            layers.append(nn.ConvTranspose2d(c, out, 4, stride=2, padding=1))
            if i:
                layers.append(nn.SiLU())
            c = out
        self.convs = nn.Sequential(*layers)

    def config(self) -> dict:
        return {"image_size": self.image_size, "dim": self.dim, "width": self.width, "n_up": self.n_up}

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.head(z).view(-1, self.c0, self.side, self.side)
        return torch.sigmoid(self.convs(F.silu(h)))


class Temperature(nn.Module):
    def __init__(self, tau: float = DEFAULT_TAU):
        super().__init__()
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()


@dataclass
class PairBatch:
    """Row i of every field belongs to the same identity."""

    speech_embeds: torch.Tensor
    face_embeds: torch.Tensor
    images: torch.Tensor | None = None

    def __post_init__(self):
        if self.speech_embeds.shape[0] != self.face_embeds.shape[0]:
            raise ContractError("speech and face sides have different batch sizes")
        if self.images is not None and self.images.shape[0] != self.face_embeds.shape[0]:
            raise ContractError("images and embeddings have different batch sizes")


def _normalize(x: torch.Tensor, side: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if torch.any(norms == 0):
        raise NumericError(f"zero-norm {side} embedding cannot be normalised")
    return x / norms


def contrastive_loss(batch: PairBatch, temp: Temperature | torch.Tensor | float,
                     allow_single: bool = False) -> torch.Tensor:
    """Symmetric cross-entropy over the cosine-similarity matrix scaled by 1/tau."""
    b = batch.speech_embeds.shape[0]
    if b < 2 and not allow_single:
        raise UsageError("contrastive loss needs at least two pairs")
    tau = temp.tau if isinstance(temp, Temperature) else torch.as_tensor(temp)
    s = _normalize(batch.speech_embeds, "speech")
    f = _normalize(batch.face_embeds, "face")
    logits = s @ f.T / tau
    labels = torch.arange(b)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def reconstruction_loss(original: torch.Tensor, reconstructed: torch.Tensor,
                        perceptual: FeatureExtractor) -> torch.Tensor:
    """Mean absolute error plus perceptual feature distance."""
    if original.shape != reconstructed.shape:
        raise ContractError(f"image shapes differ: {tuple(original.shape)} vs {tuple(reconstructed.shape)}")
    return (original - reconstructed).abs().mean() + perceptual_distance(original, reconstructed, perceptual)


def conre_terms(batch: PairBatch, temp, decoder: nn.Module, perceptual: FeatureExtractor,
                weights: tuple[float, float] = (1.0, 1.0), allow_single: bool = False) -> dict[str, torch.Tensor]:
    if batch.images is None:
        raise UsageError("ConRe needs the face images for the reconstruction term")
    lc = contrastive_loss(batch, temp, allow_single=allow_single)
    lr = reconstruction_loss(batch.images, decoder(batch.face_embeds), perceptual)
    return {"contrastive": lc, "reconstruction": lr, "total": weights[0] * lc + weights[1] * lr}


def conre_loss(batch: PairBatch, temp, decoder: nn.Module, perceptual: FeatureExtractor,
               weights: tuple[float, float] = (1.0, 1.0), allow_single: bool = False) -> torch.Tensor:
    return conre_terms(batch, temp, decoder, perceptual, weights, allow_single)["total"]


class ConReModel(nn.Module):
    def __init__(self, n_bins: int, image_size: int = 64, dim: int = 128, speech_channels: int = 64,
                 face_width: int = 16, tau: float = DEFAULT_TAU):
        super().__init__()
        self.speech_encoder = SpeechEncoder(n_bins, dim, speech_channels)
        self.face_encoder = FaceEncoder(image_size, dim, face_width)
        self.face_decoder = FaceDecoder(image_size, dim, face_width)
        self.temperature = Temperature(tau)

    def config(self) -> dict:
        return {"n_bins": self.speech_encoder.n_bins, "image_size": self.face_encoder.image_size,
                "dim": self.face_encoder.dim, "speech_channels": self.speech_encoder.channels,
                "face_width": self.face_encoder.width}

    def batch(self, spectrograms: torch.Tensor, images: torch.Tensor) -> PairBatch:
        return PairBatch(self.speech_encoder(spectrograms), self.face_encoder(images), images)


def train_conre(model: ConReModel, spectrograms: torch.Tensor, images: torch.Tensor, steps: int,
                perceptual: FeatureExtractor, batch_size: int = 16, seed: int = 0,
                face_lr: float = 1e-4, speech_lr: float = 1e-3) -> list[float]:
    """Adam with separate learning rates for the face autoencoder and the speech side."""
    n = len(images)
    if n < 2:
        raise UsageError("need at least two pairs to pretrain")
    torch.manual_seed(seed)
    g = generator(seed, "conre-train")
    opt = torch.optim.Adam([
        {"params": list(model.face_encoder.parameters()) + list(model.face_decoder.parameters()), "lr": face_lr},
        {"params": list(model.speech_encoder.parameters()) + [model.temperature.log_tau], "lr": speech_lr},
    ])
    losses = []
    for step in range(steps):
        idx = torch.randperm(n, generator=g)[:min(batch_size, n)]
        loss = conre_loss(model.batch(spectrograms[idx], images[idx]), model.temperature,
                          model.face_decoder, perceptual)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if not np.isfinite(losses[-1]):
            raise NumericError(f"ConRe loss non-finite at step {step}")
    return losses


@torch.no_grad()
def alignment_margin(model: ConReModel, spectrograms: torch.Tensor, images: torch.Tensor) -> float:
    """Mean matched-pair cosine similarity minus mean mismatched-pair similarity."""
    s = F.normalize(model.speech_encoder(spectrograms), dim=-1)
    f = F.normalize(model.face_encoder(images), dim=-1)
    sim = s @ f.T
    n = len(sim)
    matched = sim.diag().mean()
    mismatched = (sim.sum() - sim.diag().sum()) / (n * n - n)
    return float(matched - mismatched)
