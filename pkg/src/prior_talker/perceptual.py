"""Pluggable feature extractors for perceptual losses and metrics.

Any callable mapping an image batch (B, C, H, W) to a list of feature maps
satisfies the extractor contract. Pretrained VGG/AlexNet/Inception weights are
not shipped; a frozen random-conv stack stands in.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ContractError
from .ops import generator

FeatureExtractor = Callable[[torch.Tensor], Sequence[torch.Tensor]]


class IdentityExtractor:
    def __call__(self, images: torch.Tensor) -> list[torch.Tensor]:
        return [images]


class RandomConvExtractor(nn.Module):
    """Frozen stack of random 3x3 convs; each layer halves resolution after the first."""

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (8, 16), seed: int = 0):
        super().__init__()
        g = generator(seed, "random-conv-extractor")
        layers = []
        c = in_channels
        for w in widths:
            conv = nn.Conv2d(c, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (9 * c)) ** 0.5)
                conv.bias.copy_(torch.randn(w, generator=g) * 0.1)
            layers.append(conv)
            c = w
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = images
        for i, conv in enumerate(self.layers):
            if i:
                h = F.avg_pool2d(h, 2)
            h = F.silu(conv(h))
            feats.append(h)
        return feats


def _unit(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + eps)


def _features(a, b, extractor):
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = extractor(a), extractor(b)
    if len(fa) != len(fb):
        raise ContractError("extractor returned a different number of layers for the two inputs")
    return fa, fb


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """LPIPS-style distance without learned layer weights.

    Per layer: unit-normalise feature vectors over channels, take the squared L2
    difference over channels, average over batch and positions. Layers are summed.
    """
    fa, fb = _features(a, b, extractor)
    total = a.new_zeros(())
    for x, y in zip(fa, fb):
        total = total + ((_unit(x) - _unit(y)) ** 2).sum(dim=1).mean()
    return total


def feature_l1(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Sum over layers of the mean absolute feature difference."""
    fa, fb = _features(a, b, extractor)
    total = a.new_zeros(())
    for x, y in zip(fa, fb):
        total = total + (x - y).abs().mean()
    return total
