"""Codebook quantization of latent maps and the high-resolution decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ContractError, NumericError, UsageError
from .ops import generator

DEFAULT_CODES = 256
DEFAULT_CODE_DIM = 64
COMMITMENT_WEIGHT = 0.25


class Codebook(nn.Module):
    def __init__(self, n_codes: int = DEFAULT_CODES, dim: int = DEFAULT_CODE_DIM, seed: int = 0):
        super().__init__()
        if n_codes < 1:
            raise UsageError("codebook needs at least one entry")
        g = generator(seed, "codebook")
        init = (torch.rand(n_codes, dim, generator=g) * 2 - 1) / n_codes
        self.entries = nn.Parameter(init)

    @property
    def n_codes(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def check(self) -> None:
        if not torch.isfinite(self.entries).all():
            raise NumericError("codebook entries became non-finite")


@dataclass
class QuantizedLatent:
    """Channels-last quantized grid.

    ``values`` equals the selected codewords exactly in the forward pass and
    routes gradients straight through to the input latent. ``codewords`` is the
    plain lookup, whose gradient reaches the codebook.
    """

    indices: torch.Tensor
    values: torch.Tensor
    codewords: torch.Tensor

    def channels_first(self) -> torch.Tensor:
        return self.values.movedim(-1, 1)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, zq):
        return zq.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def nearest_codes(z: torch.Tensor, entries: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Exhaustive argmin of squared distance in float64; ties go to the lowest index."""
    flat = z.detach().reshape(-1, z.shape[-1]).to(torch.float64)
    book = entries.detach().to(torch.float64)
    out = torch.empty(flat.shape[0], dtype=torch.long)
    for lo in range(0, flat.shape[0], chunk):
        d = ((flat[lo:lo + chunk, None, :] - book[None]) ** 2).sum(-1)
        out[lo:lo + chunk] = d.argmin(dim=1)
    return out.view(z.shape[:-1])


def quantize(z: torch.Tensor, book: Codebook | torch.Tensor) -> QuantizedLatent:
    """Map each channels-last pixel of ``z`` to its nearest codeword."""
    entries = book.entries if isinstance(book, Codebook) else book
    if entries.shape[0] == 0:
        raise UsageError("cannot quantize against an empty codebook")
    if z.shape[-1] != entries.shape[1]:
        raise ContractError(f"latent width {z.shape[-1]} != codeword width {entries.shape[1]}")
    idx = nearest_codes(z, entries)
    codewords = entries[idx].to(z.dtype)
    return QuantizedLatent(idx, _StraightThrough.apply(z, codewords), codewords)


def quantize_map(z: torch.Tensor, book: Codebook | torch.Tensor) -> QuantizedLatent:
    """``quantize`` for a channels-first (B, C, H, W) latent map."""
    return quantize(z.movedim(1, -1), book)


def code_loss(z: torch.Tensor, zq: torch.Tensor, commitment_weight: float = COMMITMENT_WEIGHT) -> torch.Tensor:
    """Codebook term plus weighted commitment term, each a mean squared distance.

    Pass the plain ``QuantizedLatent.codewords`` as ``zq`` so the first term
    updates the codebook.
    """
    if commitment_weight < 0:
        raise UsageError(f"commitment weight must be non-negative, got {commitment_weight}")
    if z.shape != zq.shape:
        raise ContractError(f"latent {tuple(z.shape)} and codewords {tuple(zq.shape)} differ in shape")
    codebook_term = ((z.detach() - zq) ** 2).mean()
    if commitment_weight == 0:
        return codebook_term
    return codebook_term + commitment_weight * ((z - zq.detach()) ** 2).mean()


class HRDecoder(nn.Module):
    """Conv decoder with nearest-neighbour upsampling; sigmoid output in [0, 1].

    A zero latent through a zero-bias decoder yields a constant 0.5 image.
    """

    def __init__(self, latent_channels: int = DEFAULT_CODE_DIM, width: int = 32, upsample: int = 4):
        super().__init__()
        n_up = int(round(np.log2(upsample)))
        if 2**n_up != upsample or not 1 <= n_up <= 2:
            raise ContractError(f"upsample factor must be 2 or 4, got {upsample}")
        self.latent_channels, self.width, self.upsample = latent_channels, width, upsample
        layers = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_up):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
        layers.append(nn.Conv2d(width, 3, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def config(self) -> dict:
        return {"latent_channels": self.latent_channels, "width": self.width, "upsample": self.upsample}

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ContractError(f"decoder expects (B, {self.latent_channels}, H, W), got {tuple(z.shape)}")
        return torch.sigmoid(self.net(z))


def decode_hr(zq: QuantizedLatent | torch.Tensor, decoder: HRDecoder) -> torch.Tensor:
    z = zq.channels_first() if isinstance(zq, QuantizedLatent) else zq
    return decoder(z)


def train_codebook(encoder: nn.Module, book: Codebook, decoder: HRDecoder, frames: torch.Tensor, steps: int,
                   lr: float = 1e-3, batch: int = 8, commitment_weight: float = COMMITMENT_WEIGHT,
                   train_encoder: bool = False, seed: int = 0) -> list[float]:
    """Fine-tune codebook and decoder to reconstruct ``frames`` from quantized encoder latents.

    The encoder stays frozen unless ``train_encoder`` is set.
    """
    torch.manual_seed(seed)
    g = generator(seed, "codebook-train")
    params = list(book.parameters()) + list(decoder.parameters())
    if train_encoder:
        params += list(encoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    for step in range(steps):
        idx = torch.randint(0, len(frames), (min(batch, len(frames)),), generator=g)
        images = frames[idx]
        if train_encoder:
            z = encoder(images)
        else:
            with torch.no_grad():
                z = encoder(images)
        q = quantize_map(z, book)
        recon = decode_hr(q, decoder)
        if recon.shape != images.shape:
            recon = F.interpolate(recon, size=images.shape[-2:], mode="area")
        loss = (recon - images).abs().mean() + code_loss(z.movedim(1, -1), q.codewords, commitment_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        book.check()
        losses.append(loss.item())
        if not np.isfinite(losses[-1]):
            raise NumericError(f"codebook fine-tune loss non-finite at step {step}")
    return losses
