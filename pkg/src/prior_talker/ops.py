"""Small shared tensor utilities."""

from __future__ import annotations

import hashlib
import math

import torch


def substream_seed(seed: int, name: str) -> int:
    """Derive an independent 63-bit seed for a named random substream."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def generator(seed: int, name: str | None = None) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed if name is None else substream_seed(seed, name))
    return g


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 1000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def bilinear_sample(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``src`` at ``base + flow`` with bilinear weights and border replication.

    src: (B, C, H, W). flow: (B, 2, H, W) in pixel units, channel 0 = x, 1 = y.
    A zero flow returns ``src`` bit-for-bit.
    """
    if src.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"expected (B,C,H,W) and (B,2,H,W), got {tuple(src.shape)} / {tuple(flow.shape)}")
    b, c, h, w = src.shape
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    x = (xs + flow[:, 0]).clamp(0, w - 1)
    y = (ys + flow[:, 1]).clamp(0, h - 1)
    x0 = x.detach().floor().clamp(max=w - 1)
    y0 = y.detach().floor().clamp(max=h - 1)
    fx = (x - x0).unsqueeze(1)
    fy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(b, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    top = gather(y0, x0) * (1 - fx) + gather(y0, x1) * fx
    bottom = gather(y1, x0) * (1 - fx) + gather(y1, x1) * fx
    return top * (1 - fy) + bottom * fy
