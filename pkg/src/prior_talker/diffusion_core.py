"""Conditional denoising diffusion shared by portrait and motion diffusion.

The forward process is the literal linear blend

    z_t = alpha_t * z_0 + (1 - alpha_t) * eps

with ``alpha_0 = 1``. ``denoised_estimate`` is its exact algebraic inverse. A
variance-preserving family (sqrt(alpha_t), sqrt(1 - alpha_t)) is available for
comparison via ``NoiseSchedule.family = "vp"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
import torch
from torch import nn

from .errors import ContractError, NumericError, RangeError, SingularityError
from .ops import generator, timestep_embedding

Family = Literal["literal", "vp"]


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    alphas: tuple[float, ...]
    family: Family = "literal"

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        if self.num_steps < 1 or a.shape != (self.num_steps + 1,):
            raise ContractError(f"need num_steps+1={self.num_steps + 1} alphas, got {a.shape}")
        if a[0] != 1.0:
            raise ContractError("alpha at t=0 must be exactly 1")
        if np.any(a < 0) or np.any(a > 1) or np.any(np.diff(a) > 0):
            raise ContractError("alphas must lie in [0, 1] and be non-increasing")
        if a[-1] > 0.01:
            raise ContractError(f"alpha_T={a[-1]:.4g} leaves too much signal (must be <= 0.01)")
        if self.family not in ("literal", "vp"):
            raise ContractError(f"unknown schedule family {self.family!r}")

    @classmethod
    def linear(cls, num_steps: int = 50, start: float = 1.0, end: float = 0.005,
               family: Family = "literal") -> "NoiseSchedule":
        """Linear ramp from ``start`` at t=0 to ``end`` at t=T (alpha_0 pinned to 1)."""
        alphas = np.linspace(start, end, num_steps + 1)
        alphas[0] = 1.0
        return cls(num_steps, tuple(float(x) for x in alphas), family)

    @property
    def T(self) -> int:
        return self.num_steps

    def alpha(self, t: int) -> float:
        self.check_t(t)
        return self.alphas[t]

    def check_t(self, t) -> None:
        ts = np.atleast_1d(np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t))
        if ts.size and (ts.min() < 0 or ts.max() > self.num_steps):
            raise RangeError(f"timestep out of [0, {self.num_steps}]: {ts.min()}..{ts.max()}")

    def coefficients(self, t) -> tuple[torch.Tensor, torch.Tensor]:
        """Signal and noise multipliers (a, b) so that z_t = a*z0 + b*eps."""
        self.check_t(t)
        table = torch.tensor(self.alphas, dtype=torch.float64)
        alpha = table[torch.as_tensor(t, dtype=torch.long)]
        if self.family == "vp":
            return alpha.sqrt(), (1 - alpha).sqrt()
        return alpha, 1 - alpha

    def to_meta(self) -> dict:
        return {"num_steps": self.num_steps, "alphas": list(self.alphas), "family": self.family}

    @classmethod
    def from_meta(cls, meta: dict) -> "NoiseSchedule":
        return cls(int(meta["num_steps"]), tuple(meta["alphas"]), meta.get("family", "literal"))


@dataclass
class LatentState:
    tensor: torch.Tensor
    timestep: int
    schedule: NoiseSchedule

    def __post_init__(self):
        self.schedule.check_t(self.timestep)


@dataclass
class Condition:
    embedding: torch.Tensor | None
    kind: Literal["speech", "none"] = "speech"

    def __post_init__(self):
        if self.kind == "none":
            self.embedding = None
        elif self.embedding is None:
            raise ContractError("speech condition needs an embedding")


def _broadcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    if coef.dim() == 0:
        return coef
    return coef.view(-1, *([1] * (like.dim() - 1)))


def forward_noise(z0: torch.Tensor, t, schedule: NoiseSchedule, eps: torch.Tensor) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise ContractError(f"latent {tuple(z0.shape)} and noise {tuple(eps.shape)} differ in shape")
    a, b = schedule.coefficients(t)
    return _broadcast(a, z0) * z0 + _broadcast(b, z0) * eps


def denoised_estimate(zt: LatentState, eps_pred: torch.Tensor) -> torch.Tensor:
    if zt.tensor.shape != eps_pred.shape:
        raise ContractError(f"latent {tuple(zt.tensor.shape)} and noise {tuple(eps_pred.shape)} differ in shape")
    a, b = zt.schedule.coefficients(zt.timestep)
    if torch.any(a == 0):
        raise SingularityError(f"alpha is 0 at t={zt.timestep}; the clean latent is not recoverable")
    a = _broadcast(a, zt.tensor)
    b = _broadcast(b, zt.tensor)
    return (zt.tensor - b * eps_pred) / a


class MLPDenoiser(nn.Module):
    """Residual MLP noise predictor eps_theta(cond, z_t, t) over flattened latents."""

    def __init__(self, latent_shape, condition_dim: int = 0, hidden: int = 128,
                 n_blocks: int = 2, time_dim: int = 32):
        super().__init__()
        self.latent_shape = tuple(int(s) for s in np.atleast_1d(latent_shape))
        self.condition_dim = int(condition_dim)
        self.time_dim = time_dim
        self.hidden = hidden
        self.n_blocks = n_blocks
        n = int(np.prod(self.latent_shape))
        self.inp = nn.Linear(n + condition_dim + time_dim, hidden)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
            for _ in range(n_blocks)
        )
        self.out = nn.Sequential(nn.SiLU(), nn.Linear(hidden, n))

    def config(self) -> dict:
        return {"latent_shape": list(self.latent_shape), "condition_dim": self.condition_dim,
                "hidden": self.hidden, "n_blocks": self.n_blocks, "time_dim": self.time_dim}

    def forward(self, zt: torch.Tensor, t: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        b = zt.shape[0]
        parts = [zt.reshape(b, -1), timestep_embedding(t.expand(b) if t.dim() == 0 else t, self.time_dim).to(zt.dtype)]
        if self.condition_dim:
            if cond is None or cond.shape != (b, self.condition_dim):
                got = None if cond is None else tuple(cond.shape)
                raise ContractError(f"denoiser expects condition of shape {(b, self.condition_dim)}, got {got}")
            parts.insert(1, cond)
        h = self.inp(torch.cat(parts, dim=-1))
        for block in self.blocks:
            h = h + block(h)
        return self.out(h).view(zt.shape)


Denoiser = Callable[[torch.Tensor, torch.Tensor, "torch.Tensor | None"], torch.Tensor]


def _cond_tensor(cond) -> torch.Tensor | None:
    if isinstance(cond, Condition):
        return cond.embedding
    return cond


def _timesteps(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    return t.expand(batch).clone() if t.dim() == 0 else t


def noise_prediction_loss(model: Denoiser, cond, zt: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the true noise and the model's prediction at z_t."""
    pred = model(zt, _timesteps(t, zt.shape[0]), _cond_tensor(cond))
    if not torch.isfinite(pred).all():
        bad = (~torch.isfinite(pred)).sum().item()
        raise NumericError(f"denoiser produced {bad} non-finite values at t={t}")
    return ((eps - pred) ** 2).mean()


def ldm_loss(model: Denoiser, cond, z0: torch.Tensor, t, eps: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    zt = forward_noise(z0, t, schedule, eps)
    return noise_prediction_loss(model, cond, zt, t, eps)


@torch.no_grad()
def sample(model: Denoiser, cond, init: torch.Tensor | None, schedule: NoiseSchedule,
           rng_seed: int = 0, shape=None) -> torch.Tensor:
    """Deterministic sampler from t=T down to 0.

    Each step forms the clean estimate and re-blends it at t-1 with the
    predicted noise, so no fresh randomness enters after ``init``. When ``init``
    is None it is drawn from N(0, I) with ``rng_seed``.
    """
    if init is None:
        if shape is None:
            raise ContractError("need either init or shape")
        init = torch.randn(shape, generator=generator(rng_seed), dtype=torch.float32)
    c = _cond_tensor(cond)
    z = init
    batch = z.shape[0]
    for t in range(schedule.T, 0, -1):
        eps_pred = model(z, _timesteps(t, batch), c)
        z0_hat = denoised_estimate(LatentState(z, t, schedule), eps_pred)
        z = forward_noise(z0_hat, t - 1, schedule, eps_pred).to(init.dtype)
        if not torch.isfinite(z).all():
            raise NumericError(f"non-finite latent while sampling at t={t}")
    return z


def train_denoiser(model: nn.Module, data: Callable[[torch.Generator], tuple], schedule: NoiseSchedule,
                   steps: int, lr: float = 1e-3, seed: int = 0,
                   loss_fn: Callable | None = None, params=None) -> list[float]:
    """Generic Adam loop. ``data(gen)`` returns (cond, z0) batches; t and eps are drawn here."""
    torch.manual_seed(seed)
    g = generator(seed, "train")
    opt = torch.optim.Adam(params if params is not None else model.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        cond, z0 = data(g)
        t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=g)
        eps = torch.randn(z0.shape, generator=g, dtype=z0.dtype)
        loss = (loss_fn or ldm_loss)(model, cond, z0, t, eps, schedule)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if not math.isfinite(losses[-1]):
            raise NumericError(f"training loss became non-finite at step {len(losses)}")
    return losses
