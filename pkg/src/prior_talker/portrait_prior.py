"""Statistical face prior, sample-adaptive weighting and prior-guided portrait diffusion.

The prior is the mean face embedding over a gender-balanced pool. During
portrait diffusion the noise is shifted by ``beta * prior`` where
``beta`` is produced per sample by a linear map of the speech embedding and the
prior (SAW), a fixed vector (static baseline), or zero (unguided).
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
import torch
from torch import nn

from . import container
from .diffusion_core import (
    MLPDenoiser,
    NoiseSchedule,
    ldm_loss,
    sample,
)
from .errors import ContractError, NumericError, UsageError
from .ops import generator

DEFAULT_PRIOR_SIZE = 10_000
CONVERGENCE_GRID = (100, 500, 1000, 5000, 10000, 15000)
GENDER_RATIO_GRID = (1.0, 0.75, 0.5, 0.25, 0.0)
STATIC_BETA = 0.01


@dataclass
class FacePrior:
    vector: np.ndarray
    sample_count: int
    gender_ratio: float | None = None
    manifest: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.vector, dtype=dtype)


class PriorAccumulator:
    """Running mean with Kahan-compensated block sums in float64.

    Accumulators built on disjoint shards can be merged, which is how partial
    priors computed in parallel are combined.
    """

    _BLOCK = 256

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self.count = 0
        self.female = 0
        self.labelled = 0
        self.sources: list[str] = []
        self._sum = None
        self._comp = None

    def _kahan_add(self, value: np.ndarray) -> None:
        y = value - self._comp
        t = self._sum + y
        self._comp = (t - self._sum) - y
        self._sum = t

    def add(self, embeddings, genders=None, source: str | None = None) -> "PriorAccumulator":
        arr = np.asarray(embeddings, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None]
        if arr.ndim != 2:
            raise ContractError(f"embeddings must be vectors or a matrix, got shape {arr.shape}")
        if self.dim is None:
            self.dim = arr.shape[1]
        if arr.shape[1] != self.dim:
            raise ContractError(f"embedding dimension {arr.shape[1]} != prior dimension {self.dim}")
        if not np.isfinite(arr).all():
            raise NumericError("non-finite face embedding")
        if self._sum is None:
            self._sum = np.zeros(self.dim)
            self._comp = np.zeros(self.dim)
        for lo in range(0, len(arr), self._BLOCK):
            self._kahan_add(arr[lo:lo + self._BLOCK].sum(axis=0))
        self.count += len(arr)
        if genders is not None:
            g = np.atleast_1d(np.asarray(genders, dtype=np.float64))
            if g.shape != (len(arr),):
                raise ContractError("one gender label per embedding required")
            self.female += int(g.sum())
            self.labelled += len(g)
        if source is not None:
            self.sources.append(source)
        return self

    def merge(self, other: "PriorAccumulator") -> "PriorAccumulator":
        if other.count == 0:
            return self
        if self.dim is not None and other.dim != self.dim:
            raise ContractError(f"cannot merge priors of dimension {self.dim} and {other.dim}")
        if self._sum is None:
            self.dim = other.dim
            self._sum = np.zeros(self.dim)
            self._comp = np.zeros(self.dim)
        self._kahan_add(other._sum - other._comp)
        self.count += other.count
        self.female += other.female
        self.labelled += other.labelled
        self.sources.extend(other.sources)
        return self

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise UsageError("cannot compute a prior from zero embeddings")
        return (self._sum - self._comp) / self.count

    def result(self) -> FacePrior:
        ratio = self.female / self.labelled if self.labelled else None
        manifest = {
            "sample_count": self.count,
            "female_count": self.female,
            "labelled_count": self.labelled,
            "sources": list(self.sources),
        }
        return FacePrior(self.mean(), self.count, ratio, manifest)


def compute_prior(embeddings: Iterable, genders: Iterable | None = None) -> FacePrior:
    """Mean of a stream of embeddings (vectors or row blocks)."""
    acc = PriorAccumulator()
    gen_iter = iter(genders) if genders is not None else None
    for item in embeddings:
        acc.add(item, None if gen_iter is None else next(gen_iter))
    return acc.result()


def embedding_digest(embeddings) -> str:
    arr = np.ascontiguousarray(np.asarray(embeddings, dtype="<f8"))
    return hashlib.sha256(arr.tobytes()).hexdigest()


def verify_prior(prior: FacePrior, embeddings, atol: float = 1e-9) -> bool:
    """Recompute the mean from the contributing embeddings and compare."""
    arr = np.asarray(embeddings, dtype=np.float64)
    if len(arr) != prior.sample_count:
        return False
    return bool(np.allclose(arr.mean(axis=0), prior.vector, rtol=0, atol=atol))


def save_prior(path, prior: FacePrior):
    meta = {"kind": "face_prior", "sample_count": prior.sample_count,
            "gender_ratio": prior.gender_ratio, "manifest": prior.manifest}
    # float32 storage loses precision, so the float64 sum is kept as hi/lo halves
    hi = prior.vector.astype(np.float32)
    lo = (prior.vector - hi.astype(np.float64)).astype(np.float32)
    return container.save(path, {"prior": hi, "prior_residual": lo}, meta)


def load_prior(path) -> FacePrior:
    tensors, meta = container.load(path)
    if meta.get("kind") != "face_prior":
        raise container.CheckpointError(f"{path}: not a face prior container")
    vec = tensors["prior"].astype(np.float64) + tensors.get("prior_residual", 0.0)
    return FacePrior(vec, int(meta["sample_count"]), meta.get("gender_ratio"), meta.get("manifest", {}))


def _l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).sum())


def prior_convergence_curve(embeddings, checkpoints: Sequence[int] = CONVERGENCE_GRID,
                            n_shuffles: int = 1, seed: int = 0) -> list[tuple[int, float]]:
    """L1 distance between priors computed on successive prefix sizes.

    Returns ``(N_i, |prior(N_i) - prior(N_{i-1})|_1)`` for each consecutive pair
    of checkpoints. With ``n_shuffles > 1`` the pool order is re-drawn that many
    times and the distances averaged; ``n_shuffles=1`` uses the given order.
    """
    arr = np.asarray(embeddings, dtype=np.float64)
    cps = list(checkpoints)
    if len(cps) < 2 or any(b <= a for a, b in zip(cps, cps[1:])) or cps[0] < 1:
        raise UsageError(f"checkpoints must be positive and strictly increasing: {cps}")
    if cps[-1] > len(arr):
        raise UsageError(f"checkpoint {cps[-1]} exceeds the {len(arr)} available embeddings")
    rng = np.random.default_rng(seed)
    totals = np.zeros(len(cps) - 1)
    for k in range(n_shuffles):
        order = np.arange(len(arr)) if k == 0 and n_shuffles == 1 else rng.permutation(len(arr))
        acc = PriorAccumulator(arr.shape[1])
        priors = []
        done = 0
        for n in cps:
            acc.add(arr[order[done:n]])
            done = n
            priors.append(acc.mean())
        totals += [_l1(b, a) for a, b in zip(priors, priors[1:])]
    totals /= n_shuffles
    return [(n, float(d)) for n, d in zip(cps[1:], totals)]


def gender_ratio_study(embeddings, genders, ratios: Sequence[float] = GENDER_RATIO_GRID,
                       n: int = DEFAULT_PRIOR_SIZE, seed: int = 0) -> list[tuple[float, float]]:
    """L1 distance from the balanced (0.5) prior for subsets of varying female ratio.

    ``genders`` holds 1 for female and 0 for male. Subsets are nested prefixes of
    one shuffled order per gender so that only the mixture proportion varies.
    """
    arr = np.asarray(embeddings, dtype=np.float64)
    g = np.asarray(genders).astype(int)
    if g.shape != (len(arr),):
        raise ContractError("one gender label per embedding required")
    rng = np.random.default_rng(seed)
    female = rng.permutation(np.flatnonzero(g == 1))
    male = rng.permutation(np.flatnonzero(g == 0))

    def subset_prior(r: float) -> np.ndarray:
        nf = int(round(r * n))
        nm = n - nf
        if nf > len(female) or nm > len(male):
            raise UsageError(f"ratio {r} needs {nf} female / {nm} male embeddings; pool has "
                             f"{len(female)} / {len(male)}")
        acc = PriorAccumulator(arr.shape[1])
        acc.add(arr[female[:nf]]).add(arr[male[:nm]])
        return acc.mean()

    reference = subset_prior(0.5)
    return [(float(r), 0.0 if r == 0.5 else _l1(subset_prior(r), reference)) for r in ratios]


class SampleAdaptiveWeighting(nn.Module):
    """beta = W_s z_s + W_p z_p + b, a raw linear gate (no normalisation)."""

    def __init__(self, speech_dim: int, prior_dim: int, init_bias: float = STATIC_BETA,
                 init_std: float = 1e-3, seed: int | None = None):
        super().__init__()
        g = generator(seed) if seed is not None else None
        self.W_s = nn.Parameter(torch.randn(prior_dim, speech_dim, generator=g) * init_std)
        self.W_p = nn.Parameter(torch.randn(prior_dim, prior_dim, generator=g) * init_std)
        self.b = nn.Parameter(torch.full((prior_dim,), float(init_bias)))

    @property
    def speech_dim(self) -> int:
        return self.W_s.shape[1]

    @property
    def prior_dim(self) -> int:
        return self.W_p.shape[0]

    def forward(self, zs: torch.Tensor, zp: torch.Tensor) -> torch.Tensor:
        if zs.shape[-1] != self.speech_dim or zp.shape[-1] != self.prior_dim:
            raise ContractError(f"SAW expects speech dim {self.speech_dim} and prior dim {self.prior_dim}, "
                                f"got {zs.shape[-1]} and {zp.shape[-1]}")
        return zs @ self.W_s.T + zp @ self.W_p.T + self.b


def saw_weights(params: SampleAdaptiveWeighting, zs: torch.Tensor, zp) -> torch.Tensor:
    if isinstance(zp, FacePrior):
        zp = zp.tensor(zs.dtype)
    return params(zs, zp)


def prior_guided_noise(zp, beta: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if isinstance(zp, FacePrior):
        zp = zp.tensor(eps.dtype)
    if zp.shape[-1] != eps.shape[-1] or beta.shape[-1] != eps.shape[-1]:
        raise ContractError(f"prior {tuple(zp.shape)}, gate {tuple(beta.shape)} and noise "
                            f"{tuple(eps.shape)} are incompatible")
    return beta * zp + eps


def _gate(saw, zs: torch.Tensor, zp: torch.Tensor) -> torch.Tensor:
    if isinstance(saw, nn.Module):
        return saw(zs, zp)
    beta = torch.as_tensor(saw, dtype=zp.dtype)
    return beta.expand(zs.shape[0], zp.shape[-1]) if beta.dim() <= 1 else beta


def portrait_diffusion_loss(params, zs: torch.Tensor, z0: torch.Tensor, t, eps: torch.Tensor,
                            zp, saw, schedule: NoiseSchedule) -> torch.Tensor:
    """``ldm_loss`` with the noise replaced by its prior-shifted version.

    The noise component becomes ``beta * prior + eps`` both in the noised input
    and in the regression target, so the denoiser learns a diffusion whose
    terminal distribution is N(beta * prior, I). ``saw`` is a
    ``SampleAdaptiveWeighting`` module or a fixed gate (scalar or vector).
    """
    if isinstance(zp, FacePrior):
        zp = zp.tensor(z0.dtype)
    beta = _gate(saw, zs, zp)
    return ldm_loss(params, zs, z0, t, prior_guided_noise(zp, beta, eps), schedule)


Guidance = Literal["none", "static", "saw"]


class PortraitDiffusion(nn.Module):
    """Speech-conditioned denoiser over face embeddings plus its prior gate."""

    def __init__(self, prior: np.ndarray | torch.Tensor, speech_dim: int, guidance: Guidance = "saw",
                 schedule: NoiseSchedule | None = None, hidden: int = 128, n_blocks: int = 2,
                 static_beta: float = STATIC_BETA):
        super().__init__()
        prior = torch.as_tensor(np.asarray(prior), dtype=torch.float32)
        self.register_buffer("prior", prior)
        self.guidance = guidance
        self.static_beta = static_beta
        self.schedule = schedule or NoiseSchedule.linear()
        d = prior.shape[0]
        self.denoiser = MLPDenoiser(d, speech_dim, hidden=hidden, n_blocks=n_blocks)
        self.saw = SampleAdaptiveWeighting(speech_dim, d) if guidance == "saw" else None

    @property
    def dim(self) -> int:
        return self.prior.shape[0]

    def config(self) -> dict:
        return {"guidance": self.guidance, "static_beta": self.static_beta,
                "speech_dim": self.denoiser.condition_dim, "hidden": self.denoiser.hidden,
                "n_blocks": self.denoiser.n_blocks, "schedule": self.schedule.to_meta()}

    def gate(self, zs: torch.Tensor) -> torch.Tensor:
        if self.guidance == "saw":
            return self.saw(zs, self.prior)
        value = self.static_beta if self.guidance == "static" else 0.0
        return torch.full((zs.shape[0], self.dim), value, dtype=zs.dtype)

    def loss(self, zs, z0, t, eps) -> torch.Tensor:
        return portrait_diffusion_loss(self.denoiser, zs, z0, t, eps, self.prior, self.gate(zs), self.schedule)

    @torch.no_grad()
    def sample(self, zs: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        """Denoise from ``beta * prior + eps``; returns the clean face embedding."""
        init = prior_guided_noise(self.prior, self.gate(zs), eps)
        return sample(self.denoiser, zs, init, self.schedule)


def train_portrait(model: PortraitDiffusion, zs: torch.Tensor, z0: torch.Tensor, steps: int,
                   batch: int = 64, lr: float = 1e-3, seed: int = 0) -> list[float]:
    torch.manual_seed(seed)
    g = generator(seed, "portrait-train")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    T = model.schedule.T
    losses = []
    for step in range(steps):
        idx = torch.randint(0, len(z0), (batch,), generator=g)
        t = torch.randint(1, T + 1, (batch,), generator=g)
        eps = torch.randn((batch, model.dim), generator=g)
        loss = model.loss(zs[idx], z0[idx], t, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if not np.isfinite(losses[-1]):
            raise NumericError(f"portrait diffusion loss non-finite at step {step}")
    return losses


def diversity_consistency_probe(model: PortraitDiffusion, zs: torch.Tensor, n_seeds: int,
                                target: torch.Tensor | None = None, seed: int = 0,
                                init_noise: torch.Tensor | None = None) -> tuple[float, float]:
    """Cross-seed diversity and distance-to-target of sampled embeddings.

    For every condition row of ``zs`` draws ``n_seeds`` samples. Diversity is the
    mean pairwise L2 distance between samples of the same condition; consistency
    is the mean L2 distance from each sample to that condition's ``target``
    (nan when no target is given). Passing ``init_noise`` (a single d-vector)
    freezes the starting noise for every seed.
    """
    if n_seeds < 2:
        raise UsageError("diversity needs at least two seeds")
    zs = torch.atleast_2d(zs)
    n_cond = zs.shape[0]
    if init_noise is not None:
        eps = init_noise.reshape(1, 1, -1).expand(n_seeds, n_cond, model.dim)
    else:
        eps = torch.randn((n_seeds, n_cond, model.dim), generator=generator(seed, "probe"))
    out = model.sample(zs.repeat(n_seeds, 1), eps.reshape(n_seeds * n_cond, -1)).view(n_seeds, n_cond, -1)
    pairs = list(itertools.combinations(range(n_seeds), 2))
    diversity = torch.stack([(out[i] - out[j]).norm(dim=-1) for i, j in pairs]).mean().item()
    if target is None:
        return diversity, float("nan")
    consistency = (out - torch.atleast_2d(target)[None]).norm(dim=-1).mean().item()
    return diversity, consistency
