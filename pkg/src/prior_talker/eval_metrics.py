"""Evaluation metrics: embedding distances and retrieval, image quality, Frechet distance, temporal MAD, lip sync."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import CapabilityError, ContractError, NumericError, RangeError, SingularityError, UsageError
from .ops import bilinear_sample, generator
from .perceptual import FeatureExtractor, perceptual_distance

COSINE_SCALE = 100.0
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K = (0.01, 0.03)
EIG_TOLERANCE = 1e-8
REPORT_VERSION = 1
UNAVAILABLE = "unavailable"


def _vec(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    """Rows scaled to unit length; None marks rows that are exactly zero."""
    # rescale by the largest entry first so tiny but nonzero vectors do not underflow in the norm
    scale = np.abs(x).max(axis=-1, keepdims=True, initial=0.0)
    if np.any(scale == 0):
        return None
    x = x / scale
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def cosine_distance(a, b) -> float:
    """(1 - cos similarity) * 100."""
    a, b = _unit_rows(_vec(a)), _unit_rows(_vec(b))
    if a is None or b is None:
        raise SingularityError("cosine distance is undefined for a zero vector")
    return float((1.0 - np.dot(a, b)) * COSINE_SCALE)


def feature_distances(a, b) -> tuple[float, float, float]:
    """(L1, L2, scaled cosine distance) between two embeddings."""
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise ContractError(f"embedding sizes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.abs(d).sum()), float(np.sqrt((d * d).sum())), cosine_distance(a, b)


@dataclass
class EmbeddingGallery:
    ids: list
    vectors: np.ndarray

    def __post_init__(self):
        self.ids = list(self.ids)
        self.vectors = np.asarray(
            self.vectors.detach().cpu().numpy() if isinstance(self.vectors, torch.Tensor) else self.vectors,
            dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.ids) != self.vectors.shape[0]:
            raise ContractError(f"need one vector per id: {len(self.ids)} ids, vectors {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("gallery ids must be unique")
        self._unit = _unit_rows(self.vectors)
        if self._unit is None:
            raise SingularityError("gallery contains a zero vector")

    def __len__(self) -> int:
        return len(self.ids)

    def ranking(self, query) -> list:
        """Gallery ids by ascending cosine distance to ``query``; equal distances keep id order."""
        q = _vec(query)
        if q.shape[0] != self.vectors.shape[1]:
            raise ContractError(f"query has {q.shape[0]} dims, gallery has {self.vectors.shape[1]}")
        q = _unit_rows(q)
        if q is None:
            raise SingularityError("query is a zero vector")
        dist = 1.0 - self._unit @ q
        order = sorted(range(len(self.ids)), key=lambda i: (dist[i], self.ids[i]))
        return [self.ids[i] for i in order]


def recall_at_k(query, gallery: EmbeddingGallery, true_id, ks: Sequence[int] = (1, 2, 5)) -> dict[int, bool]:
    if true_id not in gallery.ids:
        raise UsageError(f"true id {true_id!r} is not in the gallery")
    if any(k < 1 for k in ks):
        raise UsageError("k must be >= 1")
    rank = gallery.ranking(query).index(true_id)
    return {k: rank < k for k in ks}


def recall_rates(queries, true_ids: Sequence, gallery: EmbeddingGallery,
                 ks: Sequence[int] = (1, 2, 5)) -> dict[int, float]:
    """Fraction of queries whose true id is in the top k, per k."""
    hits = [recall_at_k(q, gallery, i, ks) for q, i in zip(queries, true_ids)]
    if not hits:
        raise UsageError("no queries")
    return {k: sum(h[k] for h in hits) / len(hits) for k in ks}


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x).double()
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    if x.dim() == 4:
        return x
    raise ContractError(f"expected an (H, W), (C, H, W) or (B, C, H, W) image, got {tuple(x.shape)}")


def _check_pair(ref, gen) -> tuple[torch.Tensor, torch.Tensor]:
    a, b = _as_batch(ref), _as_batch(gen)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    for x in (a, b):
        if x.numel() and (x.min() < 0 or x.max() > 1):
            raise RangeError("images must lie in [0, 1]")
    return a, b


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(ref, gen, data_range: float = 1.0) -> float:
    """Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5), valid positions only."""
    a, b = _check_pair(ref, gen)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ContractError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    c = a.shape[1]
    g = gaussian_window()
    kx = g.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    ky = g.view(1, 1, -1, 1).repeat(c, 1, 1, 1)

    def blur(x):
        return F.conv2d(F.conv2d(x, kx, groups=c), ky, groups=c)

    c1 = (SSIM_K[0] * data_range) ** 2
    c2 = (SSIM_K[1] * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return s.mean().item()


def psnr(ref, gen, data_range: float = 1.0) -> float:
    """PSNR in dB, capped at 100 for identical inputs."""
    a, b = torch.as_tensor(ref).detach().double(), torch.as_tensor(gen).detach().double()
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = F.mse_loss(a, b).item()
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(data_range ** 2 / mse))


def image_quality(ref, gen, perceptual: FeatureExtractor) -> tuple[float, float, float]:
    """(SSIM, PSNR, perceptual distance) for images in [0, 1]."""
    a, b = _check_pair(ref, gen)
    with torch.no_grad():
        dist = perceptual_distance(a.float(), b.float(), perceptual).item()
    return ssim(a, b), psnr(a, b), dist


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    if vals.min() < -EIG_TOLERANCE * max(1.0, abs(vals).max()):
        raise NumericError(f"matrix is not positive semi-definite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def gaussian_fit(feats, shrinkage: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(feats.detach().cpu().numpy() if isinstance(feats, torch.Tensor) else feats, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < 2:
        raise SingularityError("need at least two samples to fit a covariance")
    if n < d + 1 and shrinkage == 0:
        raise SingularityError(f"{n} samples cannot give a full-rank {d}x{d} covariance; set shrinkage > 0")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    if shrinkage:
        cov = (1 - shrinkage) * cov + shrinkage * np.trace(cov) / d * np.eye(d)
    return mu, cov


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    s1 = _psd_sqrt(cov1)
    cross = _psd_sqrt(s1 @ cov2 @ s1)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(cross))
    return max(value, 0.0)


def fid_like(real_feats, gen_feats, shrinkage: float = 0.0) -> float:
    """Frechet distance between Gaussian fits of two (n, d) feature sets."""
    mu1, c1 = gaussian_fit(real_feats, shrinkage)
    mu2, c2 = gaussian_fit(gen_feats, shrinkage)
    if mu1.shape != mu2.shape:
        raise ContractError(f"feature widths differ: {mu1.shape[0]} vs {mu2.shape[0]}")
    return frechet_distance(mu1, c1, mu2, c2)


def pooled_features(images: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """(B, sum of channels) global-average-pooled features from every extractor layer."""
    with torch.no_grad():
        return torch.cat([f.mean(dim=(2, 3)) for f in extractor(images.float())], dim=1).double()


FlowProvider = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class ZeroFlow:
    def __call__(self, prev: torch.Tensor, nxt: torch.Tensor) -> torch.Tensor:
        return torch.zeros(2, *prev.shape[-2:], dtype=torch.float64)


class GlobalShiftFlow:
    """Constant integer flow from phase correlation; suits global translations."""

    def __call__(self, prev: torch.Tensor, nxt: torch.Tensor) -> torch.Tensor:
        a = prev.double().reshape(-1, *prev.shape[-2:]).mean(dim=0).numpy()
        b = nxt.double().reshape(-1, *nxt.shape[-2:]).mean(dim=0).numpy()
        cross = np.fft.fft2(b) * np.conj(np.fft.fft2(a))
        corr = np.real(np.fft.ifft2(cross / np.maximum(np.abs(cross), 1e-12)))
        dy, dx = np.unravel_index(np.argmax(corr), corr.shape)
        h, w = corr.shape
        dy = dy - h if dy > h // 2 else dy
        dx = dx - w if dx > w // 2 else dx
        flow = torch.zeros(2, h, w, dtype=torch.float64)
        flow[0], flow[1] = float(dx), float(dy)
        return flow


def warp_to_next(prev: torch.Tensor, flow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Move ``prev`` (C, H, W) along ``flow`` (2, H, W; content motion in px, x then y).

    Returns the warped frame and a mask of pixels whose source lies inside the frame.
    """
    h, w = prev.shape[-2:]
    back = -flow.double()
    warped = bilinear_sample(prev.double()[None], back[None])[0]
    ys = torch.arange(h, dtype=torch.float64).view(h, 1)
    xs = torch.arange(w, dtype=torch.float64).view(1, w)
    sx, sy = xs + back[0], ys + back[1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    return warped, valid


def temporal_mad(frames, flow_provider: FlowProvider) -> float:
    """Mean |warped(t) - frame(t+1)| over valid pixels, averaged over consecutive pairs."""
    x = torch.as_tensor(np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames).double()
    if x.dim() == 3:
        x = x[:, None]
    if x.dim() != 4:
        raise ContractError(f"expected (N, H, W) or (N, C, H, W) frames, got {tuple(x.shape)}")
    if x.shape[0] < 2:
        raise UsageError("temporal MAD needs at least two frames")
    if x.min() < 0 or x.max() > 1:
        raise RangeError("frames must lie in [0, 1]")
    per_pair = []
    for prev, nxt in zip(x[:-1], x[1:]):
        warped, valid = warp_to_next(prev, flow_provider(prev, nxt))
        if not valid.any():
            raise NumericError("flow leaves no valid pixels")
        diff = (warped - nxt).abs()[:, valid]
        per_pair.append(diff.mean().item())
    return float(np.mean(per_pair))


class SyncScorer(Protocol):
    def __call__(self, frames: torch.Tensor, audio: torch.Tensor) -> tuple[float, float]: ...


class ToySyncScorer(nn.Module):
    """Tiny contrastive audio-visual model trained on synthetic clips.

    Frames and per-frame audio features are embedded onto the unit sphere. LSE-D
    is the mean embedding distance at zero offset; LSE-C is the median minus the
    minimum of the mean distance over offsets in [-max_offset, max_offset].
    """

    def __init__(self, image_size: int, audio_dim: int, dim: int = 16, hidden: int = 64,
                 max_offset: int = 8, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.max_offset = max_offset
        self.visual = nn.Sequential(nn.Flatten(), nn.Linear(3 * image_size * image_size, hidden), nn.SiLU(),
                                    nn.Linear(hidden, dim))
        self.audio = nn.Sequential(nn.Linear(audio_dim, hidden), nn.SiLU(), nn.Linear(hidden, dim))

    def embed(self, frames: torch.Tensor, audio: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return F.normalize(self.visual(frames), dim=-1), F.normalize(self.audio(audio), dim=-1)

    def fit(self, frames: torch.Tensor, audio: torch.Tensor, steps: int = 300, batch: int = 64,
            lr: float = 3e-3, tau: float = 0.1, seed: int = 0) -> list[float]:
        """Contrastive training on (C, N, 3, S, S) frames and (C, N, d) audio."""
        v = frames.reshape(-1, *frames.shape[2:])
        a = audio.reshape(-1, audio.shape[-1])
        g = generator(seed, "toy-sync-scorer")
        opt = torch.optim.Adam(self.parameters(), lr=lr)
        losses = []
        for _ in range(steps):
            idx = torch.randperm(len(v), generator=g)[:batch]
            ev, ea = self.embed(v[idx], a[idx])
            logits = ev @ ea.T / tau
            target = torch.arange(len(idx))
            loss = (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) / 2
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return losses

    @torch.no_grad()
    def forward(self, frames: torch.Tensor, audio: torch.Tensor) -> tuple[float, float]:
        if frames.shape[0] != audio.shape[0]:
            raise ContractError(f"{frames.shape[0]} frames but {audio.shape[0]} audio features")
        ev, ea = self.embed(frames, audio)
        n = len(ev)
        by_offset = []
        for off in range(-self.max_offset, self.max_offset + 1):
            lo, hi = max(0, -off), min(n, n - off)
            if hi - lo < 1:
                continue
            by_offset.append((ev[lo:hi] - ea[lo + off:hi + off]).norm(dim=-1).mean().item())
        lse_d = (ev - ea).norm(dim=-1).mean().item()
        return lse_d, float(np.median(by_offset) - np.min(by_offset))


def sync_score(frames: torch.Tensor, audio: torch.Tensor, scorer: SyncScorer | None) -> tuple[float, float]:
    """(LSE-D, LSE-C) from the injected scorer."""
    if scorer is None:
        raise CapabilityError("no lip-sync scorer available")
    return scorer(frames, audio)


@dataclass
class MetricReport:
    metrics: dict = field(default_factory=dict)
    capped: list = field(default_factory=list)
    dataset: str = ""
    model: str = ""
    timestamp: str = ""

    def add(self, name: str, value: float, capped: bool = False) -> None:
        if not math.isfinite(value):
            raise NumericError(f"metric {name} is not finite")
        self.metrics[name] = float(value)
        if capped and name not in self.capped:
            self.capped.append(name)

    def mark_unavailable(self, *names: str) -> None:
        for name in names:
            self.metrics[name] = UNAVAILABLE

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, "dataset": self.dataset, "model": self.model,
                "timestamp": self.timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
                "metrics": dict(self.metrics), "capped": list(self.capped)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricReport":
        if data.get("version") != REPORT_VERSION:
            raise ContractError(f"unsupported report version {data.get('version')!r}")
        return cls(dict(data["metrics"]), list(data.get("capped", [])), data.get("dataset", ""),
                   data.get("model", ""), data.get("timestamp", ""))
