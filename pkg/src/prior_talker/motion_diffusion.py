"""Speech-conditioned diffusion over sequences of motion codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .diffusion_core import NoiseSchedule, ldm_loss, sample
from .errors import ContractError, NumericError, UsageError
from .ops import generator, timestep_embedding

FPS = 25
FRAME_MS = 1000 // FPS
SPEC_HOP_MS = 10
WINDOW = 32


@dataclass
class MotionSequence:
    frames: torch.Tensor
    fps: int = FPS

    def __post_init__(self):
        if self.frames.dim() != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"motion sequence must be (N >= 1, d), got {tuple(self.frames.shape)}")
        if not torch.isfinite(self.frames).all():
            raise NumericError("motion sequence contains non-finite values")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def frames_for_duration(seconds: float, fps: int = FPS) -> int:
    return int(round(seconds * fps))


def align_speech_features(spec: torch.Tensor, n_frames: int, frame_ms: int = FRAME_MS,
                          hop_ms: int = SPEC_HOP_MS) -> torch.Tensor:
    """Average the spectrogram frames that fall in each video frame's window.

    ``spec`` is (T, F) with one row per ``hop_ms``. Video frame i owns the rows
    whose centre time lies in [i * frame_ms, (i + 1) * frame_ms); rows past the
    end of the spectrogram are replaced by its last row.
    """
    if spec.dim() != 2:
        raise ContractError(f"expected a (T, F) spectrogram, got {tuple(spec.shape)}")
    if frame_ms % hop_ms:
        raise ContractError("frame duration must be a multiple of the spectrogram hop")
    per = frame_ms // hop_ms
    idx = torch.arange(n_frames * per).clamp(max=spec.shape[0] - 1)
    return spec[idx].view(n_frames, per, -1).mean(dim=1)


class TemporalDenoiser(nn.Module):
    """Residual 1-D conv noise predictor over (B, N, d_m) sequences conditioned per frame."""

    def __init__(self, motion_dim: int, speech_dim: int, hidden: int = 64, n_blocks: int = 3,
                 kernel: int = 7, time_dim: int = 16):
        super().__init__()
        self.motion_dim, self.speech_dim, self.hidden = motion_dim, speech_dim, hidden
        self.n_blocks, self.kernel, self.time_dim = n_blocks, kernel, time_dim
        pad = kernel // 2
        self.inp = nn.Conv1d(motion_dim + speech_dim + time_dim, hidden, kernel, padding=pad)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.SiLU(), nn.Conv1d(hidden, hidden, kernel, padding=pad)) for _ in range(n_blocks)
        )
        self.out = nn.Conv1d(hidden, motion_dim, 1)

    def config(self) -> dict:
        return {"motion_dim": self.motion_dim, "speech_dim": self.speech_dim, "hidden": self.hidden,
                "n_blocks": self.n_blocks, "kernel": self.kernel, "time_dim": self.time_dim}

    def forward(self, mt: torch.Tensor, t: torch.Tensor, speech: torch.Tensor) -> torch.Tensor:
        b, n, _ = mt.shape
        if speech is None or speech.shape[:2] != (b, n) or speech.shape[2] != self.speech_dim:
            got = None if speech is None else tuple(speech.shape)
            raise ContractError(f"speech features must be ({b}, {n}, {self.speech_dim}), got {got}")
        temb = timestep_embedding(t, self.time_dim).to(mt.dtype)[:, :, None].expand(b, self.time_dim, n)
        h = self.inp(torch.cat([mt.transpose(1, 2), speech.transpose(1, 2), temb], dim=1))
        for block in self.blocks:
            h = h + block(h)
        return self.out(F.silu(h)).transpose(1, 2)


def _check_lengths(speech: torch.Tensor, motion: torch.Tensor) -> None:
    if speech.shape[:-1] != motion.shape[:-1]:
        raise ContractError(f"speech features {tuple(speech.shape)} are not aligned with motion "
                            f"{tuple(motion.shape)}: one feature vector per frame required")


def motion_diffusion_loss(model, speech: torch.Tensor, motion: torch.Tensor, t, eps: torch.Tensor,
                          schedule: NoiseSchedule) -> torch.Tensor:
    """Noise-prediction loss with the whole (B, N, d_m) sequence noised jointly."""
    _check_lengths(speech, motion)
    return ldm_loss(model, speech, motion, t, eps, schedule)


def sample_motion(model: TemporalDenoiser, speech: torch.Tensor, n_frames: int, seed: int = 0,
                  schedule: NoiseSchedule | None = None) -> MotionSequence:
    """Denoise one motion sequence of ``n_frames`` conditioned on per-frame speech features."""
    if n_frames < 1:
        raise UsageError("need at least one frame")
    speech = speech[None] if speech.dim() == 2 else speech
    if speech.shape[0] != 1 or speech.shape[1] != n_frames:
        raise ContractError(f"expected speech features for {n_frames} frames, got {tuple(speech.shape)}")
    out = sample(model, speech, None, schedule or NoiseSchedule.linear(), rng_seed=seed,
                 shape=(1, n_frames, model.motion_dim))
    return MotionSequence(out[0])


def train_motion_diffusion(model: TemporalDenoiser, speech: torch.Tensor, motion: torch.Tensor, steps: int,
                           schedule: NoiseSchedule | None = None, window: int = WINDOW, batch: int = 16,
                           lr: float = 2e-3, seed: int = 0) -> list[float]:
    """Train on random windows of aligned (speech, motion) clips, shapes (C, N, d_s) and (C, N, d_m)."""
    _check_lengths(speech, motion)
    schedule = schedule or NoiseSchedule.linear()
    n_clips, n = motion.shape[:2]
    window = min(window, n)
    torch.manual_seed(seed)
    g = generator(seed, "motion-diffusion-train")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    losses = []
    for step in range(steps):
        clip = torch.randint(0, n_clips, (batch,), generator=g)
        start = torch.randint(0, n - window + 1, (batch,), generator=g)
        offs = start[:, None] + torch.arange(window)[None]
        s = speech[clip[:, None], offs]
        m = motion[clip[:, None], offs]
        t = torch.randint(1, schedule.T + 1, (batch,), generator=g)
        eps = torch.randn(m.shape, generator=g)
        loss = motion_diffusion_loss(model, s, m, t, eps, schedule)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        if not np.isfinite(losses[-1]):
            raise NumericError(f"motion diffusion loss non-finite at step {step}")
    return losses


def mean_step_delta(frames: torch.Tensor) -> float:
    """Mean L2 norm of consecutive-frame differences over (..., N, d) sequences."""
    return (frames[..., 1:, :] - frames[..., :-1, :]).norm(dim=-1).mean().item()
