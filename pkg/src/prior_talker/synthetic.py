"""Small synthetic datasets with known structure, used by tests and the toy pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .ops import generator


@dataclass
class SpeechFaceToy:
    """Per-identity speech embeddings and face latents.

    Each face latent is a shared mean plus an identity residual; the speech
    embedding is a noisy linear view of that residual, so speech is informative
    about the face but does not determine it.
    """

    speech: torch.Tensor
    faces: torch.Tensor
    mean: torch.Tensor


def speech_face_toy(n_ids: int = 64, dim: int = 32, speech_dim: int = 16, mean_scale: float = 2.0,
                    spread: float = 0.5, speech_noise: float = 0.1, seed: int = 0) -> SpeechFaceToy:
    g = generator(seed, "speech-face-toy")
    mean = torch.randn(dim, generator=g) * mean_scale
    resid = torch.randn(n_ids, dim, generator=g) * spread
    proj = torch.randn(speech_dim, dim, generator=g) / math.sqrt(dim)
    speech = resid @ proj.T / spread + speech_noise * torch.randn(n_ids, speech_dim, generator=g)
    return SpeechFaceToy(speech, mean + resid, mean)


def gender_pools(n_per_gender: int, dim: int = 16, shift: float = 1.0, seed: int = 0):
    """Standard-normal embeddings shifted by +shift (female, label 1) or -shift (male, label 0)."""
    rng = np.random.default_rng(seed)
    female = rng.standard_normal((n_per_gender, dim)) + shift
    male = rng.standard_normal((n_per_gender, dim)) - shift
    emb = np.concatenate([female, male])
    genders = np.concatenate([np.ones(n_per_gender, dtype=int), np.zeros(n_per_gender, dtype=int)])
    perm = rng.permutation(len(emb))
    return emb[perm], genders[perm]


def identity_pairs(n_ids: int, n_bins: int = 32, frames: int = 24, image_size: int = 32,
                   code_dim: int = 8, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Spectrogram/face-image pairs generated from a shared per-identity code.

    The spectrogram is a code-dependent spectral envelope modulated over time;
    the image is a smooth colour field whose layout depends on the same code.
    """
    g = generator(seed, "identity-pairs")
    codes = torch.randn(n_ids, code_dim, generator=g)
    to_env = torch.randn(code_dim, n_bins, generator=g) / math.sqrt(code_dim)
    env = torch.sigmoid(codes @ to_env)
    tt = torch.linspace(0, 1, frames)
    rate = 2 + codes[:, :1].abs() * 3
    mod = 0.5 + 0.5 * torch.sin(2 * math.pi * rate * tt[None])
    specs = env[:, None, :] * mod[:, :, None] + 0.05 * torch.rand(n_ids, frames, n_bins, generator=g)

    to_img = torch.randn(code_dim, 3, 4, generator=g) / math.sqrt(code_dim)
    coef = torch.einsum("nk,kcj->ncj", codes, to_img)
    ys, xs = torch.meshgrid(torch.linspace(-1, 1, image_size), torch.linspace(-1, 1, image_size), indexing="ij")
    basis = torch.stack([torch.ones_like(xs), xs, ys, xs * ys])
    images = torch.sigmoid(torch.einsum("ncj,jhw->nchw", coef, basis))
    return specs, images


def face_image(size: int = 64, seed: int = 0, mouth_open: float = 0.3) -> torch.Tensor:
    """A cartoon face (3, size, size) in [0, 1]: shaded skin ellipse, eyes and a mouth."""
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    skin = rng.uniform(0.5, 0.9, 3)
    bg = rng.uniform(0.0, 0.3, 3)
    head = (xs / 0.7) ** 2 + (ys / 0.9) ** 2 < 1
    shade = 0.85 + 0.15 * (1 - ys) / 2
    img = np.where(head[None], skin[:, None, None] * shade[None], bg[:, None, None])
    for ex in (-0.3, 0.3):
        eye = ((xs - ex) / 0.12) ** 2 + ((ys + 0.2) / 0.07) ** 2 < 1
        img[:, eye] = 0.1
    mouth = (xs / 0.3) ** 2 + ((ys - 0.45) / (0.04 + 0.12 * mouth_open)) ** 2 < 1
    img[:, mouth] = np.array([0.6, 0.1, 0.1])[:, None]
    return torch.tensor(img, dtype=torch.float32)


def blob_frames(n_frames: int = 2, size: int = 32, shift: float = 3.0, sigma: float = 4.0,
                seed: int = 0) -> torch.Tensor:
    """Frames (N, 3, size, size) of a coloured Gaussian blob translated by ``shift`` px per frame."""
    rng = np.random.default_rng(seed)
    colour = rng.uniform(0.3, 1.0, 3)
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cx0 = cy0 = size / 2 - shift * (n_frames - 1) / 2
    frames = []
    for i in range(n_frames):
        g = np.exp(-((xs - cx0 - shift * i) ** 2 + (ys - cy0) ** 2) / (2 * sigma**2))
        frames.append(0.1 + 0.8 * colour[:, None, None] * g[None])
    return torch.tensor(np.stack(frames), dtype=torch.float32)


def translated_texture(n_frames: int = 4, size: int = 32, shift: tuple[float, float] = (2.0, 1.0),
                       seed: int = 0) -> np.ndarray:
    """Integer-shifted copies of a smooth random texture, (N, size, size) float64 grayscale.

    Frame i is frame 0 translated by ``i * shift`` pixels with wrap-around.
    """
    rng = np.random.default_rng(seed)
    spec = np.fft.fft2(rng.standard_normal((size, size)))
    f = np.fft.fftfreq(size)
    spec *= np.exp(-(f[:, None] ** 2 + f[None] ** 2) / (2 * 0.08**2))
    base = np.real(np.fft.ifft2(spec))
    base = (base - base.min()) / (base.max() - base.min())
    return np.stack([np.roll(base, (round(i * shift[1]), round(i * shift[0])), axis=(0, 1))
                     for i in range(n_frames)])


def lip_landmarks(n_frames: int, n_points: int = 8, centre=(0.5, 0.72), width: float = 0.3,
                  seed: int = 0) -> torch.Tensor:
    """Synthetic lip contour tracks (N, n_points, 2) in normalised [0, 1] (x, y) coordinates.

    The mouth opening follows a slow sinusoid, mimicking speech-driven lip motion.
    """
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi)
    ang = np.linspace(0, 2 * np.pi, n_points, endpoint=False)
    tracks = []
    for i in range(n_frames):
        opening = 0.04 + 0.05 * (1 + np.sin(2 * np.pi * i / 12 + phase)) / 2
        x = centre[0] + width / 2 * np.cos(ang)
        y = centre[1] + opening * np.sin(ang)
        tracks.append(np.stack([x, y], axis=-1))
    return torch.tensor(np.stack(tracks), dtype=torch.float32)


def sinusoid_motion(n_frames: int = 32, dim: int = 8, n_clips: int = 16, seed: int = 0):
    """Motion-code sequences driven by a scalar "speech" signal.

    Returns (speech (n_clips, n_frames, 1), codes (n_clips, n_frames, dim)).
    Each clip's speech is sin(w t + phi); code channel k is a fixed gain times
    sin(w t + phi + k * pi / dim), so the codes are a deterministic function of
    the speech track.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames)
    omega = rng.uniform(0.2, 0.4, n_clips)
    phi = rng.uniform(0, 2 * np.pi, n_clips)
    gains = rng.uniform(0.5, 1.5, dim)
    speech = np.sin(omega[:, None] * t[None] + phi[:, None])[..., None]
    offsets = np.arange(dim) * np.pi / dim
    codes = gains * np.sin(omega[:, None, None] * t[None, :, None] + phi[:, None, None] + offsets)
    return torch.tensor(speech, dtype=torch.float32), torch.tensor(codes, dtype=torch.float32)


def sync_clips(n_clips: int = 8, n_frames: int = 40, size: int = 16, audio_dim: int = 8,
               noise: float = 0.05, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Talking cartoon clips whose mouth opening is a noisy linear view of the audio.

    Returns frames (C, N, 3, size, size) and per-frame audio features (C, N, audio_dim).
    Mouth opening is drawn independently per frame and lightly smoothed, so audio
    shifted by a few frames no longer matches the video.
    """
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0, 1, (n_clips, n_frames + 1))
    opening = 0.7 * raw[:, 1:] + 0.3 * raw[:, :-1]
    proj = rng.standard_normal(audio_dim)
    audio = opening[..., None] * proj + noise * rng.standard_normal((n_clips, n_frames, audio_dim))
    face_seed = int(rng.integers(1 << 31))
    frames = torch.stack([torch.stack([face_image(size, face_seed + c, float(a)) for a in row])
                          for c, row in enumerate(opening)])
    return frames, torch.tensor(audio, dtype=torch.float32)


def write_talking_corpus(root, n_clips: int = 4, seconds: float = 1.0, size: int = 256, fps: int = 25,
                         seed: int = 0) -> tuple[Path, Path]:
    """Write ``audio/*.wav`` and ``video/*.npz`` clips where the mouth follows the speech envelope.

    Each clip has its own pitch and face, so speech carries identity as well as timing.
    """
    from .av_data import SAMPLE_RATE, AudioClip, save_npz_video, write_wav

    root = Path(root)
    audio_dir, video_dir = root / "audio", root / "video"
    audio_dir.mkdir(parents=True, exist_ok=True)
    video_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_frames = int(round(seconds * fps))
    per_frame = SAMPLE_RATE // fps
    for c in range(n_clips):
        opening = np.clip(0.5 + 0.4 * np.sin(np.arange(n_frames) * rng.uniform(0.3, 0.9) + rng.uniform(0, 6))
                          + 0.1 * rng.standard_normal(n_frames), 0, 1)
        pitch = 120.0 + 40.0 * c
        t = np.arange(n_frames * per_frame) / SAMPLE_RATE
        envelope = np.repeat(opening, per_frame)
        wave = 0.5 * envelope * np.sin(2 * np.pi * pitch * t)
        write_wav(audio_dir / f"clip{c:03d}.wav", AudioClip(wave.astype(np.float32)))
        face_seed = seed * 1000 + c
        frames = np.stack([(face_image(size, face_seed, float(a)).permute(1, 2, 0).numpy() * 255).round()
                           for a in opening]).astype(np.uint8)
        save_npz_video(video_dir / f"clip{c:03d}.npz", frames, fps=fps)
    return audio_dir, video_dir
