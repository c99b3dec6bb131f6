"""Audio and video preprocessing: 16 kHz clips of fixed length, compressed spectrograms, face crops, frames."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ContractError, DetectionError, MediaReadError, ResolutionError, UsageError

SAMPLE_RATE = 16_000
CLIP_SECONDS = 6
CLIP_SAMPLES = SAMPLE_RATE * CLIP_SECONDS
N_FFT = 512
HOP = 160
WIN = 400
N_BINS = N_FFT // 2 + 1
COMPRESSION = 0.3
FACE_SIZE = 256
VIDEO_FPS = 25


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate != SAMPLE_RATE:
            raise ContractError(f"clips are {SAMPLE_RATE} Hz; got {self.sample_rate} (use AudioClip.from_signal)")
        if self.samples.ndim != 1:
            raise ContractError(f"clips are mono; got samples of shape {self.samples.shape}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @classmethod
    def from_signal(cls, samples, sample_rate: int) -> "AudioClip":
        """Mix down to mono and resample to 16 kHz with a polyphase filter."""
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim == 2:
            x = x.mean(axis=1)
        if x.ndim != 1:
            raise ContractError(f"expected (n,) or (n, channels) audio, got {x.shape}")
        if sample_rate != SAMPLE_RATE and len(x):
            ratio = Fraction(SAMPLE_RATE, int(sample_rate))
            x = resample_poly(x, ratio.numerator, ratio.denominator)
        return cls(x.astype(np.float32))


def read_wav(path) -> AudioClip:
    """Read a PCM16/PCM32/float WAV file as a 16 kHz mono clip."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise MediaReadError(f"cannot read WAV {path}: {exc}") from exc
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    return AudioClip.from_signal(data, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767), -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate, pcm)


def fix_length(clip: AudioClip, n_samples: int = CLIP_SAMPLES) -> AudioClip:
    """Tile short clips and truncate to exactly ``n_samples``."""
    x = clip.samples
    if len(x) == 0:
        raise UsageError("cannot fix the length of empty audio")
    if len(x) < n_samples:
        x = np.tile(x, -(-n_samples // len(x)))
    return AudioClip(x[:n_samples].copy(), clip.sample_rate)


def compress(x):
    """Signed power-law compression sgn(x)|x|^0.3, elementwise."""
    if isinstance(x, torch.Tensor):
        return torch.sign(x) * x.abs() ** COMPRESSION
    x = np.asarray(x)
    return np.sign(x) * np.abs(x) ** COMPRESSION


@dataclass
class Spectrogram:
    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        if self.real.shape != self.imag.shape or self.real.ndim != 2 or self.real.shape[1] != N_BINS:
            raise ContractError(f"spectrogram channels must be (frames, {N_BINS}), got {self.real.shape}")
        if not (np.isfinite(self.real).all() and np.isfinite(self.imag).all()):
            raise ContractError("spectrogram contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.real.shape[0]

    def features(self) -> np.ndarray:
        """(frames, 2 * bins) matrix: real bins followed by imaginary bins."""
        return np.concatenate([self.real, self.imag], axis=1).astype(np.float32)


def spectrogram(clip: AudioClip) -> Spectrogram:
    """Centred STFT (Hann 400 / hop 160 / 512-point FFT) with compressed real and imaginary parts."""
    if len(clip.samples) != CLIP_SAMPLES:
        raise ContractError(f"spectrogram expects a {CLIP_SECONDS} s clip ({CLIP_SAMPLES} samples), "
                            f"got {len(clip.samples)}; apply fix_length first")
    x = torch.from_numpy(clip.samples.astype(np.float64))
    spec = torch.stft(x, n_fft=N_FFT, hop_length=HOP, win_length=WIN,
                      window=torch.hann_window(WIN, periodic=True, dtype=torch.float64),
                      center=True, pad_mode="reflect", return_complex=True)
    spec = spec.T
    return Spectrogram(compress(spec.real).numpy(), compress(spec.imag).numpy())


def speech_features(clip: AudioClip) -> np.ndarray:
    return spectrogram(fix_length(clip)).features()


@dataclass(frozen=True)
class FaceBox:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def centre(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2


class FaceDetector(Protocol):
    def __call__(self, image: np.ndarray) -> Sequence[FaceBox]: ...


def select_box(boxes: Sequence[FaceBox], target: tuple[float, float]) -> FaceBox:
    """Box whose centre is closest to ``target`` (x, y); first one wins ties."""
    if not boxes:
        raise DetectionError("no face box found")
    d = [(b.centre[0] - target[0]) ** 2 + (b.centre[1] - target[1]) ** 2 for b in boxes]
    return boxes[int(np.argmin(d))]


def area_resize(image: np.ndarray, size: int) -> np.ndarray:
    """Area-average resize of an (H, W, C) image; uint8 in, uint8 out (rounded)."""
    src = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(src, size=(size, size), mode="area")[0].permute(1, 2, 0).numpy()
    if image.dtype == np.uint8:
        return np.clip(np.round(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def crop_resize_face(image: np.ndarray, box: FaceBox | None = None, detector: FaceDetector | None = None,
                     target: tuple[float, float] | None = None, size: int = FACE_SIZE) -> np.ndarray:
    """Crop the chosen face box from an (H, W, C) image and resize it to size x size.

    With a detector and several boxes, the one nearest ``target`` (default: the
    image centre) is used.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ContractError(f"expected an (H, W, C) image, got {image.shape}")
    h, w = image.shape[:2]
    if box is None:
        if detector is None:
            raise DetectionError("no face box supplied and no detector available")
        box = select_box(list(detector(image)), target or (w / 2, h / 2))
    x0, y0 = max(int(round(box.x0)), 0), max(int(round(box.y0)), 0)
    x1, y1 = min(int(round(box.x1)), w), min(int(round(box.y1)), h)
    if x1 <= x0 or y1 <= y0:
        raise DetectionError(f"face box {box} is empty inside a {w}x{h} image")
    return area_resize(image[y0:y1, x0:x1], size)


@dataclass
class DecodedVideo:
    frames: np.ndarray
    timestamps: np.ndarray


class VideoDecoder(Protocol):
    def __call__(self, path) -> DecodedVideo: ...


def save_npz_video(path, frames: np.ndarray, fps: float | None = None, timestamps=None) -> None:
    frames = np.asarray(frames, dtype=np.uint8)
    if timestamps is None:
        timestamps = np.arange(len(frames)) / float(fps)
    np.savez(path, frames=frames, timestamps=np.asarray(timestamps, dtype=np.float64))


class NpzVideoDecoder:
    """Reads ``frames`` (N, H, W, 3) uint8 and ``timestamps`` (N,) seconds from an .npz file."""

    def __call__(self, path) -> DecodedVideo:
        try:
            with np.load(path) as data:
                return DecodedVideo(np.asarray(data["frames"]), np.asarray(data["timestamps"], dtype=np.float64))
        except (OSError, ValueError, KeyError) as exc:
            raise MediaReadError(f"cannot decode video {path}: {exc}") from exc


class PngDirectoryDecoder:
    """A directory of PNG frames sorted by name, with ``fps`` from ``meta.json`` or the constructor."""

    def __init__(self, fps: float = VIDEO_FPS):
        self.fps = fps

    def __call__(self, path) -> DecodedVideo:
        root = Path(path)
        files = sorted(root.glob("*.png"))
        if not root.is_dir() or not files:
            raise MediaReadError(f"no PNG frames in {path}")
        fps = self.fps
        meta = root / "meta.json"
        if meta.exists():
            fps = float(json.loads(meta.read_text()).get("fps", fps))
        try:
            frames = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
        except (OSError, ValueError) as exc:
            raise MediaReadError(f"cannot read frames in {path}: {exc}") from exc
        return DecodedVideo(frames, np.arange(len(files)) / fps)


@dataclass
class FrameSequence:
    frames: np.ndarray
    timestamps: np.ndarray
    fps: int = VIDEO_FPS

    def __len__(self) -> int:
        return len(self.frames)


def resample_times(timestamps: np.ndarray, fps: int = VIDEO_FPS) -> np.ndarray:
    """Indices of the source frames shown at each output tick k / fps (latest frame at or before it)."""
    ts = np.asarray(timestamps, dtype=np.float64)
    if len(ts) == 0:
        return np.zeros(0, dtype=int)
    if np.any(np.diff(ts) <= 0):
        raise ContractError("source timestamps must be strictly increasing")
    duration = ts[-1] - ts[0] + (ts[-1] - ts[-2] if len(ts) > 1 else 1.0 / fps)
    n_out = int(np.floor(duration * fps + 1e-9))
    ticks = ts[0] + np.arange(n_out) / fps
    return np.clip(np.searchsorted(ts, ticks + 1e-9, side="right") - 1, 0, len(ts) - 1)


def extract_frames(path, decoder: VideoDecoder, fps: int = VIDEO_FPS, size: int = FACE_SIZE,
                   boxes: Iterable[FaceBox] | None = None) -> FrameSequence:
    """Decode, resample to ``fps`` and resize every frame to size x size.

    Sources smaller than size x size (or face boxes smaller than that) are rejected.
    """
    video = decoder(path)
    frames = np.asarray(video.frames)
    if frames.ndim != 4 or len(frames) == 0:
        raise MediaReadError(f"{path}: decoder returned no frames")
    h, w = frames.shape[1:3]
    if h < size or w < size:
        raise ResolutionError(f"{path}: source resolution {w}x{h} is below {size}x{size}")
    idx = resample_times(video.timestamps, fps)
    box_list = None if boxes is None else list(boxes)
    out = []
    for i in idx:
        frame = frames[i]
        if box_list is not None:
            box = box_list[min(i, len(box_list) - 1)]
            if box.x1 - box.x0 < size or box.y1 - box.y0 < size:
                raise ResolutionError(f"{path}: face box {box} is below {size}x{size}")
            out.append(crop_resize_face(frame, box, size=size))
        else:
            out.append(area_resize(frame, size) if (h, w) != (size, size) else frame.copy())
    return FrameSequence(np.stack(out) if out else np.zeros((0, size, size, 3), np.uint8),
                         np.arange(len(idx)) / fps, fps)
