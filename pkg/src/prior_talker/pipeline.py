"""Stage orchestration: configs, checkpoints, run manifests, generation and evaluation.

Stages only exchange data through PTLK1 containers on disk:

    preprocess -> pretrain-conre -> compute-prior -> train-portrait
               -> train-motion -> finetune-codebook -> train-motion-diffusion -> generate
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__, container
from .av_data import (
    CLIP_SAMPLES,
    HOP,
    AudioClip,
    NpzVideoDecoder,
    PngDirectoryDecoder,
    area_resize,
    extract_frames,
    fix_length,
    read_wav,
    spectrogram,
)
from .conre import ConReModel, train_conre
from .diffusion_core import NoiseSchedule
from .errors import CheckpointError, ConfigError, DataError, MediaReadError, PriorTalkerError, UsageError
from .eval_metrics import (
    PSNR_CAP,
    GlobalShiftFlow,
    MetricReport,
    SyncScorer,
    ToySyncScorer,
    fid_like,
    image_quality,
    pooled_features,
    sync_score,
    temporal_mad,
)
from .motion_diffusion import FPS, TemporalDenoiser, align_speech_features, sample_motion, train_motion_diffusion
from .motion_space import MotionModel, train_motion
from .ops import generator, substream_seed
from .perceptual import RandomConvExtractor
from .portrait_prior import FacePrior, PortraitDiffusion, compute_prior, load_prior, save_prior, train_portrait
from .vq_highres import Codebook, train_codebook

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PRIOR_TALKER_OUTPUT_ROOT"
SPEECH_WIDTH = 2 * 257
ROWS_PER_CLIP = CLIP_SAMPLES // HOP
STAGES = ("conre", "prior", "portrait", "motion", "motion_hr", "motion_diffusion")


@dataclass
class DataConfig:
    audio_dir: str | None = None
    video_dir: str | None = None
    image_size: int = 64
    max_frames: int = 150


@dataclass
class ModelConfig:
    embed_dim: int = 32
    speech_channels: int = 32
    face_width: int = 8
    guidance: str = "saw"
    portrait_hidden: int = 128
    motion_channels: int = 16
    motion_dim: int = 8
    id_dim: int = 32
    motion_hidden: int = 128
    decoder_width: int = 32
    n_codes: int = 64
    md_hidden: int = 64
    md_blocks: int = 3
    md_kernel: int = 7
    diffusion_steps: int = 50


@dataclass
class TrainConfig:
    conre_steps: int = 200
    portrait_steps: int = 200
    motion_steps: int = 200
    codebook_steps: int = 200
    motion_diffusion_steps: int = 200
    batch: int = 8
    lr: float = 1e-3


@dataclass
class ExperimentConfig:
    name: str = "run"
    seed: int = 0
    output_root: str | None = None
    quantize: bool = True
    sync_scorer: bool = False
    stages: list = field(default_factory=lambda: list(STAGES))
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        raw = dict(raw or {})
        sections = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig}
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                kwargs[key] = _build(sections[key], value or {}, key)
            elif key in {f.name for f in dataclasses.fields(cls)}:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**kwargs)
        unknown = set(cfg.stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stages {sorted(unknown)}")
        if cfg.model.guidance not in ("none", "static", "saw"):
            raise ConfigError(f"guidance must be none, static or saw, got {cfg.model.guidance!r}")
        if cfg.data.image_size % 8:
            raise ConfigError("image_size must be a multiple of 8")
        base = base_dir or Path.cwd()
        for key in ("audio_dir", "video_dir"):
            value = getattr(cfg.data, key)
            if value is not None:
                path = (base / value).resolve()
                if not path.exists():
                    raise ConfigError(f"data.{key} does not exist: {path}")
                setattr(cfg.data, key, str(path))
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(kind, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(kind)}
    extra = set(values) - names
    if extra:
        raise ConfigError(f"unknown keys in {section}: {sorted(extra)}")
    return kind(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return ExperimentConfig.from_dict(raw or {}, path.parent)


def output_root(cfg: ExperimentConfig | None = None, override=None) -> Path:
    """Override argument, then the environment variable, then the config, then ./runs."""
    value = override or os.environ.get(OUTPUT_ROOT_ENV) or (cfg.output_root if cfg else None) or "runs"
    return Path(value)


@dataclass
class RunPaths:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    def checkpoint(self, stage: str) -> Path:
        return self.checkpoints / f"{stage}.ptlk"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @classmethod
    def for_config(cls, cfg: ExperimentConfig, override=None) -> "RunPaths":
        return cls(output_root(cfg, override) / cfg.name)


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    code_version: str = __version__
    config: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)

    @classmethod
    def open(cls, paths: RunPaths, cfg: ExperimentConfig) -> "RunManifest":
        if paths.manifest.exists():
            data = json.loads(paths.manifest.read_text())
            if data.get("config_hash") == cfg.digest():
                return cls(**data)
        return cls(cfg.digest(), cfg.seed, config=cfg.to_dict())

    def record_checkpoint(self, stage: str, path: Path) -> None:
        self.checkpoints[stage] = {"path": str(path), "sha256": container.file_sha256(path)}

    def save(self, paths: RunPaths) -> Path:
        paths.root.mkdir(parents=True, exist_ok=True)
        paths.manifest.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))
        return paths.manifest


def _stage_meta(stage: str, cfg: ExperimentConfig, **extra) -> dict:
    return {"stage": stage, "seed": cfg.seed, "config_hash": cfg.digest(), **extra}


def _save_stage(paths: RunPaths, cfg: ExperimentConfig, stage: str, module: torch.nn.Module, **meta) -> Path:
    path = container.save_module(paths.checkpoint(stage), module, _stage_meta(stage, cfg, **meta))
    manifest = RunManifest.open(paths, cfg)
    manifest.record_checkpoint(stage, path)
    manifest.save(paths)
    return path


def _load_stage(paths: RunPaths, stage: str) -> tuple[dict, dict]:
    path = paths.checkpoint(stage)
    if not path.exists():
        raise ConfigError(f"stage {stage}: checkpoint missing at {path}; run that stage first")
    try:
        tensors, meta = container.load(path)
    except CheckpointError as exc:
        raise CheckpointError(f"stage {stage}: {exc}") from exc
    if meta.get("stage") != stage:
        raise CheckpointError(f"stage {stage}: {path} holds stage {meta.get('stage')!r}")
    return tensors, meta


def _restore(module: torch.nn.Module, tensors: dict, stage: str) -> torch.nn.Module:
    try:
        module.load_state_dict(container.load_state_dict(tensors))
    except RuntimeError as exc:
        raise CheckpointError(f"stage {stage}: weights do not match the recorded architecture ({exc})") from exc
    return module.eval()


def speech_rows(clip: AudioClip) -> np.ndarray:
    """Compressed spectrogram rows for the whole clip, computed over consecutive 6 s windows."""
    x = clip.samples
    if len(x) == 0:
        raise UsageError("empty speech input")
    rows = []
    for start in range(0, len(x), CLIP_SAMPLES):
        chunk = fix_length(AudioClip(x[start:start + CLIP_SAMPLES]))
        rows.append(spectrogram(chunk).features()[:ROWS_PER_CLIP])
    return np.concatenate(rows)


def clip_spectrogram(clip: AudioClip) -> np.ndarray:
    return spectrogram(fix_length(clip)).features()


def n_output_frames(clip: AudioClip, fps: int = FPS) -> int:
    return max(1, int(round(clip.duration * fps)))


def _decoder_for(path: Path):
    return PngDirectoryDecoder() if path.is_dir() else NpzVideoDecoder()


def _find_video(video_dir: Path, stem: str) -> Path:
    for candidate in (video_dir / f"{stem}.npz", video_dir / stem):
        if candidate.exists():
            return candidate
    raise MediaReadError(f"no video for {stem!r} in {video_dir}")


def preprocess(audio_dir, video_dir, out_dir, image_size: int = 64, max_frames: int = 150,
               seed: int = 0) -> list[Path]:
    """Turn paired ``<stem>.wav`` / ``<stem>.npz`` (or ``<stem>/`` PNG dirs) into per-clip containers."""
    audio_dir, video_dir, out_dir = Path(audio_dir), Path(video_dir), Path(out_dir)
    wavs = sorted(audio_dir.glob("*.wav"))
    if not wavs:
        raise DataError(f"no .wav files in {audio_dir}")
    written = []
    for wav in wavs:
        clip = read_wav(wav)
        video = _find_video(video_dir, wav.stem)
        seq = extract_frames(video, _decoder_for(video))
        frames = np.stack([area_resize(f, image_size) for f in seq.frames[:max_frames]])
        n = min(len(frames), n_output_frames(clip))
        tensors = {
            "spectrogram": clip_spectrogram(clip),
            "speech_rows": speech_rows(clip),
            "frames": frames[:n].transpose(0, 3, 1, 2).astype(np.float32) / 255.0,
        }
        meta = {"stage": "preprocess", "stem": wav.stem, "duration": clip.duration, "fps": FPS, "seed": seed}
        written.append(container.save(out_dir / f"{wav.stem}.ptlk", tensors, meta))
    return written


@dataclass
class Clip:
    stem: str
    spectrogram: torch.Tensor
    speech_rows: torch.Tensor
    frames: torch.Tensor

    def aligned_speech(self, n_frames: int | None = None) -> torch.Tensor:
        return align_speech_features(self.speech_rows, n_frames or len(self.frames))


def load_dataset(data_dir) -> list[Clip]:
    files = sorted(Path(data_dir).glob("*.ptlk"))
    if not files:
        raise DataError(f"no preprocessed clips in {data_dir}; run preprocess first")
    clips = []
    for f in files:
        tensors, meta = container.load(f)
        clips.append(Clip(meta.get("stem", f.stem), torch.from_numpy(tensors["spectrogram"]),
                          torch.from_numpy(tensors["speech_rows"]), torch.from_numpy(tensors["frames"])))
    return clips


def run_preprocess(cfg: ExperimentConfig, paths: RunPaths) -> list[Path]:
    if cfg.data.audio_dir is None or cfg.data.video_dir is None:
        raise ConfigError("data.audio_dir and data.video_dir are required to preprocess")
    return preprocess(cfg.data.audio_dir, cfg.data.video_dir, paths.data, cfg.data.image_size,
                      cfg.data.max_frames, cfg.seed)


def _middle_frames(clips: list[Clip]) -> torch.Tensor:
    return torch.stack([c.frames[len(c.frames) // 2] for c in clips])


def build_conre(cfg: ExperimentConfig) -> ConReModel:
    m = cfg.model
    return ConReModel(SPEECH_WIDTH, cfg.data.image_size, m.embed_dim, m.speech_channels, m.face_width)


def pretrain_conre_stage(cfg: ExperimentConfig, paths: RunPaths) -> Path:
    clips = load_dataset(paths.data)
    torch.manual_seed(substream_seed(cfg.seed, "conre"))
    model = build_conre(cfg)
    specs = torch.stack([c.spectrogram for c in clips])
    train_conre(model, specs, _middle_frames(clips), cfg.train.conre_steps, RandomConvExtractor(),
                batch_size=cfg.train.batch, seed=substream_seed(cfg.seed, "conre"))
    return _save_stage(paths, cfg, "conre", model, config=model.config())


def load_conre(paths: RunPaths) -> ConReModel:
    tensors, meta = _load_stage(paths, "conre")
    c = meta["config"]
    model = ConReModel(c["n_bins"], c["image_size"], c["dim"], c["speech_channels"], c["face_width"])
    return _restore(model, tensors, "conre")


@torch.no_grad()
def _face_embeddings(conre: ConReModel, clips: list[Clip]) -> tuple[torch.Tensor, torch.Tensor]:
    """Face embeddings of every frame and the matching clip index."""
    embs, owner = [], []
    for i, c in enumerate(clips):
        embs.append(conre.face_encoder(c.frames))
        owner.append(torch.full((len(c.frames),), i))
    return torch.cat(embs), torch.cat(owner)


def compute_prior_stage(cfg: ExperimentConfig, paths: RunPaths) -> Path:
    conre = load_conre(paths)
    clips = load_dataset(paths.data)
    embs, _ = _face_embeddings(conre, clips)
    prior = compute_prior(embs.double().numpy())
    prior = FacePrior(prior.vector, prior.sample_count, prior.gender_ratio,
                      {**prior.manifest, "seed": cfg.seed, "clips": [c.stem for c in clips]})
    path = save_prior(paths.checkpoint("prior"), prior)
    manifest = RunManifest.open(paths, cfg)
    manifest.record_checkpoint("prior", path)
    manifest.save(paths)
    return path


def load_face_prior(paths: RunPaths) -> FacePrior:
    path = paths.checkpoint("prior")
    if not path.exists():
        raise ConfigError(f"stage prior: checkpoint missing at {path}; run compute-prior first")
    try:
        return load_prior(path)
    except CheckpointError as exc:
        raise CheckpointError(f"stage prior: {exc}") from exc


def train_portrait_stage(cfg: ExperimentConfig, paths: RunPaths) -> Path:
    conre = load_conre(paths)
    prior = load_face_prior(paths)
    clips = load_dataset(paths.data)
    z0, owner = _face_embeddings(conre, clips)
    with torch.no_grad():
        zs = conre.speech_encoder(torch.stack([c.spectrogram for c in clips]))[owner]
    torch.manual_seed(substream_seed(cfg.seed, "portrait"))
    model = PortraitDiffusion(prior.vector, cfg.model.embed_dim, cfg.model.guidance,
                              NoiseSchedule.linear(cfg.model.diffusion_steps), hidden=cfg.model.portrait_hidden)
    train_portrait(model, zs, z0, cfg.train.portrait_steps, batch=max(cfg.train.batch, 16), lr=cfg.train.lr,
                   seed=substream_seed(cfg.seed, "portrait"))
    return _save_stage(paths, cfg, "portrait", model, config=model.config())


def load_portrait(paths: RunPaths) -> PortraitDiffusion:
    tensors, meta = _load_stage(paths, "portrait")
    c = meta["config"]
    model = PortraitDiffusion(tensors["prior"], c["speech_dim"], c["guidance"],
                              NoiseSchedule.from_meta(c["schedule"]), hidden=c["hidden"],
                              n_blocks=c["n_blocks"], static_beta=c["static_beta"])
    return _restore(model, tensors, "portrait")


def build_motion(cfg: ExperimentConfig) -> MotionModel:
    m = cfg.model
    return MotionModel(cfg.data.image_size, m.motion_channels, m.motion_dim, m.id_dim, hidden=m.motion_hidden,
                       decoder_width=m.decoder_width)


def train_motion_stage(cfg: ExperimentConfig, paths: RunPaths) -> Path:
    clips = load_dataset(paths.data)
    frames = torch.cat([c.frames for c in clips])
    clip_ids = torch.cat([torch.full((len(c.frames),), i) for i, c in enumerate(clips)])
    torch.manual_seed(substream_seed(cfg.seed, "motion"))
    model = build_motion(cfg)
    train_motion(model, frames, cfg.train.motion_steps, RandomConvExtractor(), lr=cfg.train.lr,
                 batch=cfg.train.batch, seed=substream_seed(cfg.seed, "motion"), clip_ids=clip_ids)
    return _save_stage(paths, cfg, "motion", model, config=model.config())


def load_motion(paths: RunPaths, prefer_hr: bool = True) -> MotionModel:
    stage = "motion_hr" if prefer_hr and paths.checkpoint("motion_hr").exists() else "motion"
    tensors, meta = _load_stage(paths, stage)
    book = None
    if "codebook" in meta:
        book = Codebook(meta["codebook"]["n_codes"], meta["codebook"]["dim"])
    model = MotionModel(**meta["config"], codebook=book)
    return _restore(model, tensors, stage)


def finetune_codebook_stage(cfg: ExperimentConfig, paths: RunPaths) -> Path:
    model = load_motion(paths, prefer_hr=False)
    clips = load_dataset(paths.data)
    frames = torch.cat([c.frames for c in clips])
    book = Codebook(cfg.model.n_codes, model.channels, seed=substream_seed(cfg.seed, "codebook"))
    train_codebook(model.encoder, book, model.decoder, frames, cfg.train.codebook_steps, lr=cfg.train.lr,
                   batch=cfg.train.batch, seed=substream_seed(cfg.seed, "codebook"))
    model.codebook = book
    return _save_stage(paths, cfg, "motion_hr", model, config=model.config(),
                       codebook={"n_codes": book.n_codes, "dim": book.dim})


@torch.no_grad()
def motion_codes(model: MotionModel, frames: torch.Tensor) -> torch.Tensor:
    return model.encode_motion(model.encoder(frames))


def train_motion_diffusion_stage(cfg: ExperimentConfig, paths: RunPaths) -> Path:
    motion = load_motion(paths)
    clips = load_dataset(paths.data)
    n = min(len(c.frames) for c in clips)
    speech = torch.stack([c.aligned_speech()[:n] for c in clips]).float()
    codes = torch.stack([motion_codes(motion, c.frames[:n]) for c in clips])
    torch.manual_seed(substream_seed(cfg.seed, "motion_diffusion"))
    m = cfg.model
    model = TemporalDenoiser(motion.motion_dim, SPEECH_WIDTH, m.md_hidden, m.md_blocks, m.md_kernel)
    schedule = NoiseSchedule.linear(m.diffusion_steps)
    train_motion_diffusion(model, speech, codes, cfg.train.motion_diffusion_steps, schedule,
                           batch=cfg.train.batch, lr=cfg.train.lr, seed=substream_seed(cfg.seed, "motion_diffusion"))
    return _save_stage(paths, cfg, "motion_diffusion", model, config=model.config(), schedule=schedule.to_meta())


def load_motion_diffusion(paths: RunPaths) -> tuple[TemporalDenoiser, NoiseSchedule]:
    tensors, meta = _load_stage(paths, "motion_diffusion")
    model = TemporalDenoiser(**meta["config"])
    return _restore(model, tensors, "motion_diffusion"), NoiseSchedule.from_meta(meta["schedule"])


PortraitEditor = Callable[[torch.Tensor], torch.Tensor]


def passthrough_editor(portrait: torch.Tensor) -> torch.Tensor:
    """Attribute editing seam; returns the portrait unchanged."""
    return portrait


def to_uint8(frame: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [0, 1] -> (H, W, 3) uint8."""
    return (frame.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()


def write_frames(frames: torch.Tensor, out_dir: Path, fps: int = FPS) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, frame in enumerate(frames):
        path = out_dir / f"frame_{i:05d}.png"
        Image.fromarray(to_uint8(frame)).save(path, format="PNG")
        written.append(path)
    meta = {"fps": fps, "n_frames": len(written), "timestamps": [i / fps for i in range(len(written))]}
    (out_dir / "frames.json").write_text(json.dumps(meta, indent=2))
    return written


def read_frames(frame_dir) -> torch.Tensor:
    files = sorted(Path(frame_dir).glob("*.png"))
    if not files:
        raise MediaReadError(f"no PNG frames in {frame_dir}")
    arr = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float() / 255.0


@torch.no_grad()
def generate(cfg: ExperimentConfig, paths: RunPaths, speech_path, out_dir, seed: int | None = None,
             editor: PortraitEditor = passthrough_editor, batch: int = 16) -> dict:
    """Speech file -> portrait -> motion codes -> PNG frames at 25 fps."""
    seed = cfg.seed if seed is None else seed
    log.info("generating from %s with seed %d", speech_path, seed)
    conre = load_conre(paths)
    portrait_model = load_portrait(paths)
    motion = load_motion(paths)
    md, schedule = load_motion_diffusion(paths)
    clip = read_wav(speech_path)
    n_frames = n_output_frames(clip)

    zs = conre.speech_encoder(torch.from_numpy(clip_spectrogram(clip))[None])
    eps = torch.randn((1, portrait_model.dim), generator=generator(seed, "portrait-noise"))
    face = portrait_model.sample(zs, eps)
    portrait = editor(conre.face_decoder(face))

    aligned = align_speech_features(torch.from_numpy(speech_rows(clip)), n_frames)
    codes = sample_motion(md, aligned, n_frames, seed=substream_seed(seed, "motion-noise"), schedule=schedule).frames

    source = motion.encoder(portrait)
    z_id = motion.encode_identity(source)
    quantize = cfg.quantize and motion.codebook is not None
    frames = []
    for lo in range(0, n_frames, batch):
        z_m = codes[lo:lo + batch]
        k = len(z_m)
        out = motion.synthesize(source.expand(k, -1, -1, -1), z_id.expand(k, -1), z_m, quantize=quantize)
        frames.append(out["frame"])
    frames = torch.cat(frames)

    out_dir = Path(out_dir)
    written = write_frames(frames, out_dir)
    Image.fromarray(to_uint8(portrait[0])).save(out_dir / "portrait.png", format="PNG")
    record = {"speech": str(speech_path), "seed": seed, "n_frames": len(written), "fps": FPS,
              "duration": clip.duration, "frame_dir": str(out_dir),
              "frames_sha256": hashlib.sha256(b"".join(p.read_bytes() for p in written)).hexdigest()}
    manifest = RunManifest.open(paths, cfg)
    manifest.outputs[str(out_dir)] = record
    manifest.save(paths)
    (out_dir / "generation.json").write_text(json.dumps({**record, "config_hash": cfg.digest()}, indent=2))
    return record


def evaluate(gen_dir, ref_dir, scorer: SyncScorer | None = None, audio: torch.Tensor | None = None,
             dataset: str = "", model: str = "") -> MetricReport:
    """Compare generated and reference frame directories pairwise (by sorted name)."""
    gen, ref = read_frames(gen_dir), read_frames(ref_dir)
    n = min(len(gen), len(ref))
    if n < 2:
        raise UsageError("evaluation needs at least two frames on each side")
    gen, ref = gen[:n], ref[:n]
    if ref.shape[-2:] != gen.shape[-2:]:
        ref = torch.nn.functional.interpolate(ref, size=gen.shape[-2:], mode="area")
    extractor = RandomConvExtractor()
    scores = [image_quality(r, g, extractor) for r, g in zip(ref, gen)]
    report = MetricReport(dataset=dataset, model=model)
    report.add("SSIM", float(np.mean([s[0] for s in scores])))
    psnr_mean = float(np.mean([s[1] for s in scores]))
    report.add("PSNR", psnr_mean, capped=any(s[1] >= PSNR_CAP for s in scores))
    report.add("perceptual", float(np.mean([s[2] for s in scores])))
    feats_g, feats_r = pooled_features(gen, extractor), pooled_features(ref, extractor)
    shrinkage = 0.0 if n > feats_g.shape[1] else 0.1
    report.add("FID", fid_like(feats_r, feats_g, shrinkage=shrinkage))
    report.add("MAD", temporal_mad(gen, GlobalShiftFlow()))
    if scorer is None or audio is None:
        report.mark_unavailable("LSE-D", "LSE-C")
    else:
        lse_d, lse_c = sync_score(gen, audio[:n], scorer)
        report.add("LSE-D", lse_d)
        report.add("LSE-C", lse_c)
    return report


def write_report(report: MetricReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    return path


STAGE_RUNNERS = {
    "conre": pretrain_conre_stage,
    "prior": compute_prior_stage,
    "portrait": train_portrait_stage,
    "motion": train_motion_stage,
    "motion_hr": finetune_codebook_stage,
    "motion_diffusion": train_motion_diffusion_stage,
}


def run_stage(stage: str, cfg: ExperimentConfig, paths: RunPaths) -> Path:
    log.info("stage %s -> %s", stage, paths.checkpoint(stage))
    try:
        return STAGE_RUNNERS[stage](cfg, paths)
    except PriorTalkerError as exc:
        if str(exc).startswith("stage "):
            raise
        raise type(exc)(f"stage {stage}: {exc}") from exc


def run_experiment(cfg: ExperimentConfig, override_root=None) -> MetricReport:
    """Preprocess, train every enabled stage, generate for the first clip and evaluate against it."""
    paths = RunPaths.for_config(cfg, override_root)
    run_preprocess(cfg, paths)
    for stage in STAGES:
        if stage in cfg.stages:
            run_stage(stage, cfg, paths)
    clips = load_dataset(paths.data)
    first = clips[0]
    wav = Path(cfg.data.audio_dir) / f"{first.stem}.wav"
    gen_dir = paths.root / "generated" / first.stem
    ref_dir = paths.root / "reference" / first.stem
    generate(cfg, paths, wav, gen_dir)
    write_frames(first.frames, ref_dir)
    scorer, audio = None, None
    if cfg.sync_scorer:
        n = min(len(c.frames) for c in clips)
        scorer = ToySyncScorer(cfg.data.image_size, SPEECH_WIDTH, seed=substream_seed(cfg.seed, "sync"))
        scorer.fit(torch.stack([c.frames[:n] for c in clips]),
                   torch.stack([c.aligned_speech()[:n] for c in clips]).float(),
                   seed=substream_seed(cfg.seed, "sync"))
        audio = first.aligned_speech().float()
    report = evaluate(gen_dir, ref_dir, scorer, audio, dataset=str(cfg.data.audio_dir), model=cfg.name)
    report_path = write_report(report, paths.root / "report.json")
    manifest = RunManifest.open(paths, cfg)
    manifest.reports.append(str(report_path))
    manifest.save(paths)
    return report
