"""Latent motion construction: encoders, flow/occlusion prediction, warping and lip refinement.

A frame is encoded to a latent map. The source map is warped by a flow field
predicted from (identity code of the source, motion code of the target), gated
by a predicted occlusion map, refined around the lips, and decoded back to an
image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from scipy.spatial import Delaunay, QhullError

from .errors import ContractError, NumericError
from .ops import bilinear_sample, generator
from .perceptual import FeatureExtractor, feature_l1
from .vq_highres import Codebook, HRDecoder, code_loss, quantize_map


class ImageEncoder(nn.Module):
    """(B, 3, S, S) -> (B, C, S/4, S/4) latent map."""

    def __init__(self, channels: int = 16, width: int = 32):
        super().__init__()
        self.channels, self.width = channels, width
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, channels, 3, padding=1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images)


class _MLPEncoder(nn.Module):
    def __init__(self, latent_shape, dim: int, hidden: int = 128):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        self.dim = dim
        self.fc1 = nn.Linear(int(np.prod(latent_shape)), hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        if tuple(latent.shape[1:]) != self.latent_shape:
            raise ContractError(f"expected latent of shape {self.latent_shape}, got {tuple(latent.shape[1:])}")
        return self.fc2(F.silu(self.fc1(latent.flatten(1))))


class IdentityEncoder(_MLPEncoder):
    """Source latent map -> identity code."""


class MotionEncoder(_MLPEncoder):
    """Target latent map -> motion code (the vector modelled by motion diffusion)."""


@dataclass
class WarpField:
    flow: torch.Tensor
    occlusion: torch.Tensor

    def __post_init__(self):
        if self.flow.dim() != 4 or self.flow.shape[1] != 2:
            raise ContractError(f"flow must be (B, 2, H, W), got {tuple(self.flow.shape)}")
        if self.occlusion.shape != (self.flow.shape[0], 1, *self.flow.shape[2:]):
            raise ContractError(f"occlusion must be (B, 1, H, W) matching the flow, got {tuple(self.occlusion.shape)}")
        occ = self.occlusion.detach()
        if torch.any(occ < 0) or torch.any(occ > 1):
            raise ContractError("occlusion values must lie in [0, 1]")


class FlowPredictor(nn.Module):
    """(identity code, motion code) -> WarpField at latent resolution.

    Flow is in latent-pixel units; occlusion goes through a sigmoid. With
    ``zero_init`` the head starts at zero flow and occlusion 0.5.
    """

    def __init__(self, id_dim: int, motion_dim: int, grid: tuple[int, int], hidden: int = 128,
                 max_flow: float | None = None, zero_init: bool = True):
        super().__init__()
        self.grid = tuple(grid)
        self.max_flow = max_flow
        self.fc = nn.Linear(id_dim + motion_dim, hidden)
        self.head = nn.Linear(hidden, 3 * self.grid[0] * self.grid[1])
        if zero_init:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, z_id: torch.Tensor, z_m: torch.Tensor) -> WarpField:
        out = self.head(F.silu(self.fc(torch.cat([z_id, z_m], dim=-1))))
        out = out.view(-1, 3, *self.grid)
        flow = out[:, :2]
        if self.max_flow is not None:
            flow = self.max_flow * torch.tanh(flow / self.max_flow)
        return WarpField(flow, torch.sigmoid(out[:, 2:]))


def warp_latent(source: torch.Tensor, field: WarpField) -> torch.Tensor:
    """Occlusion-gated bilinear warp of the source latent (border replication)."""
    if not torch.isfinite(field.flow).all():
        raise NumericError("non-finite flow field")
    if source.shape[0] != field.flow.shape[0] or source.shape[2:] != field.flow.shape[2:]:
        raise ContractError(f"source {tuple(source.shape)} does not match flow {tuple(field.flow.shape)}")
    return field.occlusion * bilinear_sample(source, field.flow)


def lip_mask(landmarks: torch.Tensor | np.ndarray, grid: tuple[int, int]) -> torch.Tensor:
    """Binary mask (B, 1, H, W) of latent cells inside the convex hull of the lip landmarks.

    Landmarks are (B, K, 2) normalised (x, y) in [0, 1]. Cells containing a
    landmark are always included, so degenerate hulls still give a non-empty mask.
    """
    pts = np.asarray(landmarks.detach().cpu() if isinstance(landmarks, torch.Tensor) else landmarks,
                     dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    h, w = grid
    cy, cx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    centres = np.stack([cx.ravel(), cy.ravel()], axis=-1)
    masks = np.zeros((len(pts), 1, h, w), dtype=np.float32)
    for b, p in enumerate(pts):
        inside = np.zeros(h * w, dtype=bool)
        try:
            inside = Delaunay(p).find_simplex(centres) >= 0
        except (QhullError, ValueError):
            pass
        m = inside.reshape(h, w)
        xi = np.clip((p[:, 0] * w).astype(int), 0, w - 1)
        yi = np.clip((p[:, 1] * h).astype(int), 0, h - 1)
        m[yi, xi] = True
        masks[b, 0] = m
    return torch.from_numpy(masks)


@dataclass
class LipGuidance:
    z_l: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.mask.shape != (self.z_l.shape[0], 1, *self.z_l.shape[2:]):
            raise ContractError(f"mask {tuple(self.mask.shape)} does not match guidance {tuple(self.z_l.shape)}")


class LandmarkProvider(Protocol):
    def __call__(self, n_frames: int) -> torch.Tensor: ...


class LipGuider(nn.Module):
    """Lip landmarks -> guidance map, zero outside the lip mask."""

    def __init__(self, n_points: int, channels: int, grid: tuple[int, int], hidden: int = 64):
        super().__init__()
        self.n_points, self.channels, self.grid = n_points, channels, tuple(grid)
        self.net = nn.Sequential(nn.Linear(2 * n_points, hidden), nn.SiLU(),
                                 nn.Linear(hidden, channels * self.grid[0] * self.grid[1]))

    def forward(self, landmarks: torch.Tensor) -> LipGuidance:
        if landmarks.dim() != 3 or landmarks.shape[1:] != (self.n_points, 2):
            raise ContractError(f"expected landmarks (B, {self.n_points}, 2), got {tuple(landmarks.shape)}")
        mask = lip_mask(landmarks, self.grid).to(landmarks.dtype)
        z_l = self.net(landmarks.flatten(1)).view(-1, self.channels, *self.grid)
        return LipGuidance(z_l * mask, mask)


def empty_guidance(like: torch.Tensor) -> LipGuidance:
    """No lip guidance: zero map and empty mask, for which refinement is the identity."""
    b, c, h, w = like.shape
    return LipGuidance(like.new_zeros(b, c, h, w), like.new_zeros(b, 1, h, w))


class LipRefiner(nn.Module):
    """z_wr = z_w + mask * tanh(conv_a([z_w, z_l])) * conv_b(z_l).

    ``conv_b`` has no bias and starts at zero, so the refiner is the identity at
    initialisation, whenever z_l is zero, and always outside the mask.
    """

    def __init__(self, channels: int, hidden: int = 32):
        super().__init__()
        self.conv_a = nn.Sequential(nn.Conv2d(2 * channels, hidden, 3, padding=1), nn.SiLU(),
                                    nn.Conv2d(hidden, channels, 3, padding=1))
        self.conv_b = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        nn.init.zeros_(self.conv_b.weight)

    def forward(self, z_w: torch.Tensor, guidance: LipGuidance) -> torch.Tensor:
        if guidance.z_l.shape != z_w.shape:
            raise ContractError(f"guidance {tuple(guidance.z_l.shape)} does not match latent {tuple(z_w.shape)}")
        z_l = guidance.z_l
        residual = torch.tanh(self.conv_a(torch.cat([z_w, z_l], dim=1))) * self.conv_b(z_l)
        return z_w + guidance.mask * residual


class Discriminator(nn.Module):
    """Three strided convs to a per-image probability."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 4, stride=2, padding=1),
        )

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images).mean(dim=(1, 2, 3))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(images))


def reconstruction_objective(target: torch.Tensor, recon: torch.Tensor, perceptual: FeatureExtractor,
                             discriminator: Callable[[torch.Tensor], torch.Tensor] | torch.Tensor | None
                             ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Total frame loss and its pixel L1, feature L1 and adversarial parts.

    ``discriminator`` is a module returning probabilities, precomputed
    probabilities for ``recon``, or None to drop the adversarial term. A
    probability of exactly 1 is accepted and gives zero adversarial loss.
    """
    if target.shape != recon.shape:
        raise ContractError(f"frame shapes differ: {tuple(target.shape)} vs {tuple(recon.shape)}")
    l_re = (target - recon).abs().mean()
    l_vgg = feature_l1(target, recon, perceptual)
    if discriminator is None:
        l_adv = recon.new_zeros(())
    else:
        prob = discriminator if isinstance(discriminator, torch.Tensor) else discriminator(recon)
        if not torch.isfinite(prob).all() or torch.any(prob <= 0) or torch.any(prob > 1):
            raise NumericError("discriminator output must lie in (0, 1]")
        l_adv = -torch.log(prob).mean()
    return l_re + l_vgg + l_adv, l_re, l_vgg, l_adv


def discriminator_loss(discriminator: Discriminator, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on real (label 1) and generated (label 0) frames."""
    lr, lf = discriminator.logits(real), discriminator.logits(fake.detach())
    return (F.binary_cross_entropy_with_logits(lr, torch.ones_like(lr))
            + F.binary_cross_entropy_with_logits(lf, torch.zeros_like(lf)))


class MotionModel(nn.Module):
    """Frame reconstruction through warped latents.

    ``quantize_in_training`` routes the refined latent through the codebook
    during motion training; by default quantization happens only in the
    decoder fine-tune phase.
    """

    def __init__(self, image_size: int = 64, channels: int = 16, motion_dim: int = 8, id_dim: int = 32,
                 n_lip_points: int = 8, hidden: int = 128, decoder_width: int = 32,
                 codebook: Codebook | None = None, quantize_in_training: bool = False):
        super().__init__()
        if image_size % 4:
            raise ContractError("image size must be divisible by 4")
        self.image_size, self.channels, self.motion_dim, self.id_dim = image_size, channels, motion_dim, id_dim
        self.n_lip_points, self.hidden, self.decoder_width = n_lip_points, hidden, decoder_width
        self.grid = (image_size // 4, image_size // 4)
        latent_shape = (channels, *self.grid)
        self.encoder = ImageEncoder(channels)
        self.identity_encoder = IdentityEncoder(latent_shape, id_dim, hidden)
        self.motion_encoder = MotionEncoder(latent_shape, motion_dim, hidden)
        self.flow = FlowPredictor(id_dim, motion_dim, self.grid, hidden, max_flow=float(self.grid[0]))
        self.lip_guider = LipGuider(n_lip_points, channels, self.grid)
        self.lip_refiner = LipRefiner(channels)
        self.decoder = HRDecoder(channels, decoder_width, upsample=4)
        self.codebook = codebook
        self.quantize_in_training = quantize_in_training

    def config(self) -> dict:
        return {"image_size": self.image_size, "channels": self.channels, "motion_dim": self.motion_dim,
                "id_dim": self.id_dim, "n_lip_points": self.n_lip_points, "hidden": self.hidden,
                "decoder_width": self.decoder_width}

    def encode_identity(self, source_latent: torch.Tensor) -> torch.Tensor:
        return self.identity_encoder(source_latent)

    def encode_motion(self, target_latent: torch.Tensor) -> torch.Tensor:
        return self.motion_encoder(target_latent)

    def predict_warp(self, z_id: torch.Tensor, z_m: torch.Tensor) -> WarpField:
        return self.flow(z_id, z_m)

    def guidance(self, like: torch.Tensor, landmarks: torch.Tensor | None) -> LipGuidance:
        return empty_guidance(like) if landmarks is None else self.lip_guider(landmarks)

    def synthesize(self, source_latent: torch.Tensor, z_id: torch.Tensor, z_m: torch.Tensor,
                   landmarks: torch.Tensor | None = None, quantize: bool = False) -> dict:
        """Warp, refine and decode one target frame per motion code."""
        field = self.predict_warp(z_id, z_m)
        z_w = warp_latent(source_latent, field)
        z_wr = self.lip_refiner(z_w, self.guidance(z_w, landmarks))
        out = {"field": field, "z_w": z_w, "z_wr": z_wr}
        if quantize:
            if self.codebook is None:
                raise ContractError("quantization requested but the model has no codebook")
            q = quantize_map(z_wr, self.codebook)
            out["quantized"] = q
            z_wr = q.channels_first()
        out["frame"] = self.decoder(z_wr)
        return out

    def forward(self, source: torch.Tensor, target: torch.Tensor, landmarks: torch.Tensor | None = None) -> dict:
        zs = self.encoder(source)
        zt = self.encoder(target)
        z_id = self.encode_identity(zs)
        z_m = self.encode_motion(zt)
        out = self.synthesize(zs, z_id, z_m, landmarks, quantize=self.quantize_in_training)
        out["z_m"] = z_m
        return out


def train_motion(model: MotionModel, frames: torch.Tensor, steps: int, perceptual: FeatureExtractor,
                 landmarks: torch.Tensor | None = None, discriminator: Discriminator | None = None,
                 lr: float = 1e-3, batch: int = 8, seed: int = 0, clip_ids: torch.Tensor | None = None,
                 adv_weight: float = 1.0) -> list[dict]:
    """Self-reconstruction on (source, target) pairs drawn from the same clip.

    ``clip_ids`` labels each frame with its clip; pairs never cross clips. When a
    discriminator is given its update alternates with the generator's.
    """
    torch.manual_seed(seed)
    g = generator(seed, "motion-train")
    n = len(frames)
    clip_ids = torch.zeros(n, dtype=torch.long) if clip_ids is None else torch.as_tensor(clip_ids)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=lr) if discriminator is not None else None
    history = []
    for step in range(steps):
        tgt = torch.randint(0, n, (batch,), generator=g)
        src = torch.empty_like(tgt)
        for i, t in enumerate(tgt.tolist()):
            same = torch.nonzero(clip_ids == clip_ids[t]).flatten()
            src[i] = same[torch.randint(0, len(same), (1,), generator=g)]
        lm = None if landmarks is None else landmarks[tgt]
        out = model(frames[src], frames[tgt], lm)
        prob = None
        if discriminator is not None:
            prob = discriminator(out["frame"]).clamp(min=1e-7)
        total, l_re, l_vgg, l_adv = reconstruction_objective(frames[tgt], out["frame"], perceptual, prob)
        loss = l_re + l_vgg + adv_weight * l_adv
        if "quantized" in out:
            loss = loss + code_loss(out["z_wr"].movedim(1, -1), out["quantized"].codewords)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        rec = {"loss": loss.item(), "l_re": l_re.item(), "l_vgg": l_vgg.item(), "l_adv": l_adv.item()}
        if discriminator is not None:
            d_loss = discriminator_loss(discriminator, frames[tgt], out["frame"])
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            rec["d_loss"] = d_loss.item()
        if not np.isfinite(rec["loss"]):
            raise NumericError(f"motion training loss non-finite at step {step}")
        history.append(rec)
    return history


@torch.no_grad()
def pairwise_reconstruction_error(model: MotionModel, frames: torch.Tensor,
                                  landmarks: torch.Tensor | None = None) -> float:
    """Mean pixel L1 of reconstructing every frame from every frame as source."""
    n = len(frames)
    src = torch.arange(n).repeat_interleave(n)
    tgt = torch.arange(n).repeat(n)
    out = model(frames[src], frames[tgt], None if landmarks is None else landmarks[tgt])
    return (out["frame"] - frames[tgt]).abs().mean().item()
