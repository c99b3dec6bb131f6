import numpy as np
import pytest
import torch
from torch import nn

from prior_talker.errors import ContractError, NumericError
from prior_talker.motion_space import (
    Discriminator,
    FlowPredictor,
    IdentityEncoder,
    LipGuidance,
    LipGuider,
    LipRefiner,
    MotionEncoder,
    MotionModel,
    WarpField,
    discriminator_loss,
    empty_guidance,
    lip_mask,
    pairwise_reconstruction_error,
    reconstruction_objective,
    train_motion,
    warp_latent,
)
from prior_talker.perceptual import IdentityExtractor, RandomConvExtractor
from prior_talker.synthetic import blob_frames, lip_landmarks
from prior_talker.vq_highres import Codebook

from gradcheck import fd_relative_error, n_params


def silu(x):
    return x / (1 + np.exp(-x))


def np_conv3x3(x, w, b=None):
    n, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,nchw->nohw", w[:, :, dy, dx], xp[:, :, dy:dy + h, dx:dx + wd])
    return out if b is None else out + b[None, :, None, None]


def field(flow, occ=None):
    b, _, h, w = flow.shape
    return WarpField(flow, torch.ones(b, 1, h, w, dtype=flow.dtype) if occ is None else occ)


class TestEncoders:
    def test_deterministic(self):
        enc = MotionEncoder((4, 3, 3), 5, hidden=8)
        x = torch.randn(2, 4, 3, 3)
        assert torch.equal(enc(x), enc(x))

    def test_zero_input_zero_bias(self):
        enc = IdentityEncoder((4, 3, 3), 5, hidden=8)
        nn.init.zeros_(enc.fc1.bias)
        nn.init.zeros_(enc.fc2.bias)
        assert torch.equal(enc(torch.zeros(2, 4, 3, 3)), torch.zeros(2, 5))

    def test_matches_matrix_oracle(self):
        enc = MotionEncoder((2, 3, 3), 4, hidden=6).double()
        x = torch.randn(3, 2, 3, 3, dtype=torch.float64)
        p = {k: v.detach().numpy() for k, v in enc.state_dict().items()}
        h = silu(x.reshape(3, -1).numpy() @ p["fc1.weight"].T + p["fc1.bias"])
        expected = h @ p["fc2.weight"].T + p["fc2.bias"]
        np.testing.assert_allclose(enc(x).detach().numpy(), expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            IdentityEncoder((4, 3, 3), 5)(torch.zeros(1, 4, 2, 2))


class TestFlowPredictor:
    def test_zero_init(self):
        fp = FlowPredictor(3, 2, (4, 4))
        f = fp(torch.randn(5, 3), torch.randn(5, 2))
        assert torch.equal(f.flow, torch.zeros(5, 2, 4, 4))
        assert torch.all(f.occlusion == 0.5)

    def test_occlusion_open_interval(self):
        fp = FlowPredictor(3, 2, (4, 4), zero_init=False)
        f = fp(torch.randn(64, 3) * 3, torch.randn(64, 2) * 3)
        assert torch.all(f.occlusion > 0) and torch.all(f.occlusion < 1)

    def test_matches_forward_oracle(self):
        torch.manual_seed(7)
        fp = FlowPredictor(3, 2, (2, 2), hidden=5, zero_init=False).double()
        zi, zm = torch.randn(2, 3, dtype=torch.float64), torch.randn(2, 2, dtype=torch.float64)
        p = {k: v.detach().numpy() for k, v in fp.state_dict().items()}
        h = silu(np.concatenate([zi.numpy(), zm.numpy()], 1) @ p["fc.weight"].T + p["fc.bias"])
        out = (h @ p["head.weight"].T + p["head.bias"]).reshape(2, 3, 2, 2)
        f = fp(zi, zm)
        np.testing.assert_allclose(f.flow.detach().numpy(), out[:, :2], atol=1e-12)
        np.testing.assert_allclose(f.occlusion.detach().numpy(), 1 / (1 + np.exp(-out[:, 2:])), atol=1e-12)

    def test_field_validation(self):
        with pytest.raises(ContractError):
            WarpField(torch.zeros(1, 2, 3, 3), torch.full((1, 1, 3, 3), 1.5))
        with pytest.raises(ContractError):
            WarpField(torch.zeros(1, 3, 3, 3), torch.ones(1, 1, 3, 3))


class TestWarp:
    def test_identity(self):
        src = torch.randn(2, 4, 5, 6)
        assert torch.equal(warp_latent(src, field(torch.zeros(2, 2, 5, 6))), src)

    def test_full_occlusion(self):
        src = torch.randn(1, 3, 4, 4)
        out = warp_latent(src, field(torch.randn(1, 2, 4, 4), torch.zeros(1, 1, 4, 4)))
        assert torch.equal(out, torch.zeros_like(src))

    def test_half_pixel_shift_averages_neighbours(self):
        ramp = torch.arange(16, dtype=torch.float64).view(1, 1, 4, 4)
        flow = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        flow[:, 0] = 0.5
        out = warp_latent(ramp, field(flow))[0, 0].numpy()
        r = ramp[0, 0].numpy()
        for y in range(4):
            for x in range(3):
                assert out[y, x] == (r[y, x] + r[y, x + 1]) / 2
            assert out[y, 3] == r[y, 3]  # border replication

    def test_diagonal_half_shift_manual_bilinear(self):
        ramp = torch.arange(16, dtype=torch.float64).view(1, 1, 4, 4) ** 1.5
        flow = torch.full((1, 2, 4, 4), 0.5, dtype=torch.float64)
        out = warp_latent(ramp, field(flow))[0, 0].numpy()
        r = ramp[0, 0].numpy()
        for y in range(3):
            for x in range(3):
                assert out[y, x] == pytest.approx((r[y, x] + r[y, x + 1] + r[y + 1, x] + r[y + 1, x + 1]) / 4,
                                                  rel=1e-14)

    def test_occlusion_scaling(self):
        src = torch.randn(1, 3, 5, 5)
        flow = torch.randn(1, 2, 5, 5)
        occ = torch.rand(1, 1, 5, 5)
        base = warp_latent(src, field(flow, occ))
        for c in (0.0, 0.25, 0.5, 1.0):
            assert torch.equal(warp_latent(src, field(flow, occ * c)), base * c)
        c = torch.rand(1, 1, 5, 5)
        torch.testing.assert_close(warp_latent(src, field(flow, occ * c)), base * c)

    def test_non_finite_flow(self):
        flow = torch.zeros(1, 2, 3, 3)
        flow[0, 0, 1, 1] = float("nan")
        with pytest.raises(NumericError):
            warp_latent(torch.randn(1, 1, 3, 3), field(flow))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            warp_latent(torch.randn(1, 1, 4, 4), field(torch.zeros(1, 2, 3, 3)))


class TestLips:
    def test_mask_of_square_hull(self):
        square = torch.tensor([[[0.25, 0.25], [0.75, 0.25], [0.75, 0.75], [0.25, 0.75]]])
        m = lip_mask(square, (8, 8))[0, 0].numpy()
        centres = (np.arange(8) + 0.5) / 8
        inside = (centres >= 0.25) & (centres <= 0.75)
        expected = inside[:, None] & inside[None, :]
        # landmarks on the 0.75 edge fall in cell 6, which is always included
        for y, x in ((2, 6), (6, 2), (6, 6)):
            expected[y, x] = True
        np.testing.assert_array_equal(m.astype(bool), expected)

    def test_degenerate_hull_not_empty(self):
        line = torch.tensor([[[0.1, 0.5], [0.5, 0.5], [0.9, 0.5]]])
        assert lip_mask(line, (8, 8)).sum() >= 2

    def test_guidance_supported_on_mask(self):
        guider = LipGuider(8, 4, (8, 8))
        g = guider(lip_landmarks(3))
        assert torch.all(g.z_l[(g.mask == 0).expand_as(g.z_l)] == 0)
        assert g.mask.sum() > 0

    def _random_refiner(self, channels=3):
        torch.manual_seed(3)
        ref = LipRefiner(channels, hidden=4).double()
        nn.init.normal_(ref.conv_b.weight)
        return ref

    def test_zero_guidance_identity(self):
        ref = self._random_refiner()
        z = torch.randn(2, 3, 6, 6, dtype=torch.float64)
        mask = torch.ones(2, 1, 6, 6, dtype=torch.float64)
        assert torch.equal(ref(z, LipGuidance(torch.zeros_like(z), mask)), z)
        assert torch.equal(ref(z, empty_guidance(z)), z)

    def test_zero_initialised_identity(self):
        ref = LipRefiner(3).double()
        z = torch.randn(2, 3, 6, 6, dtype=torch.float64)
        g = LipGuidance(torch.randn_like(z), torch.ones(2, 1, 6, 6, dtype=torch.float64))
        assert torch.equal(ref(z, g), z)

    def test_locality(self):
        ref = self._random_refiner()
        z = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        mask = lip_mask(lip_landmarks(2), (8, 8)).double()
        out = ref(z, LipGuidance(torch.randn_like(z) * mask, mask))
        outside = (mask == 0).expand_as(z)
        assert torch.equal(out[outside], z[outside])
        assert not torch.equal(out[~outside], z[~outside])

    def test_matches_conv_oracle(self):
        ref = self._random_refiner(2)
        z = torch.randn(1, 2, 5, 5, dtype=torch.float64)
        zl = torch.randn(1, 2, 5, 5, dtype=torch.float64)
        mask = (torch.rand(1, 1, 5, 5) > 0.5).double()
        p = {k: v.detach().numpy() for k, v in ref.state_dict().items()}
        a = silu(np_conv3x3(np.concatenate([z.numpy(), zl.numpy()], 1), p["conv_a.0.weight"], p["conv_a.0.bias"]))
        a = np_conv3x3(a, p["conv_a.2.weight"], p["conv_a.2.bias"])
        expected = z.numpy() + mask.numpy() * np.tanh(a) * np_conv3x3(zl.numpy(), p["conv_b.weight"])
        np.testing.assert_allclose(ref(z, LipGuidance(zl, mask)).detach().numpy(), expected, atol=1e-12)


class TestObjective:
    def test_perfect_reconstruction(self):
        x = torch.rand(2, 3, 8, 8)
        total, l_re, l_vgg, l_adv = reconstruction_objective(x, x.clone(), RandomConvExtractor(), torch.ones(2))
        assert total.item() == l_re.item() == l_vgg.item() == l_adv.item() == 0.0

    def test_zeros_vs_ones(self):
        _, l_re, _, _ = reconstruction_objective(torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4),
                                                 IdentityExtractor(), None)
        assert l_re.item() == 1.0

    def test_terms_match_recomputation(self):
        ext = RandomConvExtractor(widths=(4, 6), seed=2).double()
        disc = Discriminator(4).double()
        a, b = torch.rand(2, 3, 8, 8, dtype=torch.float64), torch.rand(2, 3, 8, 8, dtype=torch.float64)
        total, l_re, l_vgg, l_adv = reconstruction_objective(a, b, ext, disc)
        fa, fb = ext(a), ext(b)
        vgg = sum(np.abs(x.numpy() - y.numpy()).mean() for x, y in zip(fa, fb))
        with torch.no_grad():
            logits = disc.net(b).mean(dim=(1, 2, 3)).numpy()
        adv = np.mean(np.log1p(np.exp(-logits)))
        assert l_re.item() == pytest.approx(np.abs(a.numpy() - b.numpy()).mean(), rel=1e-12)
        assert l_vgg.item() == pytest.approx(vgg, rel=1e-12)
        assert l_adv.item() == pytest.approx(adv, rel=1e-10)
        assert total.item() == pytest.approx(l_re.item() + l_vgg.item() + l_adv.item(), rel=1e-14)

    @pytest.mark.parametrize("p", [0.0, -0.1, 1.2, float("nan")])
    def test_discriminator_range(self, p):
        x = torch.rand(1, 3, 4, 4)
        with pytest.raises(NumericError):
            reconstruction_objective(x, x, IdentityExtractor(), torch.tensor([p]))

    def test_fd_gradient(self):
        torch.manual_seed(0)
        gen = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.SiLU(), nn.Conv2d(4, 3, 3, padding=1),
                            nn.Sigmoid()).double()
        disc = Discriminator(2).double()
        ext = RandomConvExtractor(widths=(3, 4), seed=1).double()
        x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        target = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        params = [*gen.parameters(), *disc.parameters()]
        assert n_params(params) <= 2000
        err, _, _ = fd_relative_error(lambda: reconstruction_objective(target, gen(x), ext, disc)[0], params)
        assert err < 1e-4
        err, _, _ = fd_relative_error(lambda: discriminator_loss(disc, target, gen(x)), list(disc.parameters()))
        assert err < 1e-4


class TestMotionModel:
    def test_untrained_is_occluded_identity_warp(self):
        model = MotionModel(image_size=16, channels=4, motion_dim=3, id_dim=5, hidden=16, decoder_width=8)
        x = torch.rand(2, 3, 16, 16)
        out = model(x, x)
        zs = model.encoder(x)
        assert torch.equal(out["z_w"], 0.5 * zs)
        assert torch.equal(out["z_wr"], out["z_w"])
        assert out["frame"].shape == x.shape
        assert out["z_m"].shape == (2, 3)

    def test_quantized_path(self):
        model = MotionModel(image_size=16, channels=4, motion_dim=3, id_dim=5, hidden=16, decoder_width=8,
                            codebook=Codebook(8, 4), quantize_in_training=True)
        frames = blob_frames(2, 16)
        hist = train_motion(model, frames, 2, IdentityExtractor(), batch=2)
        assert len(hist) == 2 and np.isfinite(hist[-1]["loss"])

    def test_pairs_stay_within_clip(self):
        model = MotionModel(image_size=16, channels=4, motion_dim=3, id_dim=5, hidden=16, decoder_width=8)
        seen = []
        orig = model.forward

        def spy(src, tgt, lm=None):
            seen.append((src.clone(), tgt.clone()))
            return orig(src, tgt, lm)

        model.forward = spy
        frames = torch.stack([torch.full((3, 16, 16), float(i)) for i in range(4)])
        train_motion(model, frames, 3, IdentityExtractor(), batch=4, clip_ids=torch.tensor([0, 0, 1, 1]))
        for src, tgt in seen:
            assert torch.equal(src[:, 0, 0, 0] // 2, tgt[:, 0, 0, 0] // 2)


@pytest.mark.slow
def test_two_frame_overfit():
    frames = blob_frames(2, 32, shift=3.0)
    torch.manual_seed(0)
    model = MotionModel(image_size=32, channels=16, motion_dim=8, id_dim=16, hidden=64, decoder_width=32)
    train_motion(model, frames, 500, RandomConvExtractor(), landmarks=lip_landmarks(2), batch=4, lr=2e-3)
    assert pairwise_reconstruction_error(model, frames, lip_landmarks(2)) < 0.02
