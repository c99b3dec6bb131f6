import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from prior_talker.diffusion_core import MLPDenoiser, NoiseSchedule, ldm_loss
from prior_talker.errors import ContractError, UsageError
from prior_talker.portrait_prior import (
    CONVERGENCE_GRID,
    DEFAULT_PRIOR_SIZE,
    GENDER_RATIO_GRID,
    STATIC_BETA,
    FacePrior,
    PortraitDiffusion,
    PriorAccumulator,
    SampleAdaptiveWeighting,
    compute_prior,
    diversity_consistency_probe,
    gender_ratio_study,
    load_prior,
    portrait_diffusion_loss,
    prior_convergence_curve,
    prior_guided_noise,
    saw_weights,
    save_prior,
    verify_prior,
)
from prior_talker.synthetic import gender_pools

from gradcheck import fd_relative_error, n_params


class TestComputePrior:
    def test_identical_vectors(self):
        v = np.random.default_rng(1).standard_normal(8)
        prior = compute_prior([np.tile(v, (DEFAULT_PRIOR_SIZE, 1))])
        np.testing.assert_allclose(prior.vector, v, rtol=0, atol=1e-12)
        assert prior.sample_count == DEFAULT_PRIOR_SIZE

    def test_two_points(self):
        np.testing.assert_array_equal(compute_prior([[1.0, 0.0], [0.0, 1.0]]).vector, [0.5, 0.5])

    def test_standard_normal_pool_matches_naive_mean(self):
        x = np.random.default_rng(2).standard_normal((10_000, 32))
        prior = compute_prior([x])
        np.testing.assert_allclose(prior.vector, x.mean(axis=0), rtol=0, atol=1e-12)
        assert np.abs(prior.vector).max() < 0.05

    def test_streaming_rows_equals_block(self):
        x = np.random.default_rng(3).standard_normal((700, 5))
        np.testing.assert_allclose(compute_prior(iter(x)).vector, compute_prior([x]).vector, atol=1e-13)

    def test_compensated_sum_beats_naive_float32_drift(self):
        # large offset plus small signal: a float32 running sum would lose the signal
        x = 1e6 + np.random.default_rng(4).standard_normal((50_000, 3))
        np.testing.assert_allclose(compute_prior([x]).vector, np.mean(x, axis=0, dtype=np.longdouble), atol=1e-8)

    def test_empty_stream(self):
        with pytest.raises(UsageError):
            compute_prior([])

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            compute_prior([np.zeros(3), np.zeros(4)])

    def test_gender_ratio_and_manifest(self):
        prior = compute_prior([np.zeros((3, 2)), np.ones((1, 2))], genders=[[1, 1, 0], [0]])
        assert prior.gender_ratio == 0.5
        assert prior.manifest["female_count"] == 2

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**31 - 1))
    def test_mean_linearity_under_merge(self, na, nb, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((na, 6)) * 10
        b = rng.standard_normal((nb, 6)) + 3
        merged = PriorAccumulator().add(a).merge(PriorAccumulator().add(b)).mean()
        expected = (na * compute_prior([a]).vector + nb * compute_prior([b]).vector) / (na + nb)
        np.testing.assert_allclose(merged, expected, rtol=0, atol=1e-9)
        np.testing.assert_allclose(merged, compute_prior([np.vstack([a, b])]).vector, rtol=0, atol=1e-9)

    def test_save_load_roundtrip_is_exact(self, tmp_path):
        x = np.random.default_rng(5).standard_normal((1000, 16))
        prior = compute_prior([x])
        save_prior(tmp_path / "prior.ptlk", prior)
        loaded = load_prior(tmp_path / "prior.ptlk")
        assert loaded.sample_count == 1000
        assert verify_prior(loaded, x, atol=1e-12)
        assert np.abs(loaded.vector - prior.vector).max() < 1e-13

    def test_verify_detects_tampering(self):
        x = np.random.default_rng(6).standard_normal((10, 4))
        prior = compute_prior([x])
        assert verify_prior(prior, x)
        assert not verify_prior(FacePrior(prior.vector + 1e-6, 10), x)
        assert not verify_prior(prior, x[:9])


class TestConvergence:
    def test_identical_embeddings_zero(self):
        curve = prior_convergence_curve(np.ones((15_000, 4)))
        assert [n for n, _ in curve] == list(CONVERGENCE_GRID[1:])
        assert all(d == 0 for _, d in curve)

    def test_decay_matches_standard_error(self):
        d = 64
        x = np.random.default_rng(7).standard_normal((15_000, d))
        curve = prior_convergence_curve(x, n_shuffles=8, seed=1)
        cps = CONVERGENCE_GRID
        # prior(N_i) - prior(N_{i-1}) has per-dimension variance 1/N_{i-1} - 1/N_i
        expected = [d * np.sqrt(2 / np.pi) * np.sqrt(1 / a - 1 / b) for a, b in zip(cps, cps[1:])]
        np.testing.assert_allclose([v for _, v in curve], expected, rtol=0.15)
        assert curve[-1][1] < curve[0][1]

    def test_checkpoint_beyond_pool(self):
        with pytest.raises(UsageError):
            prior_convergence_curve(np.zeros((1000, 2)))

    def test_non_increasing_checkpoints(self):
        with pytest.raises(UsageError):
            prior_convergence_curve(np.zeros((1000, 2)), [100, 100, 500])


class TestGenderStudy:
    def test_balanced_is_zero_and_grid(self):
        emb, g = gender_pools(2000, dim=8, shift=1.0)
        out = gender_ratio_study(emb, g, n=2000)
        assert [r for r, _ in out] == list(GENDER_RATIO_GRID)
        assert dict(out)[0.5] == 0.0

    def test_mixture_mean_closed_form(self):
        d, mu = 16, 1.0
        emb, g = gender_pools(10_000, dim=d, shift=mu)
        out = dict(gender_ratio_study(emb, g, n=10_000))
        # subset mean shifts by (2r - 1) * mu per dimension relative to the balanced mixture
        for r in (0.0, 0.25, 0.75, 1.0):
            assert out[r] == pytest.approx(d * abs(2 * r - 1) * mu, rel=0.1)

    def test_insufficient_pool(self):
        emb, g = gender_pools(100, dim=4)
        with pytest.raises(UsageError):
            gender_ratio_study(emb, g, n=150)


class TestSAW:
    def test_bias_only_gate(self):
        saw = SampleAdaptiveWeighting(3, 4)
        with torch.no_grad():
            saw.W_s.zero_()
            saw.W_p.zero_()
            saw.b.fill_(1.0)
        beta = saw_weights(saw, torch.randn(5, 3), torch.randn(4))
        assert torch.equal(beta, torch.ones(5, 4))

    def test_default_init_matches_static_baseline(self):
        saw = SampleAdaptiveWeighting(3, 4, init_std=0.0)
        beta = saw_weights(saw, torch.randn(2, 3), FacePrior(np.ones(4), 1))
        assert torch.allclose(beta, torch.full((2, 4), STATIC_BETA))

    def test_matches_hand_matvec(self):
        saw = SampleAdaptiveWeighting(3, 4, init_std=1.0, seed=11).double()
        zs = torch.randn(2, 3, dtype=torch.float64)
        zp = torch.randn(4, dtype=torch.float64)
        Ws, Wp, b = (p.detach().numpy() for p in (saw.W_s, saw.W_p, saw.b))
        for i in range(2):
            expected = [sum(Ws[r, c] * zs[i, c].item() for c in range(3))
                        + sum(Wp[r, c] * zp[c].item() for c in range(4)) + b[r] for r in range(4)]
            np.testing.assert_allclose(saw_weights(saw, zs, zp)[i].detach().numpy(), expected, atol=1e-12)

    def test_shape_check(self):
        with pytest.raises(ContractError):
            SampleAdaptiveWeighting(3, 4)(torch.randn(2, 5), torch.randn(4))


class TestPriorGuidedNoise:
    def test_zero_gate_is_identity(self):
        eps = torch.randn(3, 4)
        assert torch.equal(prior_guided_noise(torch.randn(4), torch.zeros(3, 4), eps), eps)

    def test_unit_gate_no_noise(self):
        zp = torch.randn(4)
        assert torch.equal(prior_guided_noise(zp, torch.ones(4), torch.zeros(4)), zp)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            prior_guided_noise(torch.randn(4), torch.ones(4), torch.zeros(5))

    def test_moments_monte_carlo(self):
        d, n = 6, 100_000
        g = torch.Generator().manual_seed(3)
        zp = torch.randn(d, generator=g, dtype=torch.float64) * 3
        beta = torch.rand(d, generator=g, dtype=torch.float64)
        draws = prior_guided_noise(zp, beta, torch.randn(n, d, generator=g, dtype=torch.float64)).numpy()
        mean = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(mean - (beta * zp).numpy()) < 3 * se)
        cov = np.cov(draws, rowvar=False)
        np.testing.assert_allclose(np.diag(cov), 1.0, rtol=0.05)
        assert np.abs(cov - np.diag(np.diag(cov))).max() < 0.05


def _toy_setup(dtype=torch.float64):
    torch.manual_seed(0)
    d, ds = 4, 3
    denoiser = MLPDenoiser(d, ds, hidden=8, n_blocks=1, time_dim=4).to(dtype)
    saw = SampleAdaptiveWeighting(ds, d, init_std=0.3, seed=2).to(dtype)
    b = 5
    zs = torch.randn(b, ds, dtype=dtype)
    z0 = torch.randn(b, d, dtype=dtype)
    zp = torch.randn(d, dtype=dtype)
    eps = torch.randn(b, d, dtype=dtype)
    t = torch.tensor([1, 10, 25, 40, 50])
    return denoiser, saw, zs, z0, zp, eps, t


class TestPortraitLoss:
    def test_zero_gate_equals_ldm_loss_bitwise(self):
        denoiser, _, zs, z0, zp, eps, t = _toy_setup(torch.float32)
        sched = NoiseSchedule.linear()
        a = portrait_diffusion_loss(denoiser, zs, z0, t, eps, zp, torch.zeros(4), sched)
        b = ldm_loss(denoiser, zs, z0, t, eps, sched)
        assert torch.equal(a, b)

    def test_perfect_predictor_zero(self):
        _, saw, zs, z0, zp, eps, t = _toy_setup()
        sched = NoiseSchedule.linear()
        shifted = prior_guided_noise(zp, saw(zs, zp), eps).detach()
        # the target is the shifted noise; an oracle returning it has zero loss
        loss = portrait_diffusion_loss(lambda zt, tt, c: shifted, zs, z0, t, eps, zp, saw, sched)
        assert loss.item() == 0.0

    def test_noised_input_matches_hand_formula(self):
        _, saw, zs, z0, zp, eps, t = _toy_setup()
        sched = NoiseSchedule.linear()
        seen = {}

        def spy(zt, tt, c):
            seen["zt"] = zt
            return torch.zeros_like(zt)

        portrait_diffusion_loss(spy, zs, z0, t, eps, zp, saw, sched)
        alpha = torch.tensor([sched.alphas[i] for i in t], dtype=torch.float64)[:, None]
        beta = saw(zs, zp).detach()
        expected = alpha * z0 + (1 - alpha) * (beta * zp + eps)
        torch.testing.assert_close(seen["zt"].detach(), expected, rtol=0, atol=1e-12)

    def test_fd_gradient_all_parameters(self):
        denoiser, saw, zs, z0, zp, eps, t = _toy_setup()
        params = list(denoiser.parameters()) + list(saw.parameters())
        assert n_params(params) <= 2000
        sched = NoiseSchedule.linear()
        err, _, _ = fd_relative_error(lambda: portrait_diffusion_loss(denoiser, zs, z0, t, eps, zp, saw, sched),
                                      params)
        assert err < 1e-4

    def test_fd_gradient_wrt_prior_projection(self):
        denoiser, saw, zs, z0, zp, eps, t = _toy_setup()
        sched = NoiseSchedule.linear()
        err, auto, _ = fd_relative_error(lambda: portrait_diffusion_loss(denoiser, zs, z0, t, eps, zp, saw, sched),
                                         [saw.W_p])
        assert err < 1e-4
        assert auto.abs().max() > 0

    def test_all_gate_parameters_receive_gradient(self):
        denoiser, saw, zs, z0, zp, eps, t = _toy_setup()
        portrait_diffusion_loss(denoiser, zs, z0, t, eps, zp, saw, NoiseSchedule.linear()).backward()
        for p in saw.parameters():
            assert p.grad is not None and p.grad.abs().max() > 0


class TestPortraitModel:
    def _model(self, guidance="saw"):
        torch.manual_seed(0)
        return PortraitDiffusion(np.ones(4), 3, guidance=guidance, hidden=16)

    def test_gates(self):
        zs = torch.randn(2, 3)
        assert torch.equal(self._model("none").gate(zs), torch.zeros(2, 4))
        assert torch.allclose(self._model("static").gate(zs), torch.full((2, 4), STATIC_BETA))
        assert self._model("saw").gate(zs).requires_grad

    def test_frozen_init_noise_has_zero_diversity(self):
        div, cons = diversity_consistency_probe(self._model(), torch.randn(2, 3), 4, init_noise=torch.randn(4))
        assert div == 0.0
        assert np.isnan(cons)

    def test_probe_needs_two_seeds(self):
        with pytest.raises(UsageError):
            diversity_consistency_probe(self._model(), torch.randn(2, 3), 1)

    def test_untrained_consistency_is_random_latent_scale(self):
        # an untrained denoiser's output is unrelated to the target
        model = self._model("none")
        targets = torch.randn(64, 4)
        _, cons = diversity_consistency_probe(model, torch.randn(64, 3), 2, target=targets)
        assert cons > 0.5
