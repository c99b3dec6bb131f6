import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from prior_talker import container
from prior_talker.errors import ContractError, UsageError
from prior_talker.eval_metrics import psnr
from prior_talker.synthetic import face_image
from prior_talker.vq_highres import (
    COMMITMENT_WEIGHT,
    Codebook,
    HRDecoder,
    code_loss,
    decode_hr,
    quantize,
    quantize_map,
)


def brute_force_indices(z, entries):
    """Pixel-by-pixel scan over the codebook in plain Python floats."""
    zs = z.reshape(-1, z.shape[-1]).double().numpy()
    cs = entries.double().numpy()
    out = []
    for v in zs:
        best, best_d = 0, None
        for k, c in enumerate(cs):
            d = float(((v - c) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out).reshape(z.shape[:-1])


class TestQuantize:
    def test_exact_codeword(self):
        entries = torch.randn(8, 4)
        q = quantize(entries[3].view(1, 1, 4), entries)
        assert q.indices.item() == 3

    def test_tie_goes_to_lowest_index(self):
        entries = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
        q = quantize(torch.zeros(1, 1, 2), entries)
        assert q.indices.item() == 0

    def test_matches_brute_force_8x8(self):
        g = torch.Generator().manual_seed(0)
        z = torch.randn(8, 8, 4, generator=g)
        entries = torch.randn(16, 4, generator=g)
        np.testing.assert_array_equal(quantize(z, entries).indices.numpy(), brute_force_indices(z, entries))

    def test_values_are_codewords_exactly(self):
        book = Codebook(32, 6)
        z = torch.randn(2, 5, 5, 6)
        q = quantize(z, book)
        assert torch.equal(q.values, book.entries[q.indices])
        assert torch.equal(q.codewords, book.entries[q.indices])

    def test_distance_optimality(self):
        z = torch.randn(64, 5, dtype=torch.float64)
        entries = torch.randn(20, 5, dtype=torch.float64)
        q = quantize(z, entries)
        d = ((z[:, None] - entries[None]) ** 2).sum(-1)
        chosen = d.gather(1, q.indices[:, None])
        assert torch.all(chosen <= d)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_idempotent(self, seed):
        g = torch.Generator().manual_seed(seed)
        entries = torch.randn(10, 3, generator=g)
        q = quantize(torch.randn(4, 4, 3, generator=g), entries)
        assert torch.equal(quantize(q.values, entries).indices, q.indices)

    def test_straight_through_gradient_equals_identity_path(self):
        book = Codebook(16, 4)
        z = torch.randn(3, 3, 4, requires_grad=True)
        w = torch.randn(3, 3, 4)

        def downstream(x):
            return (torch.sin(x) * w).sum()

        downstream(quantize(z, book).values).backward()
        # identity path: the same downstream loss differentiated at the quantized point
        x = quantize(z, book).values.detach().requires_grad_()
        downstream(x).backward()
        assert torch.equal(z.grad, x.grad)

    def test_codebook_gets_no_gradient_through_values(self):
        book = Codebook(8, 2)
        z = torch.randn(2, 2, 2, requires_grad=True)
        quantize(z, book).values.sum().backward()
        assert book.entries.grad is None

    def test_channels_first_helper(self):
        book = Codebook(8, 3)
        z = torch.randn(2, 3, 4, 5)
        q = quantize_map(z, book)
        assert q.indices.shape == (2, 4, 5)
        assert q.channels_first().shape == (2, 3, 4, 5)

    def test_errors(self):
        with pytest.raises(UsageError):
            quantize(torch.randn(2, 3), torch.zeros(0, 3))
        with pytest.raises(ContractError):
            quantize(torch.randn(2, 3), torch.randn(4, 5))
        with pytest.raises(UsageError):
            Codebook(0, 3)


class TestCodeLoss:
    def test_on_codeword_zero(self):
        z = torch.randn(4, 3)
        assert code_loss(z, z.clone()).item() == 0.0

    def test_matches_arithmetic(self):
        z, zq = torch.randn(5, 4, dtype=torch.float64), torch.randn(5, 4, dtype=torch.float64)
        w = 0.7
        expected = (1 + w) * np.mean((z.numpy() - zq.numpy()) ** 2)
        assert code_loss(z, zq, w).item() == pytest.approx(expected, rel=1e-12)

    def test_zero_weight_gives_no_latent_gradient(self):
        z = torch.randn(5, 4, requires_grad=True)
        zq = torch.randn(5, 4, requires_grad=True)
        code_loss(z, zq, 0.0).backward()
        assert z.grad is None or torch.count_nonzero(z.grad) == 0
        assert zq.grad.abs().sum() > 0

    def test_gradient_split(self):
        z = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
        zq = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
        code_loss(z, zq).backward()
        n = z.numel()
        torch.testing.assert_close(z.grad, COMMITMENT_WEIGHT * 2 * (z - zq).detach() / n)
        torch.testing.assert_close(zq.grad, 2 * (zq - z).detach() / n)

    def test_non_negative_and_weight_validation(self):
        assert code_loss(torch.randn(3), torch.randn(3)).item() >= 0
        with pytest.raises(UsageError):
            code_loss(torch.randn(3), torch.randn(3), -0.1)
        with pytest.raises(ContractError):
            code_loss(torch.randn(3), torch.randn(4))


class TestDecoder:
    def test_zero_latent_is_mid_gray(self):
        dec = HRDecoder(8, 4)
        for m in dec.modules():
            if isinstance(m, torch.nn.Conv2d):
                torch.nn.init.zeros_(m.bias)
        out = decode_hr(torch.zeros(1, 8, 4, 4), dec)
        assert out.shape == (1, 3, 16, 16)
        assert torch.all(out == 0.5)

    def test_deterministic_bytes(self):
        dec = HRDecoder(8, 4, upsample=2)
        book = Codebook(16, 8)
        q = quantize(torch.randn(1, 4, 4, 8), book)
        a = decode_hr(q, dec).detach().numpy().tobytes()
        b = decode_hr(q, dec).detach().numpy().tobytes()
        assert a == b

    def test_shape_and_factor_checks(self):
        with pytest.raises(ContractError):
            HRDecoder(8, upsample=3)
        with pytest.raises(ContractError):
            HRDecoder(8)(torch.zeros(1, 4, 2, 2))

    def test_codebook_checkpoint_roundtrip(self, tmp_path):
        book = Codebook(16, 4, seed=3)
        container.save_module(tmp_path / "book.ptlk", book, {"kind": "codebook"})
        tensors, meta = container.load(tmp_path / "book.ptlk")
        other = Codebook(16, 4, seed=9)
        other.load_state_dict(container.load_state_dict(tensors))
        assert torch.equal(other.entries, book.entries)

    @pytest.mark.slow
    def test_overfit_single_face(self):
        torch.manual_seed(0)
        image = face_image(64)[None]
        book = Codebook(256, 64, seed=1)
        with torch.no_grad():
            book.entries.normal_()
        idx = torch.randint(0, 256, (1, 16, 16), generator=torch.Generator().manual_seed(2))
        q = quantize(book.entries[idx].detach(), book)
        assert torch.equal(q.indices, idx)
        z = q.channels_first().detach()
        dec = HRDecoder(64, 32, upsample=4)
        opt = torch.optim.Adam(dec.parameters(), lr=2e-3)
        for _ in range(1000):
            out = decode_hr(z, dec)
            loss = F.mse_loss(out, image)
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert psnr(decode_hr(z, dec), image) > 30
