import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from tocomm import channel as ch
from tocomm import transceiver as tx
from tocomm.objectives import vib_loss

SHAPE = (1, 8, 8)


def _x(batch=6, seed=0, shape=SHAPE):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((batch,) + shape, generator=g)


class TestEncode:
    def test_deterministic_mode_is_mu(self):
        enc = tx.Encoder("conv-small", SHAPE, 8)
        x = _x()
        z, mu, logvar = tx.encode(x, enc, "deterministic")
        assert torch.equal(z, mu)

    def test_vanishing_variance_collapses_to_mu(self):
        enc = tx.Encoder("mlp-small", SHAPE, 8)
        with torch.no_grad():
            enc.logvar_head.weight.zero_()
            enc.logvar_head.bias.fill_(-50.0)  # clamped to -10, sigma ~ 6.7e-3
        x = _x()
        z, mu, logvar = tx.encode(x, enc, "stochastic", torch.Generator().manual_seed(0))
        assert float(logvar.detach().max()) == -10.0
        assert float((z - mu).detach().abs().max()) < 0.05

    def test_same_rng_same_codes(self):
        enc = tx.Encoder("mlp-small", SHAPE, 8)
        x = _x()
        z1, _, _ = tx.encode(x, enc, "stochastic", torch.Generator().manual_seed(7))
        z2, _, _ = tx.encode(x, enc, "stochastic", torch.Generator().manual_seed(7))
        assert torch.equal(z1, z2)

    def test_shape_mismatch_rejected(self):
        enc = tx.Encoder("conv-small", SHAPE, 8)
        with pytest.raises(ValueError):
            tx.encode(torch.zeros(2, 1, 4, 4), enc)

    def test_logvar_clamped(self):
        enc = tx.Encoder("mlp-small", SHAPE, 8)
        with torch.no_grad():
            enc.logvar_head.bias.fill_(99.0)
        _, _, logvar = tx.encode(_x(), enc, "deterministic")
        assert float(logvar.detach().max()) == 10.0


class TestDecode:
    def test_finite_scores_and_softmax_normalization(self):
        dec = tx.Decoder(8, 10)
        zhat = torch.randn(5, 8, generator=torch.Generator().manual_seed(1))
        scores = tx.decode(zhat, dec)
        assert torch.isfinite(scores).all()
        probs = F.softmax(scores, dim=1)
        assert torch.allclose(probs.sum(1), torch.ones(5), atol=1e-6)

    def test_stateless_duplicate_rows(self):
        dec = tx.Decoder(8, 4)
        row = torch.randn(1, 8, generator=torch.Generator().manual_seed(2))
        batch = row.repeat(6, 1)
        scores = tx.decode(batch, dec)
        assert torch.allclose(scores, scores[0].expand_as(scores))

    def test_dimension_mismatch(self):
        dec = tx.Decoder(8, 4)
        with pytest.raises(ValueError):
            tx.decode(torch.zeros(2, 9), dec)


class TestModulate:
    def _mod(self, positions=3, temperature=1.0):
        return tx.Modulator(16, positions, np.array([-1.0, 1.0]), temperature)

    def test_hard_one_hot_scores_give_exact_symbol(self):
        mod = self._mod()
        feats = torch.randn(4, 16, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            scores = mod.scores(feats)
        hard = tx.modulate(feats, mod, hard=True)
        # every output is exactly a constellation point
        assert set(np.unique(hard.detach().numpy())) <= {-1.0, 1.0}
        idx = scores.argmax(-1)
        expect = mod.symbols[idx].reshape(4, -1)
        assert torch.equal(hard.detach(), expect)

    def test_soft_low_temperature_converges_to_hard(self):
        g = torch.Generator().manual_seed(3)
        feats = torch.randn(16, 16, generator=g)
        mod_cold = tx.Modulator(16, 4, np.array([-1.0, 1.0]), temperature=1e-3)
        with torch.no_grad():
            mod_cold.head.weight.copy_(torch.randn(8, 16, generator=g))
            mod_cold.head.bias.zero_()
        soft = tx.modulate(feats, mod_cold, hard=False)
        hard = tx.modulate(feats, mod_cold, hard=True)
        assert float((soft - hard).abs().max()) < 1e-3

    def test_soft_output_inside_convex_hull(self):
        mod = self._mod(positions=5)
        feats = torch.randn(32, 16, generator=torch.Generator().manual_seed(4))
        soft = tx.modulate(feats, mod, hard=False)
        assert float(soft.min()) >= -1.0 - 1e-6
        assert float(soft.max()) <= 1.0 + 1e-6

    def test_straight_through_gradient_flows(self):
        mod = self._mod()
        feats = torch.randn(4, 16, generator=torch.Generator().manual_seed(5))
        out = tx.modulate(feats, mod, hard=True)
        out.pow(2).sum().backward()
        grads = [p.grad for p in mod.head.parameters()]
        assert all(g is not None and g.abs().sum() > 0 for g in grads)

    def test_temperature_validation(self):
        with pytest.raises(ValueError):
            tx.Modulator(16, 3, np.array([-1.0, 1.0]), temperature=0.0)
        with pytest.raises(ValueError):
            tx.Modulator(16, 3, np.array([1.0]))


class TestHyperAdapter:
    def test_fresh_adapter_is_identity(self):
        enc = tx.Encoder("conv-small", SHAPE, 8)
        adapter = tx.HyperAdapter(enc.film_shapes)
        x = _x()
        base_mu, base_lv = enc(x)
        for snr in [-5.0, 0.0, 15.0, 30.0]:
            adapted = tx.hyper_adapt(enc, snr, adapter)
            mu, lv = adapted(x)
            assert float((mu - base_mu).abs().max()) < 1e-6
            assert float((lv - base_lv).abs().max()) < 1e-6

    def test_trained_adapter_differentiates_snrs(self):
        enc = tx.Encoder("conv-small", SHAPE, 8)
        adapter = tx.HyperAdapter(enc.film_shapes)
        with torch.no_grad():  # any nonzero output layer breaks the identity
            adapter.net[-1].weight.normal_(0, 0.5,
                                           generator=torch.Generator().manual_seed(0))
        x = _x()
        mu_low, _ = tx.hyper_adapt(enc, 0.0, adapter)(x)
        mu_high, _ = tx.hyper_adapt(enc, 20.0, adapter)(x)
        assert float((mu_low - mu_high).abs().max()) > 0

    def test_base_parameters_untouched(self):
        enc = tx.Encoder("mlp-small", SHAPE, 8)
        before = [p.clone() for p in enc.parameters()]
        adapter = tx.HyperAdapter(enc.film_shapes)
        _ = tx.hyper_adapt(enc, 5.0, adapter)(_x())
        for p, q in zip(enc.parameters(), before):
            assert torch.equal(p, q)

    def test_shape_mismatch_rejected(self):
        enc = tx.Encoder("conv-small", SHAPE, 8)
        bad = tx.HyperAdapter([3, 5, 7])
        with pytest.raises(ValueError):
            tx.hyper_adapt(enc, 10.0, bad)
        good = tx.HyperAdapter(enc.film_shapes)
        with pytest.raises(ValueError):
            good(float("nan"))


class TestReparameterizationGradient:
    def test_autograd_matches_central_differences(self):
        torch.manual_seed(0)
        enc = tx.Encoder("mlp-small", SHAPE, 4).double()
        dec = tx.Decoder(4, 3).double()
        x = _x(batch=8, seed=1).double()
        y = torch.tensor([0, 1, 2, 0, 1, 2, 0, 1])
        eps = torch.randn(8, 4, dtype=torch.float64,
                          generator=torch.Generator().manual_seed(2))
        noise = torch.randn(8, 4, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(3)) * 0.3

        def loss_fn():
            mu, logvar = enc(x)
            z = mu + torch.exp(0.5 * logvar) * eps
            z = ch.normalize_power(z)
            scores = dec(z + noise)
            return vib_loss(scores, y, mu, logvar, beta=0.05).total

        loss = loss_fn()
        params = list(enc.parameters())
        grads = torch.autograd.grad(loss, params)
        flat_grad = torch.cat([g.reshape(-1) for g in grads])
        flat_params = torch.cat([p.reshape(-1) for p in params])
        picks = torch.linspace(0, len(flat_params) - 1, 10).long()
        h = 1e-5
        for k in picks.tolist():
            pi, off = 0, k
            while off >= params[pi].numel():
                off -= params[pi].numel()
                pi += 1
            with torch.no_grad():
                orig = params[pi].reshape(-1)[off].item()
                params[pi].reshape(-1)[off] = orig + h
                up = loss_fn().item()
                params[pi].reshape(-1)[off] = orig - h
                down = loss_fn().item()
                params[pi].reshape(-1)[off] = orig
            fd = (up - down) / (2 * h)
            ag = flat_grad[k].item()
            denom = max(abs(fd), abs(ag), 1e-8)
            assert abs(fd - ag) / denom < 1e-3, (k, fd, ag)


class TestPairAndCheckpoints:
    def test_parameter_count_matches_blob(self, tmp_path):
        pair = tx.build_pair("conv-small", SHAPE, 8, 10, seed=5)
        n = sum(tx.parameter_count(m) for m in (pair.encoder, pair.decoder))
        d = tx.save_checkpoint(pair, tmp_path / "ckpt")
        blob = (d / "params.bin").read_bytes()
        assert len(blob) == 4 * n

    def test_checkpoint_roundtrip_bitwise(self, tmp_path):
        pair = tx.build_pair("mixed", SHAPE, 8, 10, seed=6, mode="digital")
        tx.save_checkpoint(pair, tmp_path / "c")
        back = tx.load_checkpoint(tmp_path / "c")
        for p, q in zip(pair.parameters(), back.parameters()):
            assert torch.equal(p, q)
        assert back.arch == "mixed"
        assert back.mode == "digital"
        assert torch.equal(back.modulator.symbols, pair.modulator.symbols)

    def test_build_is_seed_deterministic(self):
        a = tx.build_pair("conv-small", SHAPE, 8, 10, seed=7)
        b = tx.build_pair("conv-small", SHAPE, 8, 10, seed=7)
        c = tx.build_pair("conv-small", SHAPE, 8, 10, seed=8)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
        assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))

    def test_accuracy_is_pure_given_rng(self):
        pair = tx.build_pair("mlp-small", SHAPE, 8, 10, seed=9)
        x = _x(batch=40, seed=2).numpy()
        y = np.arange(40) % 10
        spec = ch.ChannelSpec(snr_db=10.0)
        a = pair.accuracy(x, y, spec, torch.Generator().manual_seed(3))
        b = pair.accuracy(x, y, spec, torch.Generator().manual_seed(3))
        assert a == b
