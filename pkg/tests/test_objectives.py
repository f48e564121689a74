import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from tocomm import objectives as obj
from tocomm.channel import ChannelSpec
from tocomm.mi import Constellation
from tocomm.transceiver import Encoder

TOL = 1e-6


def _batch(n=32, c=10, d=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    scores = torch.randn(n, c, generator=g)
    y = torch.randint(0, c, (n,), generator=g)
    mu = torch.randn(n, d, generator=g)
    logvar = torch.randn(n, d, generator=g).clamp(-2, 2)
    return scores, y, mu, logvar


def assert_component_sum(report):
    assert report.component_error() <= TOL


class TestVibLoss:
    def test_beta_zero_is_plain_cross_entropy(self):
        scores, y, mu, logvar = _batch()
        report = obj.vib_loss(scores, y, mu, logvar, beta=0.0)
        ce = F.cross_entropy(scores, y)
        assert float(report.total.detach()) == pytest.approx(float(ce), abs=TOL)
        assert_component_sum(report)

    def test_prior_posterior_rate_zero(self):
        scores, y, _, _ = _batch()
        report = obj.vib_loss(scores, y, torch.zeros(32, 8), torch.zeros(32, 8), beta=1.0)
        assert report.components["rate"] == 0.0

    def test_uniform_scores_entropy(self):
        y = torch.arange(10)
        scores = torch.zeros(10, 10)
        mu, logvar = torch.zeros(10, 4), torch.zeros(10, 4)
        report = obj.vib_loss(scores, y, mu, logvar, beta=0.5)
        assert report.components["task_ce"] == pytest.approx(math.log(10), abs=1e-6)
        assert report.components["task_ce"] == pytest.approx(2.302585, abs=1e-5)

    def test_rate_nonnegative(self):
        for seed in range(5):
            scores, y, mu, logvar = _batch(seed=seed)
            report = obj.vib_loss(scores, y, mu, logvar, beta=1.0)
            assert report.components["rate"] >= 0.0
            assert_component_sum(report)

    def test_negative_beta_rejected(self):
        scores, y, mu, logvar = _batch()
        with pytest.raises(ValueError):
            obj.vib_loss(scores, y, mu, logvar, beta=-0.1)


class TestIfeLoss:
    def test_lambda_zero_equals_mean_vib(self):
        a = _batch(seed=1)
        b = _batch(seed=2)
        report = obj.ife_loss([a, b], beta=0.01, lambda_inv=0.0)
        va = obj.vib_loss(*a, beta=0.01)
        vb = obj.vib_loss(*b, beta=0.01)
        want = 0.5 * (float(va.total.detach()) + float(vb.total.detach()))
        assert float(report.total.detach()) == pytest.approx(want, abs=1e-6)
        assert_component_sum(report)

    def test_identical_environments_same_penalty_terms(self):
        a = _batch(seed=3)
        report = obj.ife_loss([a, a], beta=0.0, lambda_inv=1.0)
        single = float(obj._dummy_classifier_penalty(a[0], a[1]).detach())
        assert report.components["invariance"] == pytest.approx(2 * single, rel=1e-6)

    def test_scale_mismatched_environments_penalized(self):
        # same features, but one environment's optimal confidence scale differs:
        # no shared dummy scale is simultaneously stationary, so penalty > 0
        g = torch.Generator().manual_seed(4)
        base = torch.randn(256, 2, generator=g) * 2.0
        y = (base[:, 0] > base[:, 1]).long()
        env_a = (base * 1.0, y)
        env_b = (base * 4.0, y)
        mu, logvar = torch.zeros(256, 4), torch.zeros(256, 4)
        report = obj.ife_loss(
            [(env_a[0], env_a[1], mu, logvar), (env_b[0], env_b[1], mu, logvar)],
            beta=0.0, lambda_inv=1.0,
        )
        assert report.components["invariance"] > 0.01

    def test_requires_two_environments(self):
        a = _batch()
        with pytest.raises(ValueError):
            obj.ife_loss([a], beta=0.0, lambda_inv=1.0)

    def test_penalty_gradient_reaches_scores(self):
        scores, y, mu, logvar = _batch(seed=5)
        scores = scores.requires_grad_()
        report = obj.ife_loss(
            [(scores[:16], y[:16], mu[:16], logvar[:16]),
             (scores[16:], y[16:], mu[16:], logvar[16:])],
            beta=0.0, lambda_inv=10.0,
        )
        report.total.backward()
        assert scores.grad is not None and scores.grad.abs().sum() > 0


class TestRibLoss:
    def _inputs(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        scores = torch.randn(16, 10, generator=g)
        y = torch.randint(0, 10, (16,), generator=g)
        return scores, y

    def test_beta_zero_task_only(self):
        scores, y = self._inputs()
        c = Constellation(symbols=np.array([-1.0, 1.0]), probs=np.array([0.5, 0.5]))
        report = obj.rib_loss(scores, y, c, ChannelSpec(snr_db=10.0), beta=0.0,
                              mc_samples=2000, rng=torch.Generator().manual_seed(1))
        ce = F.cross_entropy(scores, y)
        assert float(report.total.detach()) == pytest.approx(float(ce), abs=TOL)
        assert_component_sum(report)

    def test_single_symbol_mi_zero(self):
        scores, y = self._inputs()
        c = Constellation(symbols=np.array([1.0]), probs=np.array([1.0]))
        report = obj.rib_loss(scores, y, c, ChannelSpec(snr_db=10.0), beta=0.5,
                              mc_samples=2000, rng=torch.Generator().manual_seed(2))
        assert report.components["channel_mi"] == pytest.approx(0.0, abs=1e-9)

    def test_analog_mode_rejected(self):
        scores, y = self._inputs()
        with pytest.raises(obj.ModeError):
            obj.rib_loss(scores, y, None, ChannelSpec(snr_db=10.0), beta=0.1)

    def test_mi_term_differentiable_in_probs(self):
        scores, y = self._inputs()
        raw = torch.tensor([0.0, 0.0, 0.0, 0.0], requires_grad=True)
        probs = torch.softmax(raw, dim=0)
        c = Constellation(symbols=np.array([-3.0, -1.0, 1.0, 3.0]) / math.sqrt(5), probs=probs)
        report = obj.rib_loss(scores, y, c, ChannelSpec(snr_db=10.0), beta=1.0,
                              mc_samples=2000, rng=torch.Generator().manual_seed(3))
        report.total.backward()
        assert raw.grad is not None and raw.grad.abs().sum() > 0


class TestDibLoss:
    def test_beta_zero_joint_ce_only(self):
        g = torch.Generator().manual_seed(0)
        fused = torch.randn(8, 4, generator=g)
        y = torch.randint(0, 4, (8,), generator=g)
        outs = [(torch.randn(8, 3, generator=g), torch.zeros(8, 3)) for _ in range(2)]
        report = obj.dib_loss(outs, fused, y, beta=0.0)
        assert float(report.total.detach()) == pytest.approx(
            float(F.cross_entropy(fused, y)), abs=TOL)
        assert_component_sum(report)

    def test_rate_sums_devices(self):
        fused = torch.zeros(4, 2)
        y = torch.zeros(4, dtype=torch.long)
        mu = torch.ones(4, 2)
        outs = [(mu, torch.zeros(4, 2)), (2 * mu, torch.zeros(4, 2))]
        report = obj.dib_loss(outs, fused, y, beta=1.0)
        # per-example rates: 0.5*(1+1)=1 and 0.5*(4+4)=4
        assert report.components["rate"] == pytest.approx(1.0 + 4.0, rel=1e-6)

    def test_device_count_enforced(self):
        fused = torch.zeros(4, 2)
        y = torch.zeros(4, dtype=torch.long)
        one = [(torch.zeros(4, 2), torch.zeros(4, 2))]
        with pytest.raises(ValueError):
            obj.dib_loss(one, fused, y, beta=0.0)
        with pytest.raises(ValueError):
            obj.dib_loss(one * 3, fused, y, beta=0.0)


class TestInfoNce:
    def test_closed_form_batch_two(self):
        z1 = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        z2 = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        report = obj.infonce_loss(z1, z2, tau=1.0)
        # positives cos=1, cross pairs cos=0: loss = ln(1 + e^-1)
        assert float(report.total.detach()) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)
        assert float(report.total.detach()) == pytest.approx(0.313262, abs=1e-5)
        assert_component_sum(report)

    def test_permutation_mismatch_is_catastrophic(self):
        n = 8
        z1 = torch.eye(n)
        z2 = torch.eye(n)[list(range(1, n)) + [0]]  # shifted pairing
        report = obj.infonce_loss(z1, z2, tau=1.0)
        assert float(report.total.detach()) >= math.log(n) - 0.5

    def test_scale_invariance(self):
        g = torch.Generator().manual_seed(1)
        z1 = torch.randn(16, 8, generator=g)
        z2 = torch.randn(16, 8, generator=g)
        a = obj.infonce_loss(z1, z2, tau=0.3)
        b = obj.infonce_loss(5.0 * z1, 5.0 * z2, tau=0.3)
        assert float(a.total.detach()) == pytest.approx(float(b.total.detach()), abs=1e-5)

    def test_joint_rotation_invariance(self):
        g = torch.Generator().manual_seed(2)
        z1 = torch.randn(16, 8, generator=g)
        z2 = torch.randn(16, 8, generator=g)
        q, _ = torch.linalg.qr(torch.randn(8, 8, generator=g))
        a = obj.infonce_loss(z1, z2, tau=0.5)
        b = obj.infonce_loss(z1 @ q, z2 @ q, tau=0.5)
        assert float(a.total.detach()) == pytest.approx(float(b.total.detach()), abs=1e-5)

    def test_validation(self):
        z = torch.randn(1, 4)
        with pytest.raises(ValueError):
            obj.infonce_loss(z, z, tau=1.0)
        z = torch.randn(4, 4)
        with pytest.raises(ValueError):
            obj.infonce_loss(z, z, tau=0.0)


class _FixedEncoder(torch.nn.Module):
    """Encoder stub with constant mu/logvar rows."""

    def __init__(self, mu_row, logvar_row):
        super().__init__()
        self.mu_row = torch.tensor(mu_row)
        self.logvar_row = torch.tensor(logvar_row)

    def forward(self, x):
        n = x.shape[0]
        return self.mu_row.expand(n, -1), self.logvar_row.expand(n, -1)


class TestPruneLatents:
    def test_threshold_zero_keeps_all(self):
        enc = _FixedEncoder([1.0, 0.0, 2.0], [0.0, 0.0, 0.0])
        res = obj.prune_latents(enc, torch.zeros(10, 1), threshold=0.0)
        assert res.keep.all()
        assert res.pruned_count == 0

    def test_threshold_infinite_prunes_all(self):
        enc = _FixedEncoder([1.0, 0.0, 2.0], [0.0, 0.0, 0.0])
        res = obj.prune_latents(enc, torch.zeros(10, 1), threshold=float("inf"))
        assert (~res.keep).all()
        z = torch.ones(4, 3)
        assert torch.equal(res.apply(z), torch.zeros(4, 3))

    def test_rates_match_hand_computation(self):
        # dims: (mu=1, logvar=0) -> 0.5 ; (mu=0, logvar=0) -> 0 ;
        # (mu=0, logvar=ln4) -> 0.5*(4-1-ln4)
        enc = _FixedEncoder([1.0, 0.0, 0.0], [0.0, 0.0, math.log(4.0)])
        res = obj.prune_latents(enc, torch.zeros(7, 1), threshold=0.1)
        np.testing.assert_allclose(
            res.rates, [0.5, 0.0, 0.5 * (4 - 1 - math.log(4))], atol=1e-6)
        assert res.keep.tolist() == [True, False, True]

    def test_negative_threshold_rejected(self):
        enc = _FixedEncoder([0.0], [0.0])
        with pytest.raises(ValueError):
            obj.prune_latents(enc, torch.zeros(3, 1), threshold=-1.0)


class TestSurrogateNotBijectionInvariant:
    def test_rate_changes_under_invertible_map_though_true_mi_does_not(self):
        # true MI is invariant under any bijection of the code; the Gaussian
        # rate surrogate is not - doubling the code doubles mu and sigma and
        # changes the KL.  This asymmetry is expected behavior, not a bug.
        from tocomm.mi import kl_gauss_to_std

        g = torch.Generator().manual_seed(0)
        mu = torch.randn(100, 4, generator=g)
        logvar = torch.randn(100, 4, generator=g).clamp(-1, 1)
        base = kl_gauss_to_std(mu, logvar).mean()
        scaled = kl_gauss_to_std(2.0 * mu, logvar + math.log(4.0)).mean()
        assert abs(float(base - scaled)) > 0.1
