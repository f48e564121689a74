import numpy as np
import pytest
import torch

from tocomm import training as tr
from tocomm import transceiver as tx
from tocomm.channel import ChannelSpec
from tocomm.datasets import load_digits_toy, make_colored_mnist, subset

SPEC = ChannelSpec(snr_db=10.0)


@pytest.fixture(scope="module")
def digits():
    return load_digits_toy(seed=0)


@pytest.fixture(scope="module")
def small_train(digits):
    return subset(digits, range(256))


@pytest.fixture(scope="module")
def small_test(digits):
    return subset(digits, range(256, 456))


def _cfg(**kw):
    base = dict(channel=SPEC, strategy="local_pre", objective="vib", epochs=2,
                batch_size=32, seed=0)
    base.update(kw)
    return tr.TrainConfig(**base)


class TestLedgerAccounting:
    def test_single_step_arithmetic(self, small_train):
        pair = tx.build_pair("mlp-small", small_train.input_shape, 16, 10, seed=1)
        data = subset(small_train, range(32))
        cfg = _cfg(strategy="remote", epochs=1, batch_size=32, seed=1)
        _, ledger = tr.train_remote(pair, data, cfg)
        assert ledger.steps == 1
        assert ledger.uplink_scalars == 32 * 16 == 512
        assert ledger.downlink_scalars == 512

    def test_epoch_totals_match_independent_counter(self, small_train):
        d, epochs, batch = 8, 3, 50
        pair = tx.build_pair("mlp-small", small_train.input_shape, d, 10, seed=2)
        cfg = _cfg(strategy="remote", epochs=epochs, batch_size=batch, seed=2)
        _, ledger = tr.train_remote(pair, small_train, cfg)
        n = len(small_train)
        expect_steps = epochs * ((n + batch - 1) // batch)
        expect_scalars = epochs * n * d  # truncated batches counted exactly
        assert ledger.steps == expect_steps
        assert ledger.uplink_scalars == expect_scalars
        assert ledger.downlink_scalars == expect_scalars

    def test_local_pre_all_zero(self, small_train):
        pair = tx.build_pair("mlp-small", small_train.input_shape, 8, 10, seed=3)
        _, ledger = tr.train_local(pair, small_train, _cfg(strategy="local_pre", seed=3))
        assert ledger.uplink_scalars == 0
        assert ledger.downlink_scalars == 0
        assert ledger.param_transfer_scalars == 0

    def test_local_post_counts_decoder_parameters_exactly(self, small_train):
        pair = tx.build_pair("conv-small", small_train.input_shape, 8, 10, seed=4)
        _, ledger = tr.train_local(pair, small_train, _cfg(strategy="local_post", seed=4))
        assert ledger.param_transfer_scalars == tx.parameter_count(pair.decoder)
        assert ledger.uplink_scalars == 0 and ledger.downlink_scalars == 0

    def test_wrong_strategy_tags_rejected(self, small_train):
        pair = tx.build_pair("mlp-small", small_train.input_shape, 8, 10, seed=5)
        with pytest.raises(ValueError):
            tr.train_local(pair, small_train, _cfg(strategy="remote"))
        with pytest.raises(ValueError):
            tr.train_remote(pair, small_train, _cfg(strategy="local_pre"))
        with pytest.raises(ValueError):
            tr.train_hybrid(pair, small_train, _cfg(strategy="remote"))


class TestDeterminism:
    def test_same_config_same_final_parameters(self, small_train):
        results = []
        for _ in range(2):
            pair = tx.build_pair("mlp-small", small_train.input_shape, 8, 10, seed=6)
            pair, _ = tr.train_local(pair, small_train, _cfg(seed=6))
            results.append([p.detach().clone() for p in pair.parameters()])
        for a, b in zip(*results):
            assert torch.equal(a, b)

    def test_remote_noiseless_matches_local_trajectory(self, small_train):
        noiseless = ChannelSpec(snr_db=float("inf"))
        data = subset(small_train, range(320) if len(small_train) >= 320 else range(len(small_train)))
        pairs, ledgers = [], []
        for strategy, fn in [("local_pre", tr.train_local), ("remote", tr.train_remote)]:
            pair = tx.build_pair("mlp-small", small_train.input_shape, 8, 10, seed=7)
            cfg = _cfg(strategy=strategy, channel=noiseless, epochs=2, batch_size=26, seed=7)
            pair, ledger = fn(pair, data, cfg)
            pairs.append(pair)
            ledgers.append(ledger)
        assert ledgers[1].steps >= 10  # covers at least ten update steps
        for a, b in zip(pairs[0].parameters(), pairs[1].parameters()):
            assert float((a - b).detach().abs().max()) <= 1e-6

    def test_evaluate_deterministic(self, small_train, small_test):
        pair = tx.build_pair("mlp-small", small_train.input_shape, 8, 10, seed=8)
        a = tr.evaluate(pair, small_test, SPEC, torch.Generator().manual_seed(1))
        b = tr.evaluate(pair, small_test, SPEC, torch.Generator().manual_seed(1))
        assert a == b


class TestHybrid:
    def test_probe_only_flagged_with_zero_ledger(self, small_train):
        pair = tx.build_pair("mlp-small", small_train.input_shape, 8, 10, seed=9)
        cfg = _cfg(strategy="hybrid", epochs=0, stage1_epochs=1, seed=9)
        _, ledger = tr.train_hybrid(pair, small_train, cfg)
        assert ledger.uplink_scalars == 0 and ledger.downlink_scalars == 0
        assert any("probe-only" in n for n in ledger.notes)

    def test_stage2_ledger_only(self, small_train):
        pair = tx.build_pair("mlp-small", small_train.input_shape, 8, 10, seed=10)
        cfg = _cfg(strategy="hybrid", epochs=1, stage1_epochs=2, batch_size=64, seed=10)
        _, ledger = tr.train_hybrid(pair, small_train, cfg)
        assert ledger.uplink_scalars == len(small_train) * 8  # stage 2 only

    def test_stage1_improves_linear_probe_over_random_encoder(self, digits):
        train = subset(digits, range(1000))
        test = subset(digits, range(1000, 1400))
        cfg = _cfg(strategy="hybrid", epochs=0, stage1_epochs=25, batch_size=128,
                   seed=11, tau=0.2, lr=1e-3)
        pretrained = tx.build_pair("mlp-small", train.input_shape, 8, 10, seed=11)
        tr.train_hybrid(pretrained, train, cfg)
        random_enc = tx.build_pair("mlp-small", train.input_shape, 8, 10, seed=11)
        probe_cfg = _cfg(epochs=20, batch_size=64, seed=12)
        tr.fit_linear_probe(pretrained, train, probe_cfg)
        tr.fit_linear_probe(random_enc, train, probe_cfg)
        rng = torch.Generator().manual_seed(3)
        acc_pre = tr.evaluate(pretrained, test, SPEC, rng, reps=4)
        acc_rand = tr.evaluate(random_enc, test, SPEC, rng, reps=4)
        assert acc_pre - acc_rand >= 0.10, (acc_pre, acc_rand)


class TestEvaluate:
    def test_constant_decoder_scores_chance_on_balanced_set(self, digits):
        balanced = subset(digits, [i for c in range(10) for i in
                                   np.where(digits.y_array() == c)[0][:20]])
        pair = tx.build_pair("mlp-small", digits.input_shape, 8, 10, seed=13)
        with torch.no_grad():
            pair.decoder.net[-1].weight.zero_()
            pair.decoder.net[-1].bias.zero_()
            pair.decoder.net[-1].bias[3] = 100.0  # always predicts class 3
        acc = tr.evaluate(pair, balanced, SPEC, torch.Generator().manual_seed(0))
        assert acc == pytest.approx(0.1, abs=1e-9)

    def test_noiseless_continuity_at_high_snr(self, small_train, small_test):
        pair = tx.build_pair("conv-small", small_train.input_shape, 8, 10, seed=14)
        pair, _ = tr.train_local(pair, small_train, _cfg(epochs=10, seed=14))
        g = torch.Generator().manual_seed(5)
        acc_hi = tr.evaluate(pair, small_test, ChannelSpec(snr_db=40.0), g, reps=8)
        acc_inf = tr.evaluate(pair, small_test, ChannelSpec(snr_db=float("inf")), g)
        assert abs(acc_hi - acc_inf) <= 0.005 + 1e-9

    def test_empty_testset_rejected(self, small_train):
        pair = tx.build_pair("mlp-small", small_train.input_shape, 8, 10, seed=15)

        class Empty:
            def __len__(self):
                return 0

        with pytest.raises(ValueError):
            tr.evaluate(pair, Empty(), SPEC)


class TestSnrSweep:
    def test_curve_echoes_snrs_in_order(self, small_train, small_test):
        pair = tx.build_pair("mlp-small", small_train.input_shape, 8, 10, seed=16)
        snrs = [20.0, 0.0, 10.0]
        curve = tr.snr_sweep(pair, snrs, small_test, torch.Generator().manual_seed(1))
        assert [s for s, _ in curve] == snrs
        assert all(0.0 <= a <= 1.0 for _, a in curve)

    def test_empty_grid_rejected(self, small_train, small_test):
        pair = tx.build_pair("mlp-small", small_train.input_shape, 8, 10, seed=17)
        with pytest.raises(ValueError):
            tr.snr_sweep(pair, [], small_test)


class TestIfeTraining:
    def test_needs_multi_environment_batches(self, digits):
        base = subset(digits, range(128))
        colored = make_colored_mnist(base, [0.9], 0.25, seed=0)  # single env
        pair = tx.build_pair("conv-small", colored.input_shape, 8, 2, seed=18)
        cfg = _cfg(objective="ife", epochs=1, full_batch=True, lambda_inv=1.0, seed=18)
        with pytest.raises(ValueError):
            tr.train_local(pair, colored, cfg)

    def test_trains_with_two_environments(self, digits):
        base = subset(digits, range(256))
        colored = make_colored_mnist(base, [0.9, 0.8], 0.25, seed=1)
        pair = tx.build_pair("conv-small", colored.input_shape, 8, 2, seed=19)
        cfg = _cfg(objective="ife", epochs=2, full_batch=True, lambda_inv=10.0,
                   anneal_steps=1, seed=19)
        pair, ledger = tr.train_local(pair, colored, cfg)
        assert ledger.steps == 2
