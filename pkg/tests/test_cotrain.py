import math

import numpy as np
import pytest
from _oracles import numeric_grad, rel_error, scalar_encoder_forward
from conftest import tiny_train_config
from hypothesis import given
from hypothesis import strategies as st

from symsiam import cotrain, nn
from symsiam.cotrain import CoTrainState, TrainConfig
from symsiam.errors import ConfigError, DataError, NumericError
from symsiam.gmm import VAR_FLOOR, fit_gmm, posterior_abnormal
from symsiam.synthdata import PairArrays

unit = st.floats(0.0, 1.0)
open_unit = st.floats(1e-6, 1.0 - 1e-6)


class TestSoftBce:
    def test_confident_normal(self):
        assert cotrain.soft_bce_loss(0.0, 1.0 - 1e-7) == pytest.approx(0.0, abs=2e-7)

    def test_maximal_uncertainty(self):
        assert cotrain.soft_bce_loss(0.5, 0.5) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_mixed_example(self):
        expected = -(0.368 * math.log(0.149) + 0.632 * math.log(0.851))
        got = cotrain.soft_bce_loss(0.632, 0.149)
        assert abs(got - expected) < 1e-12
        assert got == pytest.approx(0.8025, abs=1e-4)

    @given(open_unit)
    def test_hard_labels_reduce_to_bce(self, q):
        # P = 0 means "normal", the class q predicts
        assert cotrain.soft_bce_loss(0.0, q) == pytest.approx(-math.log(q), rel=1e-12)
        assert cotrain.soft_bce_loss(1.0, q) == pytest.approx(-math.log(1.0 - q), rel=1e-12)

    @given(unit, unit)
    def test_finite_and_nonnegative_after_clamp(self, P, q):
        v = cotrain.soft_bce_loss(P, q)
        assert math.isfinite(v) and v >= 0.0

    @given(unit, open_unit)
    def test_linear_in_P(self, P, q):
        a, b = cotrain.soft_bce_loss(0.0, q), cotrain.soft_bce_loss(1.0, q)
        assert cotrain.soft_bce_loss(P, q) == pytest.approx((1 - P) * a + P * b, rel=1e-9, abs=1e-12)

    def test_tensor_form_is_batch_mean(self, rng):
        P = rng.uniform(size=9)
        q = rng.uniform(0.01, 0.99, size=9)
        t = cotrain.soft_bce_tensor(P, nn.Tensor(q, dtype=np.float64))
        assert float(t.data) == pytest.approx(cotrain.soft_bce_loss(P, q).mean(), rel=1e-13)


class TestCrossLosses:
    def test_symmetric_networks(self):
        L1, L2, L = cotrain.cross_losses(0.3, 0.3, 0.6, 0.6)
        assert L1 == L2 == L

    def test_abnormal_label_low_similarity(self):
        L1, _, _ = cotrain.cross_losses(0.0, 1.0, 0.074, 0.5)
        assert abs(L1 - (-math.log(1.0 - 0.074))) < 1e-12
        assert L1 == pytest.approx(0.0769, abs=1e-4)

    @given(unit, unit, unit, open_unit, open_unit)
    def test_p1_only_reaches_l2(self, P1, P1b, P2, q1, q2):
        a = cotrain.cross_losses(P1, P2, q1, q2)
        b = cotrain.cross_losses(P1b, P2, q1, q2)
        assert a[0] == b[0]
        if abs(P1 - P1b) > 1e-6 and abs(q2 - 0.5) > 1e-6:
            assert a[1] != b[1]


def tiny_net(seed=3, dtype=np.float64):
    cfg = nn.EncoderConfig(input_side=8, channels_per_stage=(3,), embedding_dim=4, seed=seed)
    return cotrain.SiameseNet(cfg, dtype=dtype)


class TestDistance:
    def test_identical_inputs(self, rng):
        net = tiny_net()
        p = rng.uniform(0.1, 1, size=(4, 8, 8))
        np.testing.assert_array_equal(cotrain.pair_forward(net, p, p).D, 0.0)

    def test_swap_symmetry(self, rng):
        net = tiny_net()
        p1, p2 = rng.uniform(size=(2, 5, 8, 8))
        np.testing.assert_array_equal(cotrain.pair_forward(net, p1, p2).D, cotrain.pair_forward(net, p2, p1).D)

    def test_matches_scalar_recomputation(self):
        net = tiny_net(seed=3)
        rng = np.random.default_rng(3)
        p1, p2 = rng.uniform(size=(2, 8, 8))
        params = {name.removeprefix("encoder."): p.data.tolist() for name, p in net.encoder.named_parameters()}
        e1 = scalar_encoder_forward(params, p1, 1, True)
        e2 = scalar_encoder_forward(params, p2, 1, True)
        expected = math.sqrt(sum((a - b) ** 2 for a, b in zip(e1, e2)))
        got = cotrain.pair_forward(net, p1[None], p2[None]).D[0]
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-14)


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_full_loss_against_finite_differences(self, seed):
        net = tiny_net(seed)
        rng = np.random.default_rng(seed)
        p1, p2 = rng.uniform(0.05, 1, size=(2, 4, 8, 8))
        P = rng.uniform(size=4)

        def loss():
            return cotrain.soft_bce_tensor(P, net.forward(p1, p2)[3])

        net.zero_grad()
        loss().backward()
        for p in net.parameters():
            num = numeric_grad(lambda: loss().data, p.data)
            assert rel_error(p.grad, num) < 1e-5, p.name

    def test_soft_labels_are_constants(self, rng):
        # the gradient with P held fixed matches finite differences that also hold P fixed
        net = tiny_net(0)
        p1, p2 = rng.uniform(0.05, 1, size=(2, 6, 8, 8))
        D = cotrain.pair_forward(net, p1, p2).D
        P = posterior_abnormal(fit_gmm(D), D)
        net.zero_grad()
        cotrain.soft_bce_tensor(P, net.forward(p1, p2)[3]).backward()
        w = net.head.weight
        num = numeric_grad(lambda: cotrain.soft_bce_tensor(P, net.forward(p1, p2)[3]).data, w.data)
        assert rel_error(w.grad, num) < 1e-6


class TestTrainConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)

    def test_microbatch_must_divide(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=64, accumulation_microbatch=24)
        assert TrainConfig(batch_size=64, accumulation_microbatch=16).microbatch == 16

    def test_alternative_losses_need_p_score(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss="triplet")
        assert TrainConfig(loss="triplet", score="P").experimental

    def test_experimental_flags(self):
        assert not TrainConfig().experimental
        assert TrainConfig(single_network=True).experimental
        assert TrainConfig(soft_label_source="logit").experimental

    def test_roundtrip_and_unknown_keys(self):
        cfg = tiny_train_config()
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"batch_size": 8, "bogus": 1})


@pytest.fixture(scope="module")
def train64(tiny_dataset):
    return tiny_dataset.pairs("train").subset(np.arange(64))


@pytest.fixture(scope="module")
def val_pairs(tiny_dataset):
    return tiny_dataset.pairs("val")


class TestTraining:
    def test_two_epochs_bit_identical(self, train64, val_pairs, tmp_path):
        runs = []
        for name in ("a", "b"):
            state = CoTrainState.create(tiny_train_config())
            cotrain.train(state, train64, val_pairs, out_dir=tmp_path / name)
            runs.append(state)
        a, b = runs
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
        assert (tmp_path / "a/last.ckpt").read_bytes() == (tmp_path / "b/last.ckpt").read_bytes()
        for pa, pb in zip(a.net1.parameters() + a.net2.parameters(), b.net1.parameters() + b.net2.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_resume_matches_uninterrupted(self, train64, val_pairs, tmp_path):
        full = cotrain.train(CoTrainState.create(tiny_train_config()), train64, val_pairs)
        first = cotrain.train(CoTrainState.create(tiny_train_config(epochs=1)), train64, val_pairs,
                              out_dir=tmp_path)
        resumed = CoTrainState.load(tmp_path / "last.ckpt")
        resumed.config = tiny_train_config()
        cotrain.train(resumed, train64, val_pairs)
        assert first.epoch == 1 and resumed.epoch == 2
        assert cotrain.metrics_csv(resumed.history) == cotrain.metrics_csv(full.history)
        for pa, pb in zip(full.net2.parameters(), resumed.net2.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_artifacts_written(self, train64, val_pairs, tmp_path):
        state = cotrain.train(CoTrainState.create(tiny_train_config()), train64, val_pairs,
                              out_dir=tmp_path, provenance={"tag": "x"})
        assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == '# {"tag": "x"}'
        assert lines[1].split(",") == cotrain.METRIC_COLUMNS and len(lines) == 2 + state.epoch
        best = CoTrainState.load(tmp_path / "best.ckpt")
        assert best.epoch == state.best_epoch

    def test_cross_use_each_net_gets_the_other_labels(self, train64, monkeypatch):
        seen = []
        real = cotrain._net_loss

        def spy(state, k, P, *args):
            seen.append((k, P.copy()))
            return real(state, k, P, *args)

        monkeypatch.setattr(cotrain, "_net_loss", spy)
        state = CoTrainState.create(tiny_train_config(epochs=1))
        cotrain.train_epoch(state, train64)
        order = np.random.default_rng([5, 1]).permutation(64)[:16]
        k0 = next(P for k, P in seen if k == 0)
        k1 = next(P for k, P in seen if k == 1)
        np.testing.assert_array_equal(k0, state.soft_labels[1][order])
        np.testing.assert_array_equal(k1, state.soft_labels[0][order])

    def test_warmup_uses_uninformative_labels(self, train64, monkeypatch):
        seen = []
        real = cotrain._net_loss
        monkeypatch.setattr(cotrain, "_net_loss", lambda s, k, P, *a: seen.append(P.copy()) or real(s, k, P, *a))
        cotrain.train_epoch(CoTrainState.create(tiny_train_config(warmup_epochs=1)), train64)
        assert all(np.all(P == 0.5) for P in seen)

    def test_single_network_uses_own_labels(self, train64):
        state = CoTrainState.create(tiny_train_config(single_network=True, epochs=1))
        assert len(state.nets) == 1 and state.net1 is state.net2
        l1, l2 = cotrain.train_epoch(state, train64)
        assert l1 == l2

    def test_non_finite_loss_reports_context(self, train64, monkeypatch):
        real = cotrain.soft_bce_tensor
        monkeypatch.setattr(cotrain, "soft_bce_tensor", lambda P, q: real(P, q) * float("nan"))
        with pytest.raises(NumericError, match="epoch 1, batch 0"):
            cotrain.train_epoch(CoTrainState.create(tiny_train_config()), train64)

    def test_batch_larger_than_data(self, train64):
        with pytest.raises(DataError):
            cotrain.train_epoch(CoTrainState.create(tiny_train_config(batch_size=128)), train64)

    def test_accumulation_changes_nothing_in_float64(self, train64):
        # summed microbatch gradients equal one full pass up to rounding
        states = []
        for mb in (0, 4):
            s = CoTrainState.create(tiny_train_config(accumulation_microbatch=mb, epochs=1), dtype=np.float64)
            cotrain.train_epoch(s, train64)
            states.append(s)
        for pa, pb in zip(states[0].net1.parameters(), states[1].net1.parameters()):
            np.testing.assert_allclose(pa.data, pb.data, rtol=1e-9, atol=1e-12)


class TestSoftLabels:
    def test_identical_pairs_degenerate_to_weight_high(self, rng):
        p = rng.uniform(0.2, 0.8, size=(20, 16, 16)).astype(np.float32)
        pairs = PairArrays(p, p.copy(), np.zeros(20), np.arange(20), np.zeros(20, int))
        state = CoTrainState.create(tiny_train_config())
        cotrain.refit_soft_labels(state, pairs)
        for g, P in zip(state.gmms, state.soft_labels):
            assert g.var_low == g.var_high == VAR_FLOOR
            np.testing.assert_allclose(P, g.weight_high, atol=1e-9)

    def test_abnormal_pairs_get_higher_labels(self, tiny_dataset):
        train = tiny_dataset.pairs("train")
        state = cotrain.train(CoTrainState.create(tiny_train_config(epochs=3)), train, tiny_dataset.pairs("val"))
        cotrain.refit_soft_labels(state, train)
        for P in state.soft_labels:
            assert P[train.A > 0.5].mean() > P[train.A == 0].mean()

    def test_p_score_needs_fitted_mixtures(self, val_pairs):
        state = CoTrainState.create(tiny_train_config(score="P"))
        with pytest.raises(ConfigError):
            cotrain.pair_scores(state, val_pairs)

    def test_q_score_range(self, val_pairs):
        s = cotrain.pair_scores(CoTrainState.create(tiny_train_config()), val_pairs)
        assert s.shape == (len(val_pairs),) and np.all((s > 0) & (s < 1))


class TestCheckpointState:
    def test_roundtrip(self, train64, tmp_path):
        state = CoTrainState.create(tiny_train_config(epochs=1))
        cotrain.train_epoch(state, train64)
        state.epoch = 1
        state.save(tmp_path / "s.ckpt")
        back = CoTrainState.load(tmp_path / "s.ckpt")
        assert back.config == state.config and back.gmms == state.gmms
        for a, b in zip(state.opts, back.opts):
            assert a.step_count == b.step_count
            for name in a.buffers:
                for x, y in zip(a.buffers[name], b.buffers[name]):
                    np.testing.assert_array_equal(x, y)

    def test_wrong_kind_rejected(self, tmp_path):
        nn.save_checkpoint(tmp_path / "x.ckpt", {"kind": "other"}, [])
        with pytest.raises(DataError):
            CoTrainState.load(tmp_path / "x.ckpt")
