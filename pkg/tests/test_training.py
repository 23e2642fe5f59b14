import numpy as np
import pytest

from mscnn import checkpoint, data, model, network, training
from mscnn.network import tiny_config
from mscnn.training import (LossConfig, TrainConfig, TrainState, maybe_drop_lr,
                            model_loss_and_grads, total_loss, train, train_step)

import reference


class ArrayDataset:
    """In-memory triple store with the PatchDataset batch protocol."""

    def __init__(self, cur, ref, gt):
        self.cur, self.ref, self.gt = cur, ref, gt

    @property
    def count(self):
        return len(self.cur)

    def load_batch(self, indices, dtype=np.float32):
        return (data.normalize(self.cur[indices], dtype)[:, None],
                data.normalize(self.ref[indices], dtype)[:, None],
                data.normalize(self.gt[indices], dtype)[:, None])


def toy_dataset(count=16, size=32, qp=37, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.integers(40, 216, (count, size, size)).astype(np.uint8)
    smooth = base.copy()
    for i in range(count):  # soften so the proxy has structure to degrade
        smooth[i] = data.bilinear_resize(
            data.bilinear_resize(base[i], size // 4, size // 4), size, size)
    cfg = data.CodecProxyConfig(qp)
    degraded = np.stack([data.codec_proxy(p, cfg) for p in smooth])
    return ArrayDataset(degraded, degraded.copy(), smooth)


def fresh_state(cfg, seed=0, dtype=np.float32):
    m = model.init_model(cfg, seed, dtype=dtype)
    return TrainState(m, m.zeros_like())


class TestLoss:
    def test_perfect_reconstruction_zero(self):
        x = np.ones((2, 1, 8, 8))
        total, bd = total_loss(x, x.copy(), [np.zeros((2, 4, 8, 8))], LossConfig())
        assert total == 0.0 and bd.data_term == 0.0 and bd.reg_term == 0.0

    def test_single_pixel_difference(self):
        a = np.zeros((1, 1, 1, 1))
        b = np.full((1, 1, 1, 1), 0.25)
        total, _ = total_loss(a, b, [], LossConfig(lambda1=0.0))
        assert total == pytest.approx(0.25 ** 2)

    def test_lambda_zero_reduces_to_data_term(self, rng):
        a = rng.random((2, 1, 8, 8))
        b = rng.random((2, 1, 8, 8))
        feats = [rng.random((2, 3, 8, 8))]
        t0, bd0 = total_loss(a, b, feats, LossConfig(lambda1=0.0))
        assert t0 == bd0.data_term and bd0.reg_term == 0.0
        t1, bd1 = total_loss(a, b, feats, LossConfig(lambda1=1e-2))
        assert t1 > t0 and bd1.data_term == bd0.data_term

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            total_loss(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)), [], LossConfig())

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(lambda1=-1.0)


class TestTrainConfigValidation:
    def test_qp_must_be_in_set(self):
        with pytest.raises(ValueError):
            TrainConfig(qp=25)

    def test_rates_and_momentum(self):
        with pytest.raises(ValueError):
            TrainConfig(base_lr=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestTrainStep:
    def test_zero_lr_keeps_parameters(self, any_backend):
        cfg = tiny_config()
        state = fresh_state(cfg)
        before = state.model.copy()
        ds = toy_dataset()
        batch = ds.load_batch(np.arange(4))
        bd = train_step(state, batch, cfg,
                        TrainConfig(base_lr=0.0, last_layer_lr=0.0, batch_size=4),
                        LossConfig())
        assert bd.total > 0
        for a, b in zip(before.cur.weights, state.model.cur.weights):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(before.fusion.gate_weights,
                                      state.model.fusion.gate_weights)

    def test_overfit_single_batch(self, any_backend):
        cfg = tiny_config()
        state = fresh_state(cfg, seed=1)
        ds = toy_dataset(count=8)
        batch = ds.load_batch(np.arange(8))
        tcfg = TrainConfig(batch_size=8, base_lr=1e-3)
        losses = [train_step(state, batch, cfg, tcfg, LossConfig()).total
                  for _ in range(50)]
        assert losses[-1] < losses[0]

    def test_divergence_aborts_with_diagnostic(self, any_backend):
        cfg = tiny_config()
        state = fresh_state(cfg)
        bad_gt = np.full((2, 1, 32, 32), np.inf, np.float32)
        cur = np.zeros((2, 1, 32, 32), np.float32)
        with pytest.raises(RuntimeError, match="diverged"):
            train_step(state, (cur, cur.copy(), bad_gt), cfg, TrainConfig(), LossConfig())

    def test_gradients_match_finite_differences_of_total_loss(self, any_backend):
        # includes the feature-norm term: lambda1 > 0 exercises the
        # regularizer's gradient injection
        cfg = tiny_config()
        params = model.init_model(cfg, 13, dtype=np.float64)
        rng = np.random.default_rng(13)
        for branch in (params.cur, params.ref):
            for b in branch.biases:
                b[:] = rng.standard_normal(b.shape) * 0.05
        lcfg = LossConfig(lambda1=1e-2)
        cur = rng.random((1, 1, 32, 32))
        ref = rng.random((1, 1, 32, 32))
        gt = rng.random((1, 1, 32, 32))
        _, grads = model_loss_and_grads(params, cfg, lcfg, cur, ref, gt)

        def loss(p):
            macts = model.model_forward(p, cfg, cur, ref)
            feats = [macts.acts_cur.features[i]
                     for i in network.intermediate_slots(cfg)]
            return total_loss(macts.reconstruction, gt, feats, lcfg)[0]

        for name, get, got in [
            ("cur.w2", lambda p: p.cur.weights[2], grads.cur.weights[2]),
            ("cur.b6", lambda p: p.cur.biases[6], grads.cur.biases[6]),
            ("ref.w8", lambda p: p.ref.weights[8], grads.ref.weights[8]),
            ("fusion.w", lambda p: p.fusion.gate_weights, grads.fusion.gate_weights),
        ]:
            clone = params.copy()
            fd = reference.finite_diff(lambda v: loss(clone), get(clone), eps=1e-6)
            assert reference.rel_error_scaled(got, fd) < 1e-5, name


class TestLrDrop:
    def _state_with_history(self, history):
        cfg = tiny_config()
        st = fresh_state(cfg)
        st.epoch_losses = list(history)
        return st

    def test_flat_history_triggers(self):
        st = self._state_with_history([10.0, 10.0, 10.0, 10.0])
        maybe_drop_lr(st, TrainConfig())
        assert st.lr_dropped and st.lr_scale == pytest.approx(0.01)

    def test_not_before_third_stable_comparison(self):
        st = self._state_with_history([10.0, 10.0, 10.0])
        maybe_drop_lr(st, TrainConfig())
        assert not st.lr_dropped

    def test_decreasing_loss_never_triggers(self):
        h = [10.0]
        for _ in range(10):
            h.append(h[-1] * 0.95)
        st = self._state_with_history(h)
        maybe_drop_lr(st, TrainConfig())
        assert not st.lr_dropped

    def test_drops_at_most_once(self):
        st = self._state_with_history([10.0] * 4)
        maybe_drop_lr(st, TrainConfig())
        st.epoch_losses += [10.0] * 4
        maybe_drop_lr(st, TrainConfig())
        assert st.lr_scale == pytest.approx(0.01)


class TestWeightDecay:
    def test_decay_shrinks_norm_with_zero_gradient(self):
        from mscnn import ops
        w = np.array([1.0, -2.0, 3.0])
        v = np.zeros(3)
        w2, _ = ops.sgd_momentum_step(w, np.zeros(3), v, 0.1, 0.0, 1e-2)
        assert np.sum(w2 ** 2) < np.sum(w ** 2)


class TestTrain:
    def test_zero_epochs_checkpoint_equals_init(self, any_backend, tmp_path):
        cfg = tiny_config()
        ds = toy_dataset()
        tcfg = TrainConfig(epochs=0, batch_size=4, seed=5)
        result = train(cfg, tcfg, LossConfig(), ds, tmp_path / "run")
        init = model.init_model(cfg, 5)
        ref_path = tmp_path / "init.mscn"
        checkpoint.write_checkpoint(ref_path, cfg, init)
        assert (tmp_path / "run" / "checkpoint.mscn").read_bytes() == ref_path.read_bytes()

    def test_reproducible_bitwise(self, any_backend, tmp_path):
        cfg = tiny_config()
        ds = toy_dataset()
        tcfg = TrainConfig(epochs=2, iterations_per_epoch=3, batch_size=4, seed=9)
        a = train(cfg, tcfg, LossConfig(), ds, tmp_path / "a")
        b = train(cfg, tcfg, LossConfig(), ds, tmp_path / "b")
        assert (tmp_path / "a" / "checkpoint.mscn").read_bytes() == \
            (tmp_path / "b" / "checkpoint.mscn").read_bytes()
        assert (tmp_path / "a" / "loss_curve.csv").read_bytes() == \
            (tmp_path / "b" / "loss_curve.csv").read_bytes()

    def test_loss_csv_format(self, any_backend, tmp_path):
        cfg = tiny_config()
        ds = toy_dataset()
        tcfg = TrainConfig(epochs=1, iterations_per_epoch=2, batch_size=4)
        result = train(cfg, tcfg, LossConfig(), ds, tmp_path / "run")
        lines = open(result.loss_curve_path).read().splitlines()
        assert lines[0] == "epoch,iter,data_term,reg_term,total"
        assert len(lines) == 3
        epoch, it, d, r, t = lines[1].split(",")
        assert float(t) == pytest.approx(float(d) + float(r))

    def test_empty_dataset_rejected(self, tmp_path):
        cfg = tiny_config()
        empty = ArrayDataset(np.zeros((0, 32, 32), np.uint8),
                             np.zeros((0, 32, 32), np.uint8),
                             np.zeros((0, 32, 32), np.uint8))
        with pytest.raises(ValueError):
            train(cfg, TrainConfig(), LossConfig(), empty, tmp_path / "x")
