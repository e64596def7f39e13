"""Adam optimizer, EMA smoothing, and the training loop contract."""

import numpy as np
import pytest

from stackpool import networks, training
from stackpool.data import CrowdSample, DatasetSplit, SceneParams, \
    crop_patches, synthesize_scene
from stackpool.pooling import PoolSpec
from stackpool.tensor import Tensor
from stackpool.training import (AdamState, TrainConfig, TrainingDiverged,
                                adam_step, ema_smooth, train)

VANILLA = PoolSpec.parse("vanilla:2:s2")


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        params = {"p": p}
        adam_step(params, {"p": np.zeros(2)}, AdamState(), TrainConfig())
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_single_step_closed_form(self):
        cfg = TrainConfig(lr=1e-3)
        g = np.array([0.5, -1.5, 2.0])
        p = Tensor(np.zeros(3), requires_grad=True)
        adam_step({"p": p}, {"p": g.copy()}, AdamState(), cfg)
        # from zero state: m_hat = g, v_hat = g^2, update = -lr*g/(|g|+eps)
        expected = -cfg.lr * g / (np.abs(g) + cfg.eps)
        np.testing.assert_allclose(p.data, expected, atol=1e-12)

    def test_quadratic_bowl_descends(self):
        cfg = TrainConfig(lr=0.05)
        w = Tensor(np.array([30.0, -20.0, 15.0]), requires_grad=True)
        state = AdamState()
        losses = []
        for _ in range(200):
            losses.append(float(np.sum(w.data ** 2)))
            adam_step({"w": w}, {"w": 2 * w.data}, state, cfg)
        # monotone decrease after a short warmup (far from the optimum the
        # bias-corrected update behaves like a fixed-size descent step)
        tail = losses[10:]
        assert all(b <= a for a, b in zip(tail, tail[1:]))
        assert losses[-1] < 0.5 * losses[0]

    def test_non_finite_gradient_names_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(TrainingDiverged, match="conv3.bias"):
            adam_step({"conv3.bias": p}, {"conv3.bias": np.array([1.0, np.nan])},
                      AdamState(), TrainConfig())


class TestEma:
    def test_alpha_one_identity(self):
        xs = [3.0, 1.0, 4.0, 1.0]
        assert ema_smooth(xs, 1.0) == xs

    def test_constant_series(self):
        assert ema_smooth([2.5] * 5, 0.1) == [2.5] * 5

    def test_one_step(self):
        out = ema_smooth([0.0, 1.0], 0.1)
        assert out == pytest.approx([0.0, 0.1])

    def test_empty(self):
        assert ema_smooth([], 0.3) == []

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            ema_smooth([1.0], 0.0)
        with pytest.raises(ValueError):
            ema_smooth([1.0], 1.5)


def _tiny_dataset(seed=0, n_scenes=12):
    params = SceneParams(height=32, width=32, count_min=2, count_max=8,
                         head_radius_min=1.0, head_radius_max=3.0, margin=6)
    scenes = [synthesize_scene(seed * 1000 + i, params) for i in range(n_scenes)]
    patches = []
    for i, s in enumerate(scenes[:-2]):
        patches.extend(crop_patches(s, 5, seed * 77 + i, divisor=4))
    return DatasetSplit(patches[:50], scenes[-2:])


class TestTrainLoop:
    def test_blank_data_zero_output_layer_zero_loss(self):
        net = networks.build(networks.NetworkConfig("base_s", VANILLA), 0)
        head_w = net.parameters["conv4.weight"]
        head_w.data = np.zeros_like(head_w.data)
        blank = [CrowdSample(np.random.default_rng(i).random((1, 16, 16)), [])
                 for i in range(4)]
        _, log = train(net, DatasetSplit(blank[:3], blank[3:]),
                       TrainConfig(epochs=1, validate_every=1, lr=1e-9))
        assert log.rows[0].train_loss == 0.0

    def test_smoke_convergence(self):
        split = _tiny_dataset()
        net = networks.build(networks.NetworkConfig("base_s", VANILLA), 1)
        _, log = train(net, split, TrainConfig(epochs=20, lr=3e-4, seed=1))
        assert log.rows[-1].train_loss < 0.5 * log.rows[0].train_loss

    def test_best_checkpoint_is_min_validation(self, tmp_path):
        split = _tiny_dataset(seed=2)
        net = networks.build(networks.NetworkConfig("base_s", VANILLA), 2)
        best, log = train(net, split,
                          TrainConfig(epochs=8, lr=3e-4, seed=2),
                          out_dir=tmp_path)
        vals = [v for _, v in log.validation_points()]
        assert log.best_val_mae == min(vals)
        assert all(log.best_val_mae <= v for v in vals)
        loaded, manifest = networks.load_checkpoint(tmp_path / "best.ckpt")
        assert manifest["val_mae"] == log.best_val_mae
        for name in best.parameters:
            np.testing.assert_array_equal(best.parameters[name].data,
                                          loaded.parameters[name].data)

    def test_deterministic_in_seed(self):
        split = _tiny_dataset(seed=3)
        logs = []
        nets = []
        for _ in range(2):
            net = networks.build(networks.NetworkConfig("base_s", VANILLA), 3)
            best, log = train(net, split, TrainConfig(epochs=4, seed=3))
            logs.append(log)
            nets.append(best)
        assert [(r.epoch, r.train_loss, r.train_mae, r.val_mae)
                for r in logs[0].rows] == \
            [(r.epoch, r.train_loss, r.train_mae, r.val_mae)
             for r in logs[1].rows]
        for name in nets[0].parameters:
            np.testing.assert_array_equal(nets[0].parameters[name].data,
                                          nets[1].parameters[name].data)

    def test_divergence_aborts_with_partial_log(self):
        split = _tiny_dataset(seed=4)
        split.train[0].image[0, 0, 0] = np.inf  # poisoned sample
        net = networks.build(networks.NetworkConfig("base_s", VANILLA), 4)
        with pytest.raises(TrainingDiverged) as exc, \
                np.errstate(over="ignore", invalid="ignore"):
            train(net, split, TrainConfig(epochs=10, lr=3e-4, seed=4))
        assert exc.value.log is not None
        assert len(exc.value.log.rows) >= 1

    def test_empty_split_rejected(self):
        net = networks.build(networks.NetworkConfig("base_s", VANILLA), 0)
        with pytest.raises(ValueError):
            train(net, DatasetSplit([], []), TrainConfig(epochs=1))

    def test_log_csv_format(self, tmp_path):
        split = _tiny_dataset(seed=5)
        net = networks.build(networks.NetworkConfig("base_s", VANILLA), 5)
        _, log = train(net, split, TrainConfig(epochs=2, seed=5))
        training.write_log_files(log, tmp_path)
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_mae,val_mae"
        assert len(lines) == 3


class TestConfigValidation:
    @pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(validate_every=0),
                                        dict(batch_size=0), dict(lr=0.0)])
    def test_invalid_configs(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_batch_accumulation_matches_batched_mean(self):
        # two runs over the same data, batch 1 vs batch 2, same seed: first
        # optimizer step differs, but gradients of the first batch match the
        # mean of per-sample gradients by construction; assert the train loop
        # accepts batch_size > 1 and still improves
        split = _tiny_dataset(seed=6)
        net = networks.build(networks.NetworkConfig("base_s", VANILLA), 6)
        _, log = train(net, split,
                       TrainConfig(epochs=6, batch_size=4, lr=3e-4, seed=6))
        assert log.rows[-1].train_loss < log.rows[0].train_loss
