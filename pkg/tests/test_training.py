import warnings

import numpy as np
import pytest

from pgcn import autodiff as ad
from pgcn.model import PGCNModel
from pgcn.training import (DivergenceError, HorizonError, OptimizerState, UndefinedMetricError,
                           adam_step, evaluate, historical_average_baseline, masked_mae,
                           masked_mape, masked_rmse, metrics_from_predictions, train, train_step)
from pgcn.model import load_checkpoint

from conftest import directed_transition, tiny_config


class TestMetrics:
    def test_mae(self):
        assert masked_mae(np.array([1.0, 3.0]), np.array([1.0, 3.0])) == 0.0
        assert abs(masked_mae(np.array([1.0, 3.0]), np.array([2.0, 5.0]), mask_zero=False) - 1.5) < 1e-9
        assert masked_mae(np.array([9.0, 5.0]), np.array([0.0, 5.0])) == 0.0

    def test_rmse(self):
        assert masked_rmse(np.array([2.0]), np.array([2.0])) == 0.0
        assert abs(masked_rmse(np.array([1.0, 3.0]), np.array([2.0, 5.0])) - np.sqrt(2.5)) < 1e-9
        assert masked_rmse(np.array([4.0]), np.array([7.0])) == 3.0

    def test_mape(self):
        assert masked_mape(np.array([5.0]), np.array([5.0])) == 0.0
        assert abs(masked_mape(np.array([110.0]), np.array([100.0])) - 10.0) < 1e-9
        assert abs(masked_mape(np.array([5.0, 90.0]), np.array([0.0, 100.0])) - 10.0) < 1e-9
        with pytest.raises(UndefinedMetricError):
            masked_mape(np.array([1.0]), np.array([0.0]))

    def test_empty_mask_warns(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            assert masked_mae(np.array([1.0]), np.array([0.0])) == 0.0
        assert caught

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            masked_mae(np.ones(2), np.ones(3))

    def test_mask_soundness(self, rng):
        target = rng.uniform(1, 2, size=(4, 3, 5))
        target[rng.uniform(size=target.shape) < 0.3] = 0.0
        pred = rng.normal(size=target.shape)
        pred2 = pred.copy()
        pred2[target == 0] = rng.normal(scale=100, size=int((target == 0).sum()))
        for fn in (masked_mae, masked_rmse, masked_mape):
            assert fn(pred, target) == fn(pred2, target)

    def test_tensor_mae_matches_array(self, rng):
        pred, target = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
        target[0, 0, 0] = 0.0
        assert abs(masked_mae(ad.Tensor(pred), target).item() - masked_mae(pred, target)) < 1e-12

    def test_rmse_at_least_mae_and_horizon_minutes(self, rng):
        pred, target = rng.normal(size=(10, 12, 4)), rng.uniform(1, 3, size=(10, 12, 4))
        rep = metrics_from_predictions(pred, target)
        assert [h.horizon_minutes for h in rep.horizons] == [15, 30, 60]
        for h in rep.rows():
            assert h.rmse >= h.mae >= 0
        with pytest.raises(HorizonError):
            metrics_from_predictions(pred[:, :6], target[:, :6])

    def test_constant_mean_rmse_is_std(self):
        rng = np.random.default_rng(0)
        target = rng.normal(50.0, 4.0, size=(4000, 12, 5))
        pred = np.full_like(target, 50.0)
        rep = metrics_from_predictions(pred, target)
        for h in rep.horizons:
            sd = target[:, h.horizon_steps - 1].std()
            assert abs(h.rmse - sd) < 0.05 * sd


class TestAdam:
    def test_zero_gradient(self, rng):
        p = ad.Parameter(rng.normal(size=3))
        before = p.data.copy()
        adam_step([p], OptimizerState())
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_moves_by_lr(self):
        p = ad.Parameter([0.0])
        ad.backward(ad.tsum(p))
        adam_step([p], OptimizerState(lr=0.001))
        assert abs(p.data[0] + 0.001) < 1e-9

    def test_monotone_under_constant_gradient(self):
        p = ad.Parameter([1.0])
        opt = OptimizerState()
        values = []
        for _ in range(50):
            p.grad = np.array([0.7])
            adam_step([p], opt)
            values.append(p.data[0])
        assert np.all(np.diff(values) < 0)

    def test_clipping(self):
        p = ad.Parameter([0.0, 0.0])
        p.grad = np.array([30.0, 40.0])
        opt = OptimizerState(clip_norm=5.0)
        adam_step([p], opt)
        m = opt.first_moment[id(p)]
        np.testing.assert_allclose(m, 0.1 * np.array([3.0, 4.0]))

    def test_nan_gradient_aborts(self):
        p = ad.Parameter([0.0], name="w")
        p.grad = np.array([np.nan])
        with pytest.raises(DivergenceError, match="w"):
            adam_step([p], OptimizerState())
        assert p.data[0] == 0.0


def test_historical_average(rng):
    const = np.full((2, 12, 3, 1), 4.0)
    np.testing.assert_array_equal(historical_average_baseline(const), np.full((2, 12, 3), 4.0))
    slope = 0.5
    t = np.arange(36)
    series = slope * t
    X = np.stack([series[i:i + 12] for i in range(13)])[:, :, None].repeat(2, axis=2)
    Y = np.stack([series[i + 12:i + 24] for i in range(13)])[:, :, None].repeat(2, axis=2)
    pred = historical_average_baseline(X, 12)
    assert pred.shape == (13, 12, 2)
    for h in (1, 3, 12):
        assert abs(masked_mae(pred[:, h - 1], Y[:, h - 1], mask_zero=False) - slope * h) < 1e-12


class TestTraining:
    def test_zero_epochs(self, small_synthetic, tmp_path):
        ds, trans, _ = small_synthetic
        model = PGCNModel(tiny_config(input_window=12, output_window=12), ds.num_nodes)
        rep = train(model, ds, epochs=0, transition=trans, checkpoint_dir=tmp_path / "ck")
        assert rep.train_mae == [] and rep.best_epoch is None and not (tmp_path / "ck").exists()

    def test_seeded_runs_are_identical(self, small_synthetic):
        ds, trans, _ = small_synthetic
        curves = []
        for _ in range(2):
            model = PGCNModel(tiny_config(input_window=12, output_window=12), ds.num_nodes, seed=4)
            rep = train(model, ds, epochs=2, batch_size=32, seed=9, transition=trans)
            curves.append((rep.train_mae, rep.val_mae))
        assert curves[0] == curves[1]

    def test_best_checkpoint_reproduces_val_mae(self, small_synthetic, tmp_path):
        ds, trans, _ = small_synthetic
        model = PGCNModel(tiny_config(input_window=12, output_window=12), ds.num_nodes, seed=4)
        rep = train(model, ds, epochs=3, batch_size=32, seed=1, transition=trans, checkpoint_dir=tmp_path)
        assert rep.val_mae[rep.best_epoch - 1] == min(rep.val_mae)
        assert rep.best_epoch == 1 + rep.val_mae.index(min(rep.val_mae))
        loaded, items = load_checkpoint(tmp_path)
        val = evaluate(loaded, ds, "val", trans, horizons=()).overall.mae
        assert abs(val - rep.best_val_mae) < 1e-10
        assert float(items["val_mae"]) == rep.best_val_mae

    def test_loss_equals_reported_mae(self, small_synthetic):
        ds, trans, _ = small_synthetic
        model = PGCNModel(tiny_config(input_window=12, output_window=12), ds.num_nodes, seed=4)
        idx = ds.split("val")
        X, Y = ds.batch(idx)
        pred = model.forward(X, trans)
        loss = masked_mae(ad.scale(pred, ds.scaler.std) + ds.scaler.mean, Y).item()
        assert abs(loss - evaluate(model, ds, "val", trans, horizons=(), batch_size=len(idx)).overall.mae) < 1e-12

    def test_single_step_usually_helps(self, small_synthetic):
        ds, trans, _ = small_synthetic
        X, Y = ds.batch(ds.split("train")[:32])
        improved = 0
        for seed in range(20):
            model = PGCNModel(tiny_config(input_window=12, output_window=12), ds.num_nodes, seed=seed)
            before = train_step(model, X, Y, ds.scaler, OptimizerState(lr=1e-3), trans)
            with ad.no_grad():
                pred = model.forward(X, trans)
            after = masked_mae(ds.scaler.inverse_transform(pred.data), Y)
            improved += after < before
        assert improved >= 19

    def test_divergence_aborts(self, small_synthetic, tmp_path):
        ds, trans, _ = small_synthetic
        model = PGCNModel(tiny_config(input_window=12, output_window=12), ds.num_nodes, seed=4)
        model.head2.data[...] = np.nan
        with pytest.raises(DivergenceError):
            train(model, ds, epochs=1, transition=trans, checkpoint_dir=tmp_path)
