"""Losses, metrics, Adam, the training loop and the persistence baseline."""
import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._accel import kernels
from .model import PGCNModel, save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_HORIZONS = (3, 6, 12)


class DivergenceError(FloatingPointError):
    pass


class UndefinedMetricError(ValueError):
    pass


class HorizonError(ValueError):
    pass


# ---------------------------------------------------------------------------
# masked metrics
# ---------------------------------------------------------------------------

def _mask(target, mask_zero):
    return target != 0.0 if mask_zero else np.ones(target.shape, dtype=bool)


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ad.DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")


def masked_mae(pred, target, mask_zero=True):
    """Mean absolute error over observed entries.

    Differentiable when ``pred`` is a Tensor; returns a float for arrays.
    """
    target = np.asarray(target, dtype=np.float64)
    is_tensor = isinstance(pred, ad.Tensor)
    _check_shapes(pred, target)
    mask = _mask(target, mask_zero)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("masked_mae: no observed entries survive the mask", RuntimeWarning)
        return ad.Tensor(0.0) if is_tensor else 0.0
    if is_tensor:
        err = ad.absolute(ad.sub(pred, ad.Tensor(target)))
        return ad.scale(ad.tsum(ad.hadamard(err, ad.Tensor(mask.astype(np.float64)))), 1.0 / count)
    pred = np.asarray(pred, dtype=np.float64)
    return float(np.abs(pred - target)[mask].sum() / count)


def masked_rmse(pred, target, mask_zero=True):
    pred = pred.data if isinstance(pred, ad.Tensor) else np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    mask = _mask(target, mask_zero)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("masked_rmse: no observed entries survive the mask", RuntimeWarning)
        return 0.0
    return float(np.sqrt(((pred - target) ** 2)[mask].sum() / count))


def masked_mape(pred, target, mask_zero=True):
    """Mean absolute percentage error in percent; zero targets are always excluded."""
    pred = pred.data if isinstance(pred, ad.Tensor) else np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    mask = target != 0.0
    if not mask.any():
        raise UndefinedMetricError("MAPE is undefined when every target is zero")
    return float((np.abs(pred - target)[mask] / np.abs(target[mask])).mean() * 100.0)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, opt):
    """Bias-corrected Adam update in place, after optional global-norm clipping."""
    bad = [p.name or repr(p) for p in params if not np.all(np.isfinite(p.grad))]
    if bad:
        raise DivergenceError(f"non-finite gradients in {', '.join(bad)} at step {opt.step + 1}")
    grads = [p.grad for p in params]
    if opt.clip_norm:
        total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if total > opt.clip_norm:
            factor = opt.clip_norm / total
            grads = [g * factor for g in grads]
    opt.step += 1
    for p, g in zip(params, grads):
        key = id(p)
        if key not in opt.first_moment:
            opt.first_moment[key] = np.zeros_like(p.data)
            opt.second_moment[key] = np.zeros_like(p.data)
        kernels.adam_update(p.data, g, opt.first_moment[key], opt.second_moment[key],
                            opt.lr, opt.beta1, opt.beta2, opt.eps, opt.step)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class HorizonMetrics:
    horizon_steps: object
    horizon_minutes: object
    mae: float
    rmse: float
    mape_percent: float
    count: int


@dataclass
class MetricsReport:
    horizons: list
    overall: HorizonMetrics

    def at(self, steps):
        for h in self.horizons:
            if h.horizon_steps == steps:
                return h
        raise KeyError(steps)

    def rows(self):
        return list(self.horizons) + [self.overall]

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["horizon_steps", "horizon_minutes", "mae", "rmse", "mape_percent", "count"])
            for h in self.rows():
                w.writerow([h.horizon_steps, h.horizon_minutes, repr(h.mae), repr(h.rmse),
                            repr(h.mape_percent), h.count])

    def table(self):
        lines = [f"{'horizon':>8} {'MAE':>8} {'RMSE':>8} {'MAPE%':>8}"]
        for h in self.rows():
            label = f"{h.horizon_minutes} min" if h.horizon_steps != "all" else "all"
            lines.append(f"{label:>8} {h.mae:8.3f} {h.rmse:8.3f} {h.mape_percent:8.3f}")
        return "\n".join(lines)


def historical_average_baseline(X, horizon=12):
    """Repeat the most recent observation of channel 0 over every horizon step."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4:
        X = X[..., 0]
    if X.ndim != 3 or X.shape[1] == 0:
        raise ad.DimensionError(f"expected window (B, T, N[, C]) with T > 0, got {X.shape}")
    return np.repeat(X[:, -1:, :], horizon, axis=1)


def predict(predictor, dataset, indices, transition=None, batch_size=64):
    """Predictions in original units for the given sample indices."""
    out = []
    scaler = dataset.scaler
    for start in range(0, len(indices), batch_size):
        idx = indices[start:start + batch_size]
        X, _ = dataset.batch(idx)
        if isinstance(predictor, str):
            if predictor != "ha":
                raise ValueError(f"unknown baseline {predictor!r}")
            pred = historical_average_baseline(X, dataset.output_window)
        elif isinstance(predictor, PGCNModel):
            with ad.no_grad():
                pred = predictor.forward(X, transition).data
        else:
            pred = np.asarray(predictor(X))
        out.append(scaler.inverse_transform(pred))
    return np.concatenate(out, axis=0)


def metrics_from_predictions(pred, target, mask_zero=True, horizons=DEFAULT_HORIZONS, frequency_minutes=5):
    if any(h > pred.shape[1] or h < 1 for h in horizons):
        raise HorizonError(f"horizons {tuple(horizons)} exceed the output window of {pred.shape[1]}")

    def one(p, y, steps, minutes):
        mask = _mask(y, mask_zero)
        mape = masked_mape(p, y) if (y != 0).any() else float("nan")
        return HorizonMetrics(steps, minutes, masked_mae(p, y, mask_zero), masked_rmse(p, y, mask_zero),
                              mape, int(mask.sum()))

    rows = [one(pred[:, h - 1], target[:, h - 1], h, h * frequency_minutes) for h in horizons]
    return MetricsReport(rows, one(pred, target, "all", "all"))


def evaluate(predictor, dataset, split="test", transition=None, mask_zero=True,
             horizons=DEFAULT_HORIZONS, batch_size=64):
    """Per-horizon and aggregate metrics in original units on one split."""
    if any(h > dataset.output_window or h < 1 for h in horizons):
        raise HorizonError(f"horizons {tuple(horizons)} exceed the output window of {dataset.output_window}")
    idx = dataset.split(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = predict(predictor, dataset, idx, transition, batch_size)
    _, target = dataset.batch(idx, scaled=False)
    return metrics_from_predictions(pred, target, mask_zero, horizons, dataset.table.frequency_minutes)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    train_mae: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = None
    best_checkpoint: str = None
    seed: int = 0

    @property
    def best_val_mae(self):
        return None if self.best_epoch is None else self.val_mae[self.best_epoch - 1]

    def write_csv(self, path, include_seconds=True):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mae", "val_mae", "seconds"])
            for i, (tr, va, sec) in enumerate(zip(self.train_mae, self.val_mae, self.seconds), start=1):
                w.writerow([i, repr(tr), repr(va), f"{sec:.3f}"])


def train_step(model, X, Y, scaler, opt, transition=None, mask_zero=True):
    model.zero_grad()
    pred = model.forward(X, transition)
    loss = masked_mae(ad.scale(pred, scaler.std) + scaler.mean, Y, mask_zero)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"loss became {value}")
    ad.backward(loss)
    adam_step(model.parameters(), opt)
    return value


def train(model, dataset, epochs=100, batch_size=64, seed=0, transition=None, opt=None,
          mask_zero=True, checkpoint_dir=None, checkpoint_meta=None, on_epoch=None):
    """Fit with Adam, keeping the epoch with the lowest validation MAE.

    The loss is the masked MAE of inverse-scaled predictions over all output
    steps. On divergence the last good checkpoint is left in place and
    :class:`DivergenceError` propagates.
    """
    opt = opt or OptimizerState()
    report = TrainReport(seed=seed)
    rng = np.random.default_rng(seed)
    train_idx = dataset.split("train")
    if len(train_idx) == 0 or len(dataset.split("val")) == 0:
        raise ValueError("train and validation splits must be non-empty")
    scaler = dataset.scaler
    best = np.inf
    for epoch in range(1, epochs + 1):
        tic = time.perf_counter()
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), batch_size):
            X, Y = dataset.batch(order[start:start + batch_size])
            losses.append(train_step(model, X, Y, scaler, opt, transition, mask_zero))
        val = evaluate(model, dataset, "val", transition, mask_zero, horizons=(), batch_size=batch_size)
        report.train_mae.append(float(np.mean(losses)))
        report.val_mae.append(val.overall.mae)
        report.seconds.append(time.perf_counter() - tic)
        if val.overall.mae < best:
            best = val.overall.mae
            report.best_epoch = epoch
            if checkpoint_dir is not None:
                meta = dict(checkpoint_meta or {})
                meta.update(seed=seed, epoch=epoch, val_mae=repr(best),
                            scaler_mean=repr(scaler.mean), scaler_std=repr(scaler.std))
                save_checkpoint(checkpoint_dir, model, meta)
                report.best_checkpoint = str(checkpoint_dir)
        log.info("epoch %d train_mae %.4f val_mae %.4f", epoch, report.train_mae[-1], report.val_mae[-1])
        if on_epoch is not None:
            on_epoch(epoch, report)
    return report
