"""Adam training with a masked loss, k-fold splits, metrics and a per-cell linear baseline."""
from __future__ import annotations

from dataclasses import dataclass, asdict, replace
import logging
import math

import numpy as np

from . import nn
from .grid import FieldStack
from .vit import ViTConfig, ViTRegressor, Scaling

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.01
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    fraction: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise TrainingError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not 0 < self.fraction <= 1:
            raise TrainingError(f"fraction must lie in (0, 1], got {self.fraction}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_indices: np.ndarray
    validation_indices: np.ndarray


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    r2_det: float
    r2_pearson_sq: float
    n: int = 0
    r2_undefined: bool = False

    def as_row(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "r2_det": self.r2_det,
                "r2_pearson_sq": self.r2_pearson_sq}


METRIC_NAMES = ("rmse", "mae", "r2_det", "r2_pearson_sq")


def kfold_split(n_samples: int, seed: int = 0, k: int = 5) -> list[FoldSplit]:
    """Seeded shuffle followed by ``k`` contiguous validation blocks."""
    if n_samples < k:
        raise TrainingError(f"need at least {k} samples for {k}-fold CV, got {n_samples}")
    order = np.random.default_rng(seed).permutation(n_samples)
    blocks = np.array_split(order, k)
    folds = []
    for i, val in enumerate(blocks):
        train = np.concatenate([b for j, b in enumerate(blocks) if j != i])
        folds.append(FoldSplit(i, np.sort(train), np.sort(val)))
    return folds


# --------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; gradients are zeroed after every step."""

    def __init__(self, params, cfg: TrainConfig = TrainConfig()):
        self.params = list(params)
        self.lr = cfg.learning_rate
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_epsilon
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {p.name!r} at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


# --------------------------------------------------------------------------
# metrics


def compute_metrics(pred, target) -> Metrics:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise TrainingError(f"prediction/target length mismatch {pred.shape} vs {target.shape}")
    if len(pred) == 0:
        raise TrainingError("no valid cells to evaluate")
    err = pred - target
    rmse = math.sqrt(float(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    ss_res = float(np.sum(err * err))
    tc = target - target.mean()
    ss_tot = float(np.sum(tc * tc))
    undefined = False
    if ss_tot > 0:
        r2_det = 1.0 - ss_res / ss_tot
    else:
        r2_det = 1.0 if ss_res == 0 else 0.0
        undefined = True
    pc = pred - pred.mean()
    ss_pred = float(np.sum(pc * pc))
    if ss_pred > 0 and ss_tot > 0:
        r = float(np.sum(pc * tc)) / math.sqrt(ss_pred * ss_tot)
        r2p = min(r * r, 1.0)
    else:
        r2p = 0.0
        undefined = True
    # power-mean inequality; guards against silent bookkeeping errors
    assert rmse >= mae - 1e-12 * max(1.0, mae)
    return Metrics(rmse, mae, r2_det, r2p, n=len(pred), r2_undefined=undefined)


def average_metrics(ms) -> Metrics:
    ms = list(ms)
    return Metrics(*(float(np.mean([getattr(m, k) for m in ms])) for k in METRIC_NAMES),
                   n=sum(m.n for m in ms), r2_undefined=any(m.r2_undefined for m in ms))


# --------------------------------------------------------------------------
# training


def _check_aligned(inputs: FieldStack, targets: FieldStack):
    if inputs.spec != targets.spec or len(inputs) != len(targets) or np.any(inputs.times != targets.times):
        raise TrainingError("input and target stacks are not aligned")


def subsample(indices, fraction: float, seed: int) -> np.ndarray:
    indices = np.asarray(indices)
    if fraction >= 1.0:
        return indices
    n = int(round(fraction * len(indices)))
    if n < 1:
        raise TrainingError(f"fraction {fraction} leaves no training samples out of {len(indices)}")
    pick = np.random.default_rng([seed, 7]).choice(len(indices), size=n, replace=False)
    return np.sort(indices[pick])


def fit_scaling(inputs: FieldStack, targets: FieldStack, indices) -> Scaling:
    x = inputs.values[indices]
    y = targets.values[indices]
    x = x[np.isfinite(x)]
    y = y[np.isfinite(y)]
    if y.size == 0:
        raise TrainingError("training targets contain no valid cells")

    def _ms(a):
        if a.size == 0:
            return 0.0, 1.0
        s = float(a.std())
        return float(a.mean()), (s if s > 0 else 1.0)

    # inputs and targets share units, so one affine map keeps the input skip an identity
    tm, tstd = _ms(y)
    return Scaling(tm, tstd, tm, tstd)


def masked_mse(model: ViTRegressor, inputs: FieldStack, targets: FieldStack, indices,
               batch_size: int = 32) -> float:
    """Masked MSE pooled over all valid target cells of the selected samples."""
    indices = np.asarray(indices)
    sq, cnt = 0.0, 0
    for s in range(0, len(indices), batch_size):
        idx = indices[s:s + batch_size]
        pred, _ = model.forward_batch(inputs.values[idx])
        y = targets.values[idx]
        m = np.isfinite(y)
        d = pred[m] - y[m]
        sq += float(d @ d)
        cnt += int(m.sum())
    return sq / cnt if cnt else float("nan")


def train(inputs: FieldStack, targets: FieldStack, split: FoldSplit,
          vit: ViTConfig = ViTConfig(), cfg: TrainConfig = TrainConfig(), model: ViTRegressor = None):
    """Train a regressor on ``split.train_indices``.

    Returns ``(model, history)``; history holds one dict per epoch with the
    mean training loss seen during the epoch and the validation loss after it.
    """
    _check_aligned(inputs, targets)
    train_idx = subsample(split.train_indices, cfg.fraction, cfg.seed)
    if len(train_idx) == 0:
        raise TrainingError("empty training set")
    if model is None:
        model = ViTRegressor(vit, seed=cfg.seed, scaling=fit_scaling(inputs, targets, train_idx))
    opt = Adam(model.parameters(), cfg)
    rng = np.random.default_rng([cfg.seed, 11])
    X, Y = inputs.values, targets.values
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_idx)
        sq, cnt = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[s:s + cfg.batch_size])
            y = Y[idx]
            mask = np.isfinite(y)
            pred, cache = model.forward_batch(X[idx])
            loss, lc = nn.mse_masked(pred, y, mask)
            if lc.empty:
                continue
            sq += loss * lc.count
            cnt += lc.count
            model.backward(nn.mse_masked_backward(1.0, lc), cache)
            opt.step()
        row = {"epoch": epoch, "train_mse": sq / cnt if cnt else float("nan")}
        if len(split.validation_indices):
            row["val_mse"] = masked_mse(model, inputs, targets, split.validation_indices)
        history.append(row)
        log.info("fold %d epoch %d train_mse %.4f val_mse %.4f", split.fold_index, epoch,
                 row["train_mse"], row.get("val_mse", float("nan")))
    return model, history


def evaluate(model: ViTRegressor, inputs: FieldStack, targets: FieldStack, indices,
             batch_size: int = 32) -> Metrics:
    _check_aligned(inputs, targets)
    indices = np.asarray(indices)
    preds, obs = [], []
    for s in range(0, len(indices), batch_size):
        idx = indices[s:s + batch_size]
        pred, _ = model.forward_batch(inputs.values[idx])
        y = targets.values[idx]
        m = np.isfinite(y)
        preds.append(pred[m])
        obs.append(y[m])
    return compute_metrics(np.concatenate(preds), np.concatenate(obs))


# --------------------------------------------------------------------------
# linear baseline


@dataclass
class CellLinearFit:
    slope: np.ndarray      # (rows, cols), NaN where no fit
    intercept: np.ndarray
    fallback: np.ndarray   # per-cell training mean of the target (global mean where none)
    n_pairs: np.ndarray


def fit_cell_linear(inputs: FieldStack, targets: FieldStack, train_indices, min_pairs: int = 3) -> CellLinearFit:
    """Per-cell ordinary least squares ``target ~ input`` over the training days."""
    x = inputs.values[train_indices]
    y = targets.values[train_indices]
    ok = np.isfinite(x) & np.isfinite(y)
    n = ok.sum(axis=0)
    xs = np.where(ok, x, 0.0)
    ys = np.where(ok, y, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        xm = xs.sum(axis=0) / n
        ym = ys.sum(axis=0) / n
        dx = np.where(ok, x - xm, 0.0)
        dy = np.where(ok, y - ym, 0.0)
        sxx = (dx * dx).sum(axis=0)
        sxy = (dx * dy).sum(axis=0)
        slope = np.where(sxx > 0, sxy / np.where(sxx > 0, sxx, 1.0), 0.0)
    intercept = ym - slope * xm
    fitted = n >= min_pairs
    slope = np.where(fitted, slope, np.nan)
    intercept = np.where(fitted, intercept, np.nan)
    yv = np.isfinite(y)
    ny = yv.sum(axis=0)
    global_mean = float(np.nanmean(y)) if yv.any() else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        cell_mean = np.where(yv, y, 0.0).sum(axis=0) / ny
    fallback = np.where(ny > 0, cell_mean, global_mean)
    return CellLinearFit(slope, intercept, fallback, n)


def predict_cell_linear(fit: CellLinearFit, values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lin = fit.slope * values + fit.intercept
    return np.where(np.isfinite(lin), lin, fit.fallback)


def linear_baseline(inputs: FieldStack, targets: FieldStack, split: FoldSplit) -> Metrics:
    """Fit per-cell OLS on the training days and score the validation days."""
    _check_aligned(inputs, targets)
    fit = fit_cell_linear(inputs, targets, split.train_indices)
    idx = split.validation_indices
    pred = predict_cell_linear(fit, inputs.values[idx])
    y = targets.values[idx]
    m = np.isfinite(y)
    return compute_metrics(pred[m], y[m])
