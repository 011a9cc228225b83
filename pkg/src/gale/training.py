"""Mini-batch training with early stopping and best-checkpoint selection."""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models as M
from . import tensor as T

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1.8663e-5
    weight_decay: float = 5.9663e-5
    grad_clip: float = 0.5032
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    mode: str = "multimodal"
    train_step: int = 1
    val_step: int = 1
    val_limit: int | None = None
    eval_batch: int = 256

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        for name in ("batch_size", "max_epochs", "patience", "train_step", "val_step", "eval_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("lr and weight_decay must be non-negative, grad_clip positive")


# Best reported settings per mode (dropout belongs to the model config).
MODE_DEFAULTS = {
    "multimodal": dict(lr=1.8663e-5, weight_decay=5.9663e-5, dropout=0.2865, grad_clip=0.5032,
                       batch_size=8, max_epochs=100, patience=5),
    "acc_only": dict(lr=4.9720e-4, weight_decay=1.5191e-5, dropout=0.1315, grad_clip=0.5,
                     batch_size=8, max_epochs=100, patience=5),
    "cnn_baseline": dict(lr=5.4010e-4, weight_decay=2.1948e-6, dropout=0.0510, grad_clip=1.2071,
                         batch_size=512, max_epochs=15, patience=4),
}


def default_train_config(mode, **overrides):
    kw = {k: v for k, v in MODE_DEFAULTS[mode].items() if k != "dropout"}
    kw.update(mode=mode)
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    is_best: bool = False


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    @property
    def best_epoch(self):
        if not self.records:
            raise ValueError("empty training log")
        vals = [r.val_loss for r in self.records]
        return self.records[int(np.argmin(vals))].epoch

    def mark_best(self):
        best = self.best_epoch
        for r in self.records:
            r.is_best = r.epoch == best

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "seconds", "is_best"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.seconds:.3f}", int(r.is_best)])


@dataclass
class Checkpoint:
    config: M.ModelConfig
    weights: dict
    epoch: int = 0
    optimizer: T.AdamState | None = None
    meta: dict = field(default_factory=dict)

    def tensors(self):
        return M.weights_from_arrays(self.weights)


def _batches(idx, size):
    for i in range(0, len(idx), size):
        yield idx[i:i + size]


def predict(dataset, indices, weights, cfg, batch=256, horizon=None):
    """Rolled-out forecasts ``(len(indices), horizon, d_a)`` in model units."""
    indices = np.asarray(indices, dtype=int)
    outs = []
    for chunk in _batches(indices, batch):
        Xw, Xa, _ = dataset.batch(chunk)
        outs.append(M.rollout(Xw, Xa, weights, cfg, horizon))
    if not outs:
        return np.zeros((0, horizon or cfg.L_pred, dataset.d_a))
    return np.concatenate(outs, axis=0)


def validate(dataset, indices, weights, cfg, batch=256):
    """Mean squared rollout error over the given windows."""
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        raise ValueError("validation split is empty")
    total = 0.0
    for chunk in _batches(indices, batch):
        Xw, Xa, Y = dataset.batch(chunk)
        pred = M.rollout(Xw, Xa, weights, cfg)
        total += float(np.sum((pred - Y) ** 2))
    return total / (indices.size * cfg.L_pred * dataset.d_a)


def select_best(log_, checkpoints):
    """Checkpoint of the epoch with minimal validation loss (earliest on ties)."""
    if not log_.records:
        raise ValueError("empty training log")
    return checkpoints[log_.best_epoch]


def epoch_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def train(dataset, model_cfg, train_cfg, progress=None):
    """Fit ``model_cfg`` on the training windows; return ``(best checkpoint, log)``.

    Teacher forcing for the loss; rollout loss on validation windows selects
    the checkpoint and drives early stopping.
    """
    train_idx = dataset.subset("train", train_cfg.train_step)
    val_idx = dataset.subset("val", train_cfg.val_step, train_cfg.val_limit)
    if train_idx.size == 0 or val_idx.size == 0:
        raise TrainingError("training and validation splits must be non-empty")
    if dataset.L_enc != model_cfg.L_enc or dataset.L_pred != model_cfg.L_pred:
        raise TrainingError("dataset window lengths do not match the model config")
    init_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 2**31 - 1]))
    weights = M.init_weights(model_cfg, init_rng)
    params = list(weights.values())
    opt = T.Adam(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    log_ = TrainLog()
    best_val, best_epoch, checkpoints = np.inf, None, {}
    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        rng = epoch_rng(train_cfg.seed, epoch)
        order = rng.permutation(train_idx)
        loss_sum = 0.0
        for b, chunk in enumerate(_batches(order, train_cfg.batch_size)):
            if np.any(dataset.labels[chunk] != 0):
                raise TrainingError("non-training window in a training batch")
            Xw, Xa, Y = dataset.batch(chunk)
            try:
                pred = M.teacher_forced_forward(Xw, Xa, Y, weights, model_cfg, rng)
                loss = T.mse_loss(pred, Y)
                opt.zero_grad()
                T.backward(loss)
            except T.NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {exc}") from exc
            T.clip_grad_norm(params, train_cfg.grad_clip)
            opt.step()
            loss_sum += loss.item() * len(chunk)
        train_loss = loss_sum / train_idx.size
        val_loss = validate(dataset, val_idx, weights, model_cfg, train_cfg.eval_batch)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0)
        log_.records.append(rec)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            checkpoints = {epoch: Checkpoint(copy.deepcopy(model_cfg), M.weights_to_arrays(weights), epoch,
                                             copy.deepcopy(opt.state),
                                             {"seed": train_cfg.seed, "val_loss": val_loss})}
        if progress:
            progress(rec)
        log.info("epoch %d train %.6g val %.6g (%.1fs)", epoch, train_loss, val_loss, rec.seconds)
        if epoch - best_epoch >= train_cfg.patience:
            break
    log_.mark_best()
    best = select_best(log_, checkpoints)
    best.meta["train_config"] = asdict(train_cfg)
    return best, log_
