"""MAE-loss training with Adam over windowed datasets."""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import WindowedDataset
from .model import Model, model_backward, model_forward, save_model
from .tensor_core import DTYPE, ShapeError

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 5.0
    seed: int = 0
    shuffle_each_epoch: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")


def mae_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean absolute error and its (sub)gradient w.r.t. ``pred``; sign(0) = 0."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"mae_loss: pred {list(pred.shape)} vs target {list(target.shape)}")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, cfg: TrainConfig) -> tuple[dict, OptimizerState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.m:
        fresh = OptimizerState.like(params)
        state.m, state.v = fresh.m, fresh.v
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"{k}: gradient {g.shape} vs parameter {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    # keyed on (seed, epoch) so the order never depends on how many draws came before
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_step(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[float, OrderedDict]:
    """Mean MAE over a batch of windows and the gradient of that mean."""
    pred, cache = model_forward(model, x)
    diff = pred - y
    B, W = diff.shape
    loss = float(np.abs(diff).mean())
    grads = model_backward(model, cache, np.sign(diff) / (B * W))
    return loss, grads


def evaluate_loss(model: Model, dataset: WindowedDataset, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate loss on an empty dataset")
    total = 0.0
    for s in range(0, len(dataset), batch_size):
        pred = model_forward(model, dataset.inputs[s:s + batch_size])[0]
        total += float(np.abs(pred - dataset.targets[s:s + batch_size]).sum())
    return total / dataset.inputs.size


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    best_model: Model
    best_epoch: int
    optimizer: OptimizerState


def train(model: Model, train_set: WindowedDataset, valid_set: WindowedDataset | None,
          cfg: TrainConfig, checkpoint_path=None, metadata: dict | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Mini-batch Adam on MAE.  ``model`` is updated in place and returned.

    ``train_loss`` per epoch is the mean loss over that epoch's batches, each
    measured before its update.  The best-validation parameters are kept as
    ``best_model`` (and written to ``checkpoint_path`` when given).
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if valid_set is not None and len(valid_set) == 0:
        raise ValueError("validation set is empty")
    W = model.config.window_len
    if train_set.window_len != W or (valid_set is not None and valid_set.window_len != W):
        raise ShapeError(f"dataset window length differs from model window_len {W}")

    params = model.parameters()
    state = OptimizerState.like(params)
    history: list[EpochRecord] = []
    best_model, best_epoch, best_valid = model.copy(), 0, np.inf
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = epoch_permutation(n, cfg.seed, epoch) if cfg.shuffle_each_epoch else np.arange(n)
        loss_sum = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = batch_step(model, train_set.inputs[idx], train_set.targets[idx])
            norm = clip_global_norm(grads, cfg.clip_norm)
            if not (np.isfinite(loss) and np.isfinite(norm)):
                raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}, batch {s // cfg.batch_size}")
            adam_step(params, grads, state, cfg)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / n
        valid_loss = evaluate_loss(model, valid_set) if valid_set is not None else train_loss
        if not (np.isfinite(train_loss) and np.isfinite(valid_loss)):
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}")
        rec = EpochRecord(epoch, train_loss, valid_loss)
        history.append(rec)
        log.info("epoch %d train %.6f valid %.6f", epoch, train_loss, valid_loss)
        if valid_loss < best_valid:
            best_valid, best_epoch, best_model = valid_loss, epoch, model.copy()
            if checkpoint_path is not None:
                save_model(best_model, checkpoint_path, {**(metadata or {}), "best_epoch": epoch})
        if cfg.checkpoint_every and checkpoint_path is not None and epoch % cfg.checkpoint_every == 0:
            p = Path(checkpoint_path)
            save_model(model, p.with_name(f"{p.stem}.epoch{epoch:04d}{p.suffix}"), {**(metadata or {}), "epoch": epoch})
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(model, history, best_model, best_epoch, state)


def write_history_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "valid_loss"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.valid_loss)])


def read_history_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["valid_loss"]))
                for r in csv.DictReader(fh)]
