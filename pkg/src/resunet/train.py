"""MSE loss, step-decay learning rate and plain SGD training loop."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import model
from .checkpoint import save_checkpoint
from .data import TILE_SIZE, LabeledImage, sample_tiles

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
        self.step = step
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainConfig:
    batch_size: int = 8
    initial_lr: float = 0.001
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 20
    epochs: int = 50
    samples_per_epoch: int = 600
    seed: int = 0
    width_scale: float = 1.0
    tile_size: int = TILE_SIZE

    def validate(self) -> None:
        for name in ("batch_size", "lr_decay_every_epochs", "samples_per_epoch", "tile_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.initial_lr > 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.width_scale <= 0:
            raise ValueError(f"width_scale must be positive, got {self.width_scale}")
        if self.samples_per_epoch < self.batch_size:
            raise ValueError("samples_per_epoch must be at least batch_size")

    @property
    def steps_per_epoch(self) -> int:
        return self.samples_per_epoch // self.batch_size


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    lr: float
    mse_loss: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-element mean of squared error and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    # Exact decimal arithmetic, rounded once, so 0.001 * 0.1**2 is the double nearest 1e-5.
    k = epoch // config.lr_decay_every_epochs
    return float(Fraction(str(float(config.initial_lr))) * Fraction(str(float(config.lr_decay_factor))) ** k)


def sgd_step(store: model.ParamStore, grads: dict[str, np.ndarray], lr: float) -> None:
    """w <- w - lr * g for every learnable tensor, in place."""
    missing = [name for name in store.params if name not in grads]
    if missing:
        raise KeyError(f"no gradient for learnable tensor(s): {', '.join(missing)}")
    if lr == 0:
        return
    for name, w in store.params.items():
        w -= np.float32(lr) * grads[name].astype(w.dtype, copy=False)


def _batches(dataset, config: TrainConfig):
    total = config.epochs * config.steps_per_epoch * config.batch_size
    stream = sample_tiles(dataset, total, config.seed, config.tile_size)
    while True:
        tiles = [next(stream, None) for _ in range(config.batch_size)]
        if tiles[-1] is None:
            return
        yield (
            np.concatenate([t.image for t in tiles]),
            np.concatenate([t.mask for t in tiles]),
        )


def train(
    dataset: Sequence[LabeledImage],
    config: TrainConfig,
    out_dir: str | None = None,
    store: model.ParamStore | None = None,
    on_step: Callable[[TrainLogRecord], None] | None = None,
) -> tuple[model.ParamStore, list[TrainLogRecord]]:
    """Run ``epochs * steps_per_epoch`` SGD steps on random tiles.

    With ``out_dir`` set, a JSON-lines log (``train_log.jsonl``) and one
    checkpoint per epoch (``epoch_XXX.ckpt``, plus ``final.ckpt``) are written.
    """
    config.validate()
    if not dataset:
        raise ValueError("training dataset is empty")
    if store is None:
        store = model.init_params(config.seed, config.width_scale)
    records: list[TrainLogRecord] = []
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w", encoding="utf-8")
    t0 = time.perf_counter()
    try:
        batches = _batches(dataset, config)
        step = 0
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config, epoch)
            for _ in range(config.steps_per_epoch):
                x, y = next(batches)
                pred, cache = model.forward_with_cache(x, store, model.TRAINING)
                loss, grad = mse_loss(pred, y)
                rec = TrainLogRecord(epoch, step, lr, loss, time.perf_counter() - t0)
                if not math.isfinite(loss):
                    if log_fh:
                        log_fh.write(rec.to_json() + "\n")
                    raise TrainingDiverged(step, epoch, loss)
                sgd_step(store, model.backward(grad, cache, store), lr)
                records.append(rec)
                if log_fh:
                    log_fh.write(rec.to_json() + "\n")
                if on_step:
                    on_step(rec)
                step += 1
            mean = np.mean([r.mse_loss for r in records if r.epoch == epoch])
            log.info("epoch %d lr %.3g mean mse %.5f", epoch, lr, mean)
            if out_dir is not None:
                save_checkpoint(store, os.path.join(out_dir, f"epoch_{epoch + 1:03d}.ckpt"))
        if out_dir is not None:
            save_checkpoint(store, os.path.join(out_dir, "final.ckpt"))
    finally:
        if log_fh:
            log_fh.close()
    return store, records


def epoch_means(records: Sequence[TrainLogRecord]) -> list[float]:
    epochs = sorted({r.epoch for r in records})
    return [float(np.mean([r.mse_loss for r in records if r.epoch == e])) for e in epochs]
