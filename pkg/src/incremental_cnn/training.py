"""Epoch-level training and evaluation shared by regular and incremental runs."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import Dataset, iterate_batches
from .exceptions import ConfigurationError
from .flops import FlopCounter, model_inference_flops, training_step_flops
from .model import ModelState, backward, count_params, forward, predict_logits
from .optim import OptimConfig, apply_gradients
from .tensor import softmax_cross_entropy

EVAL_BATCH_SIZE = 256


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 60
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")


class RngStreams:
    """Independent generators for shuffling and augmentation, derived from one seed."""

    def __init__(self, seed: int):
        self.shuffle = np.random.default_rng([int(seed), 0x5F1])
        self.augment = np.random.default_rng([int(seed), 0xA06])

    def state(self) -> dict:
        return {"shuffle": self.shuffle.bit_generator.state,
                "augment": self.augment.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.shuffle.bit_generator.state = state["shuffle"]
        self.augment.bit_generator.state = state["augment"]


@dataclass
class MetricsRecord:
    epoch: int
    stage: int
    lookahead: bool
    train_loss: float
    train_acc: float
    val_acc: float
    step_flops: int
    cumulative_flops: int
    inference_flops: int
    live_params: int
    param_fraction: float
    wall_seconds: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


METRICS_FIELDS = [f.name for f in fields(MetricsRecord)]


def train_epoch(model: ModelState, dataset: Dataset, optim_cfg: OptimConfig, batch_size: int,
                rngs: RngStreams, augment: bool = True):
    """One pass over ``dataset``. Returns ``(mean loss, accuracy %, FLOPs spent)``."""
    total_loss, correct, flops = 0.0, 0, 0
    step_cost = {}
    batches = iterate_batches(dataset, batch_size, rngs.shuffle,
                              rngs.augment if augment else None, model.dtype)
    for xb, yb in batches:
        cache, logits = forward(model, xb, training=True)
        loss, grad = softmax_cross_entropy(logits, yb)
        grads = backward(model, cache, grad)
        apply_gradients(model, grads, optim_cfg)
        n = len(yb)
        total_loss += loss * n
        correct += int((logits.argmax(axis=1) == yb).sum())
        if n not in step_cost:
            step_cost[n] = training_step_flops(model, n)
        flops += step_cost[n]
    n = max(len(dataset), 1)
    return total_loss / n, 100.0 * correct / n, flops


def accuracy(model: ModelState, dataset: Dataset) -> float:
    """Top-1 accuracy in percentage points, no augmentation."""
    if len(dataset) == 0:
        return 0.0
    correct = 0
    for xb, yb in iterate_batches(dataset, EVAL_BATCH_SIZE, dtype=model.dtype):
        correct += int((predict_logits(model, xb, EVAL_BATCH_SIZE).argmax(axis=1) == yb).sum())
    return 100.0 * correct / len(dataset)


def run_epoch(model: ModelState, train: Dataset, validation: Dataset, optim_cfg: OptimConfig,
              train_cfg: TrainConfig, rngs: RngStreams, counter: FlopCounter, epoch: int,
              stage: int, lookahead: bool = False) -> MetricsRecord:
    """Train for one epoch, evaluate on validation, and account FLOPs for both."""
    t0 = time.perf_counter()
    loss, train_acc, flops = train_epoch(model, train, optim_cfg, train_cfg.batch_size, rngs,
                                         train_cfg.augment)
    val_acc = accuracy(model, validation)
    inference = model_inference_flops(model)
    flops += inference * len(validation)
    counter.add(flops)
    live = count_params(model)
    return MetricsRecord(
        epoch=epoch, stage=stage, lookahead=lookahead, train_loss=float(loss),
        train_acc=float(train_acc), val_acc=float(val_acc), step_flops=int(flops),
        cumulative_flops=counter.cumulative, inference_flops=inference, live_params=live,
        param_fraction=live / count_params(model, live_only=False),
        wall_seconds=time.perf_counter() - t0,
    )
