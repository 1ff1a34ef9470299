"""Minibatch training, evaluation and optimizers."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..tensor import Parameter, make_rng
from .config import ExperimentConfig
from .data import Dialogue
from .metrics import Metrics, compute_metrics
from .model import EmotionModel, softmax_cross_entropy

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, lr: float, loss: float):
        self.epoch = epoch
        self.lr = lr
        self.loss = loss
        super().__init__(
            f"training diverged at epoch {epoch} (loss={loss}) with learning rate {lr}; "
            "try a smaller --lr"
        )


class SGD:
    def __init__(self, params: Sequence[Parameter], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            p.value -= self.lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params, lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    train_weighted_f1: float
    val_accuracy: float | None
    val_weighted_f1: float | None
    wall_time: float


@dataclass
class TrainingLog:
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_dict(self, include_time: bool = True) -> dict:
        records = [asdict(e) for e in self.epochs]
        if not include_time:
            for r in records:
                r.pop("wall_time")
        return {"seed": self.seed, "epochs": records}

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def train(model: EmotionModel, dataset: Sequence[Dialogue], config: ExperimentConfig | None = None,
          val: Sequence[Dialogue] | None = None):
    """Minibatch training on summed utterance cross-entropy, averaged per batch.

    Returns ``(model, TrainingLog)``. Shuffling uses its own stream derived
    from ``config.seed`` so runs are reproducible.
    """
    config = model.config if config is None else config
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    params = model.parameters()
    opt = make_optimizer(config.optimizer, params, config.lr)
    rng = make_rng(config.seed + 7919)
    history = TrainingLog(seed=config.seed)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        total_loss = 0.0
        total_utts = 0
        y_true, y_pred = [], []
        for batch in _batches(rng.permutation(len(dataset)), config.batch_size):
            model.zero_grad()
            n_utts = sum(len(dataset[i]) for i in batch)
            batch_loss = 0.0
            # overflow surfaces as a non-finite loss, reported below
            with np.errstate(over="ignore", invalid="ignore"):
                for i in batch:
                    d = dataset[i]
                    logits = model.forward(model.select(d))
                    loss, dlogits, probs = softmax_cross_entropy(logits, d.labels)
                    batch_loss += loss
                    model.backward(dlogits / n_utts)
                    y_true.append(d.labels)
                    y_pred.append(probs.argmax(axis=1))
            if not math.isfinite(batch_loss):
                raise DivergenceError(epoch, config.lr, batch_loss)
            opt.step()
            total_loss += batch_loss
            total_utts += n_utts
        train_m = compute_metrics(np.concatenate(y_true), np.concatenate(y_pred), config.num_classes)
        val_m = evaluate(model, val) if val else None
        record = EpochRecord(
            epoch=epoch,
            loss=total_loss / total_utts,
            train_accuracy=train_m.accuracy,
            train_weighted_f1=train_m.weighted_f1,
            val_accuracy=None if val_m is None else val_m.accuracy,
            val_weighted_f1=None if val_m is None else val_m.weighted_f1,
            wall_time=time.perf_counter() - start,
        )
        history.epochs.append(record)
        log.debug("epoch %d loss %.4f train acc %.4f", epoch, record.loss, record.train_accuracy)
    return model, history


def predict_all(model: EmotionModel, split: Sequence[Dialogue], workers: int = 1):
    """Predictions per dialogue, in split order regardless of ``workers``."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(model.predict, split))
    return [model.predict(d) for d in split]


def evaluate(model: EmotionModel, split: Sequence[Dialogue], workers: int = 1) -> Metrics:
    if not split:
        raise ValueError("cannot evaluate on an empty split")
    preds = predict_all(model, split, workers)
    y_true = np.concatenate([d.labels for d in split])
    return compute_metrics(y_true, np.concatenate(preds), model.config.num_classes)
