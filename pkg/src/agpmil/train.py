"""Adam, learning-rate schedule and the one-bag-per-step training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import MilModel, elbo_loss, predict_dataset, save_checkpoint
from .rng import stream

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 5
    lr_decay: str = "none"  # "none" or "exp"
    decay_rate: float = 0.1
    decay_start: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 1
    log_every: int = 1000
    checkpoint_dir: Optional[str] = None
    clip_norm: Optional[float] = None
    class_balanced: bool = False

    def validate(self) -> list:
        errors = []
        if not self.lr > 0:
            errors.append(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0:
            errors.append(f"epochs must be >= 0, got {self.epochs}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            errors.append("adam betas must lie in (0, 1)")
        if self.lr_decay not in ("none", "exp"):
            errors.append(f"lr_decay must be 'none' or 'exp', got {self.lr_decay!r}")
        return errors


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant before ``decay_start`` (0-based epochs), then lr * exp(-rate * (epoch - start + 1))."""
    if cfg.lr_decay == "none" or epoch < cfg.decay_start:
        return cfg.lr
    return cfg.lr * math.exp(-cfg.decay_rate * (epoch - cfg.decay_start + 1))


class Adam:
    """Adam with bias correction; zeroes gradients after every step."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            g.fill(0.0)


def adam_step(optimizer: Adam, lr: float):
    optimizer.step(lr)


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params))
    if total > max_norm:
        for p in params:
            p.grad *= max_norm / total
    return total


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    mean_kl: float
    train_acc: float
    val_acc: Optional[float]
    wall_time: float


@dataclass
class TrainingReport:
    epochs: list = field(default_factory=list)

    def losses(self) -> list:
        return [r.mean_loss for r in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.epochs)


def accuracy(predictions, bags) -> float:
    return float(np.mean([p.predicted_class == b.label for p, b in zip(predictions, bags)]))


def balanced_class_weights(labels, k: int) -> list:
    counts = np.bincount(np.asarray(labels), minlength=k)
    b = len(labels)
    return [b / (k * c) if c else 0.0 for c in counts]


def train_epochs(
    model: MilModel,
    dataset,
    cfg: TrainConfig,
    val=None,
    report_path=None,
    checkpoint_extra: Optional[dict] = None,
) -> TrainingReport:
    """Algorithm: for every epoch, visit the bags in a seeded shuffled order, one Adam step per bag."""
    errors = cfg.validate()
    if errors:
        raise ValueError("; ".join(errors))
    bags = list(dataset)
    k = model.config.num_classes
    labels = [b.label for b in bags]
    if bags and max(labels) >= k:
        raise ValueError(f"dataset has label {max(labels)} but the model has {k} classes")
    model.config.kl_weight = 1.0 / max(len(bags), 1)
    if cfg.class_balanced:
        model.config.class_weights = balanced_class_weights(labels, k)
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    report = TrainingReport()
    if report_path is not None:
        Path(report_path).write_text("")
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = stream(cfg.seed, "shuffle", epoch).permutation(len(bags))
        mc = stream(cfg.seed, "mc", epoch)
        loss_sum = kl_sum = 0.0
        correct = 0
        for step, i in enumerate(order):
            bag = bags[i]
            parts = elbo_loss(bag, model, rng=mc)
            if not math.isfinite(parts.total.item()):
                raise FloatingPointError(f"loss is {parts.total.item()} at epoch {epoch}, bag {bag.bag_id}")
            parts.total.backward()
            if cfg.clip_norm is not None:
                clip_gradients(opt.params, cfg.clip_norm)
            opt.step(lr)
            loss_sum += parts.total.item()
            kl_sum += parts.kl
            correct += int(parts.predicted_class == bag.label)
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                logger.info("epoch %d bag %d/%d mean loss %.5f", epoch + 1, step + 1, len(bags), loss_sum / (step + 1))
        n = max(len(bags), 1)
        val_acc = None
        if val is not None and len(val):
            val_acc = accuracy(predict_dataset(model, val), list(val))
        rec = EpochRecord(epoch + 1, lr, loss_sum / n, kl_sum / n, correct / n, val_acc, time.perf_counter() - start)
        report.epochs.append(rec)
        logger.info("epoch %d: loss %.5f train acc %.4f val acc %s", rec.epoch, rec.mean_loss, rec.train_acc, val_acc)
        if report_path is not None:
            with open(report_path, "a") as fh:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        if cfg.checkpoint_dir is not None:
            save_checkpoint(model, Path(cfg.checkpoint_dir) / "checkpoint", extra=checkpoint_extra)
    return report
