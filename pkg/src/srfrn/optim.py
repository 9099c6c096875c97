"""L1 loss, Adam updates, plateau learning-rate schedule, and the epoch loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from .model import ConvLayer, SrfrnModel, backward, forward
from .tensor import ShapeError, Tensor


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


def l1_loss(pred: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Mean absolute error over all elements and its (sub)gradient wrt pred.

    sign(0) counts as 0, so the gradient at ties is 0.
    """
    if pred.shape != target.shape:
        raise ShapeError("l1 operand shape", pred.shape, target.shape)
    diff = pred.data - target.data
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return loss, Tensor(grad.astype(pred.dtype))


def adam_step(layer: ConvLayer, config: AdamConfig, t: int) -> None:
    """One bias-corrected Adam update of a layer's weights and bias."""
    c1 = 1.0 - config.beta1**t
    c2 = 1.0 - config.beta2**t
    for theta, g, m, v in (
        (layer.weights, layer.grad_weights, layer.m_weights, layer.v_weights),
        (layer.bias, layer.grad_bias, layer.m_bias, layer.v_bias),
    ):
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * np.square(g)
        theta -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


class Adam:
    """Adam state for one model; ``t`` increments once per optimizer step."""

    def __init__(self, config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self.t = 0

    def step(self, model: SrfrnModel) -> None:
        self.t += 1
        for layer in model.layers():
            adam_step(layer, self.config, self.t)


class PlateauSchedule:
    """Multiply lr by ``factor`` after ``patience`` epochs without improvement.

    Improvement means the validation loss dropped below the running best by
    more than ``rel_threshold`` (relative). The lr never increases and never
    falls below ``min_lr``.
    """

    def __init__(
        self,
        lr: float = 1e-3,
        patience: int = 10,
        factor: float = 0.5,
        rel_threshold: float = 1e-4,
        min_lr: float = 1e-6,
    ):
        if not 0.0 < factor < 1.0:
            raise ValueError(f"factor must be in (0, 1), got {factor}")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.rel_threshold = rel_threshold
        self.min_lr = min_lr
        self.best_val = math.inf
        self.stale_count = 0

    def update(self, val_loss: float) -> float:
        """Record one epoch's validation loss; returns the (possibly reduced) lr."""
        if not math.isfinite(val_loss):
            raise DivergenceError(f"validation loss is {val_loss}")
        if val_loss < self.best_val * (1.0 - self.rel_threshold):
            self.best_val = val_loss
            self.stale_count = 0
        else:
            self.stale_count += 1
            if self.stale_count >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stale_count = 0
        return self.lr


def plateau_update(sched: PlateauSchedule, val_loss: float) -> float:
    return sched.update(val_loss)


def train_epoch(model: SrfrnModel, batches, optimizer: Adam, loss_log: list | None = None) -> float:
    """One pass over ``batches`` of (ilr, hr) tensors; returns the mean batch loss.

    Per batch: zero grads, forward, L1, backward, Adam step on every layer.
    ``loss_log`` (if given) receives every per-batch loss, for smoke checks.
    """
    total = 0.0
    count = 0
    for ilr, hr in batches:
        model.zero_grad()
        pred, tape = forward(model, ilr)
        loss, grad = l1_loss(pred, hr)
        if not math.isfinite(loss):
            raise DivergenceError(f"training loss is {loss}")
        backward(model, tape, grad)
        optimizer.step(model)
        total += loss
        count += 1
        if loss_log is not None:
            loss_log.append(loss)
    if count == 0:
        raise ValueError("train_epoch received no batches")
    return total / count


def evaluate_loss(model: SrfrnModel, batches) -> float:
    """Mean L1 over batches without touching gradients or optimizer state."""
    total = 0.0
    count = 0
    for ilr, hr in batches:
        pred, _ = forward(model, ilr)
        loss, _ = l1_loss(pred, hr)
        total += loss
        count += 1
    if count == 0:
        raise ValueError("evaluate_loss received no batches")
    return total / count


class TrainLog:
    """Append-only CSV: epoch, train_loss, val_loss, lr, wall_seconds."""

    FIELDS = ("epoch", "train_loss", "val_loss", "lr", "wall_seconds")

    def __init__(self, path, header_lines: list[str] | None = None):
        self.path = path
        self._start = time.perf_counter()
        with open(path, "w", newline="") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            csv.writer(fh).writerow(self.FIELDS)

    def append(self, epoch: int, train_loss: float, val_loss: float, lr: float) -> None:
        wall = time.perf_counter() - self._start
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, f"{train_loss:.8f}", f"{val_loss:.8f}", f"{lr:.8g}", f"{wall:.3f}"])
