"""Round-robin training of the shared supernet weights."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .evolution import EvolutionConfig, Population
from .supernet import Supernet, forward

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        return lr_max
    step = min(max(step, 0), total)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class OptimizerState:
    """SGD with momentum and weight decay on a single cosine anneal."""

    lr_max: float = 0.025
    lr_min: float = 0.001
    total_steps: int = 1
    momentum: float = 0.9
    weight_decay: float = 3e-4
    step: int = 0
    buffers: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.lr_max < self.lr_min or self.lr_min < 0:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @property
    def lr(self) -> float:
        return cosine_lr(self.step, self.total_steps, self.lr_max, self.lr_min)

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.total_steps, self.lr_max, self.lr_min)


@dataclass
class TrainPlan:
    batches_per_generation: int
    batch_size: int = 32
    loss: str = "cross_entropy"
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.batches_per_generation < 0:
            raise ValueError("batches_per_generation must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


def _clip(params: list[Tensor], max_norm: float) -> None:
    norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / (norm + 1e-6)


def sgd_step(opt: OptimizerState, params: list[Tensor], grad_clip: Optional[float] = None) -> float:
    """One update at the current lr; advances the schedule and zeroes gradients.

    Returns the learning rate that was applied.
    """
    for i, p in enumerate(params):
        if p.grad is None:
            raise TrainingError(f"parameter {i} with shape {p.shape} has no gradient")
    if grad_clip is not None:
        _clip(params, grad_clip)
    lr = opt.lr
    for p in params:
        d = p.grad + opt.weight_decay * p.data if opt.weight_decay else p.grad
        v = opt.buffers.get(id(p))
        if v is None:
            v = opt.buffers[id(p)] = np.array(d, dtype=p.data.dtype)
        else:
            v *= opt.momentum
            v += d
        p.data -= (lr * v).astype(p.data.dtype, copy=False)
        p.grad = None
    opt.step += 1
    return lr


class TrainingLog:
    """Writes one CSV row per training step; a no-op when ``path`` is None."""

    columns = ("step", "generation", "individual_index", "loss", "lr")

    def __init__(self, path=None):
        self.rows: list[tuple] = []
        self._fh = open(path, "w", newline="") if path is not None else None
        self._writer = csv.writer(self._fh) if self._fh else None
        if self._writer:
            self._writer.writerow(self.columns)

    def record(self, step, generation, individual, loss, lr) -> None:
        row = (step, generation, individual, f"{loss:.8g}", f"{lr:.10g}")
        self.rows.append(row)
        if self._writer:
            self._writer.writerow(row)

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def train_generation(
    net: Supernet,
    pop: Population,
    plan: TrainPlan,
    opt: OptimizerState,
    data: Iterator[tuple[np.ndarray, np.ndarray]],
    cfg: EvolutionConfig,
    generation: int = 0,
    log: Optional[TrainingLog] = None,
) -> list[float]:
    """Train on ``plan.batches_per_generation`` batches, cycling through individuals.

    Batch ``i`` uses individual ``i % N``. Returns the per-batch losses.
    """
    n = len(pop)
    b = plan.batches_per_generation
    if b and b % n:
        logger.warning("B=%d is not a multiple of N=%d; the lowest-index individuals get an extra batch", b, n)
    params = net.parameters()
    losses = []
    for i in range(b):
        try:
            images, labels = next(data)
        except StopIteration:
            raise TrainingError(f"training stream exhausted after {i} of {b} batches") from None
        idx = i % n
        arch = cfg.params_for(pop[idx].alpha, training=True, topology=net.topology, ops=net.ops)
        logits = forward(net, images, arch)
        loss = ag.cross_entropy(logits, labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at batch {i} (generation {generation}, individual {idx})")
        ag.backward(loss)
        lr = sgd_step(opt, params, plan.grad_clip)
        losses.append(value)
        if log is not None:
            log.record(opt.step - 1, generation, idx, value, lr)
    return losses


__all__ = [
    "TrainingError",
    "cosine_lr",
    "OptimizerState",
    "TrainPlan",
    "sgd_step",
    "TrainingLog",
    "train_generation",
]
