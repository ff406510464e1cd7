"""SGD with momentum and the linear learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .tensor import Parameter


@dataclass(frozen=True)
class SgdConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    total_iters: int = 4000

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_iters <= 0:
            raise ValueError(f"total_iters must be positive, got {self.total_iters}")


def lr_schedule(iteration: int, cfg: SgdConfig) -> float:
    """``base_lr * (1 - iteration / total_iters)``; reaches 0 at the end of training."""
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    return cfg.base_lr * (1.0 - iteration / cfg.total_iters)


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9) -> None:
    """In place: ``buf = momentum * buf + grad``; ``value -= lr * buf``; grads zeroed."""
    for p in params:
        buf = p.momentum_buffer
        buf *= p.dtype.type(momentum)
        buf += p.grad
        p.data -= p.dtype.type(lr) * buf
        p.grad[...] = 0
