"""SGD with momentum, weight decay, and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ScheduleExhaustedError


@dataclass(frozen=True)
class SgdConfig:
    lr0: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")


def cosine_lr(config: SgdConfig, t: int) -> float:
    """lr at step t: lr0 * (1 + cos(pi * t / total_steps)) / 2, non-increasing on [0, total_steps]."""
    if not 0 <= t <= config.total_steps:
        raise ScheduleExhaustedError(f"step {t} outside schedule of {config.total_steps} steps")
    return config.lr0 * 0.5 * (1.0 + math.cos(math.pi * t / config.total_steps))


def sgd_step(params, state, config: SgdConfig, t: int):
    """One momentum-SGD update, in place.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr(t) * v

    ``params`` maps names to tensors carrying ``.grad``; ``state`` maps the
    same names to velocity buffers and is created lazily.
    """
    if t >= config.total_steps:
        raise ScheduleExhaustedError(f"step {t} >= total_steps {config.total_steps}")
    lr = cosine_lr(config, t)
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = config.momentum * v + grad + config.weight_decay * p.data
        state[name] = v
        p.data -= lr * v


class Sgd:
    """Stateful wrapper tracking the step counter and velocity buffers."""

    def __init__(self, params, config: SgdConfig):
        self.params = dict(params)
        self.config = config
        self.state = {}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        sgd_step(self.params, self.state, self.config, self.t)
        self.t += 1

    @property
    def lr(self):
        return cosine_lr(self.config, min(self.t, self.config.total_steps))
