"""SGD with momentum and cosine learning-rate annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OptimizerError, ScheduleError

DEFAULT_LR = 3e-3
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 0.0


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float = DEFAULT_LR
    total_steps: int = 1
    eta_min: float = 0.0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 <= self.eta_min <= self.base_lr:
            raise ConfigError(f"eta_min must lie in [0, base_lr], got {self.eta_min}")


def lr_at(schedule: CosineSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ScheduleError(f"step {step} outside [0, {schedule.total_steps}]")
    cos = math.cos(math.pi * step / schedule.total_steps)
    return schedule.eta_min + (schedule.base_lr - schedule.eta_min) * (1 + cos) / 2


@dataclass
class SgdState:
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(params: dict, grads: dict, state: SgdState, lr: float) -> tuple[dict, SgdState]:
    """One step of ``buf = m * buf + g (+ wd * p); p -= lr * buf``.

    Returns fresh dicts; inputs are left untouched. A missing buffer starts at zero.
    """
    if params.keys() != grads.keys():
        missing = sorted(set(params) ^ set(grads))
        raise OptimizerError(f"parameter/gradient names disagree: {missing}")
    new_params, new_bufs = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise OptimizerError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
        elif buf.shape != p.shape:
            raise OptimizerError(f"{name}: momentum buffer {buf.shape} vs parameter {p.shape}")
        d = g + state.weight_decay * p if state.weight_decay else g
        buf = state.momentum * buf + d
        new_bufs[name] = buf
        new_params[name] = p - lr * buf
    return new_params, SgdState(state.momentum, state.weight_decay, new_bufs)
