"""SGD with momentum and weight decay, plus the step learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be nonnegative")


class SGD:
    """``v <- momentum*v + (grad + wd*param); param <- param - lr*v``.

    A parameter whose ``grad`` is ``None`` is treated as having zero gradient.
    """

    def __init__(self, params: Sequence[Tensor], lr=0.1, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.state = OptimizerState(lr, momentum, weight_decay)

    @property
    def lr(self):
        return self.state.learning_rate

    @lr.setter
    def lr(self, value):
        self.state.learning_rate = float(value)

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self):
        sgd_step(self.params, self.state)


def sgd_step(params: Sequence[Tensor], state: OptimizerState):
    dt = params[0].data.dtype.type if params else np.float32
    lr = dt(state.learning_rate)
    mom = dt(state.momentum)
    wd = dt(state.weight_decay)
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        d = g + wd * p.data if state.weight_decay else g
        buf = state.buffers.get(i)
        if buf is None:
            # v0 = 0 so the first step is v = d
            buf = np.array(d, dtype=p.data.dtype, copy=True)
        else:
            buf = mom * buf + d
        state.buffers[i] = buf
        p.data = (p.data - lr * buf).astype(p.data.dtype, copy=False)


def step_lr(epoch: int, base_lr: float, milestones: Sequence[int] = (), factor: float = 0.1) -> float:
    milestones = list(milestones)
    if any(b <= a for a, b in zip(milestones, milestones[1:])):
        raise ConfigError("milestones must be strictly increasing")
    passed = sum(1 for m in milestones if m <= epoch)
    return base_lr * factor**passed
