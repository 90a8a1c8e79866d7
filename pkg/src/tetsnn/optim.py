"""Adam and SGD-with-momentum updates, plus the cosine-to-zero schedule.

Weight decay is the classic coupled form: ``g <- g + wd * w`` before the
update.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ndgrad import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


@dataclass
class SgdState:
    velocity: list = field(default_factory=list)


def _check_lr(lr):
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    _check_lr(lr)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"state shape {m.shape} does not match parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: SgdState, lr: float,
                      momentum: float = 0.9, weight_decay: float = 0.0) -> SgdState:
    _check_lr(lr)
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for p, g, buf in zip(params, grads, state.velocity):
        if buf.shape != p.shape:
            raise ValueError(f"state shape {buf.shape} does not match parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        buf *= momentum
        buf += g
        p.data -= lr * buf
    return state


class Adam:
    def __init__(self, params, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        _check_lr(lr)
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = AdamState()

    def step(self, grads):
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)


class SGD:
    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=0.0):
        _check_lr(lr)
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.state = SgdState()

    def step(self, grads):
        sgd_momentum_step(self.params, grads, self.state, self.lr, self.momentum, self.weight_decay)


def cosine_lr(base_lr: float, epoch: int, epochs: int) -> float:
    """Per-epoch cosine decay from ``base_lr`` (epoch 0) towards 0 (epoch ``epochs``)."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / epochs))
