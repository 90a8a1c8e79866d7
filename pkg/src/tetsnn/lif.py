"""Iterative leaky integrate-and-fire neurons.

One step is::

    u_pre  = tau * u + I
    a      = spike(u_pre - v_th)
    u_next = u_pre * (1 - a)          # hard reset

The spike function is either a Heaviside step whose backward pass uses a
triangular surrogate, or a smooth sigmoid ``sigma(k * x)`` differentiated
exactly (useful for gradient checks and the smooth-activation control).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import ndgrad as nd
from .errors import NonFiniteError
from .ndgrad import Tensor

HEAVISIDE = "heaviside"
SIGMOID = "sigmoid"


@dataclass(frozen=True)
class LifConfig:
    tau: float = 0.5
    v_th: float = 1.0
    gamma_sg: float = 1.0
    activation: str = HEAVISIDE
    k: float = 10.0
    detach_reset: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.v_th <= 0:
            raise ValueError(f"v_th must be > 0, got {self.v_th}")
        if self.gamma_sg <= 0:
            raise ValueError(f"gamma_sg must be > 0, got {self.gamma_sg}")
        if self.activation not in (HEAVISIDE, SIGMOID):
            raise ValueError(f"unknown activation mode {self.activation!r}")
        if self.activation == SIGMOID and self.k <= 0:
            raise ValueError(f"sigmoid sharpness k must be > 0, got {self.k}")


class NeuronState(NamedTuple):
    u: Tensor
    a: Tensor


def surrogate_grad(u_pre, cfg: LifConfig) -> np.ndarray:
    """Triangle of half-width gamma centred on the threshold, unit area."""
    g = cfg.gamma_sg
    u_pre = np.asarray(u_pre.data if isinstance(u_pre, Tensor) else u_pre, dtype=float)
    return np.maximum(0.0, g - np.abs(u_pre - cfg.v_th)) / (g * g)


def sigmoid_activation(u_pre, k: float, v_th: float = 1.0) -> np.ndarray:
    x = k * (np.asarray(u_pre.data if isinstance(u_pre, Tensor) else u_pre, dtype=float) - v_th)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def spike(u_pre: Tensor, cfg: LifConfig) -> Tensor:
    if cfg.activation == SIGMOID:
        k, v_th = cfg.k, cfg.v_th
        return nd.custom(lambda u: sigmoid_activation(u, k, v_th),
                         lambda g, a, u: (g * k * a * (1.0 - a),),
                         u_pre, op="sigmoid_spike")
    return nd.custom(lambda u: (u >= cfg.v_th).astype(u.dtype),
                     lambda g, a, u: (g * surrogate_grad(u, cfg),),
                     u_pre, op="heaviside_spike")


def lif_step(state: NeuronState | None, I, cfg: LifConfig) -> NeuronState:
    I = nd.as_tensor(I)
    if not np.all(np.isfinite(I.data)):
        raise NonFiniteError("non-finite input current")
    if state is None:
        u_pre = I
    else:
        if state.u.shape != I.shape:
            raise nd.ShapeError(f"membrane {state.u.shape} does not match input {I.shape}")
        u_pre = nd.add(nd.scale(state.u, cfg.tau), I)
    a = spike(u_pre, cfg)
    gate = a.detach() if cfg.detach_reset else a
    u_next = nd.mul(u_pre, nd.sub(1.0, gate))
    return NeuronState(u_next, a)


def run_lif(currents: Tensor, cfg: LifConfig) -> Tensor:
    """Drive a population with currents shaped (T, ...); returns spikes (T, ...).

    Starts from u(0) = 0.
    """
    state = None
    spikes = []
    for t in range(currents.shape[0]):
        state = lif_step(state, nd.take(currents, t), cfg)
        spikes.append(state.a)
    return nd.stack(spikes)


class Readout(NamedTuple):
    O: Tensor
    O_mean: Tensor


def readout_accumulate(currents: Sequence | Tensor) -> Readout:
    """Output layer: keep each step's input as-is, no leak or firing."""
    if isinstance(currents, Tensor):
        O = currents
    else:
        if len(currents) == 0:
            raise ValueError("readout needs at least one timestep")
        O = nd.stack(currents)
    if O.shape[0] == 0:
        raise ValueError("readout needs at least one timestep")
    return Readout(O, nd.mean(O, axis=0))
