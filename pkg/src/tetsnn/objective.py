"""Training objectives over per-step logits O with shape (T, K) or (T, B, K).

``loss_*`` functions take plain arrays and return floats; they are the
reference path. ``sdt``/``tet``/``mse``/``objective`` build the same
quantities on the tape for training. Batched losses are averaged over the
batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp, softmax

from . import ndgrad as nd
from .ndgrad import Tensor

SDT = "SDT"
TET = "TET"
TOTAL = "TOTAL"
ONEHOT_PHI = "onehot_phi"
UNIFORM_PHI = "uniform_phi"

LEMMA_SLACK = 1e-9


@dataclass(frozen=True)
class LossSpec:
    kind: str = TOTAL
    lam: float = 0.05
    phi: float = 1.0
    mse_target: str = ONEHOT_PHI

    def __post_init__(self):
        if self.kind not in (SDT, TET, TOTAL):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.mse_target not in (ONEHOT_PHI, UNIFORM_PHI):
            raise ValueError(f"unknown mse_target {self.mse_target!r}")


@dataclass
class LossBreakdown:
    total: float
    ce_term: float
    mse_term: float
    per_timestep_ce: list = field(default_factory=list)


def _batched(O, y):
    O = np.asarray(O.data if isinstance(O, Tensor) else O, dtype=float)
    y = np.asarray(y)
    if O.ndim == 2:
        O = O[:, None, :]
        y = y.reshape(1)
    if O.ndim != 3 or O.shape[0] < 1:
        raise ValueError(f"logits must be (T, K) or (T, B, K) with T >= 1, got {O.shape}")
    y = y.astype(np.int64).reshape(-1)
    if y.shape[0] != O.shape[1]:
        raise ValueError(f"{y.shape[0]} labels for batch of {O.shape[1]}")
    k = O.shape[2]
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"class index out of range [0, {k})")
    return O, y


def _ce_rows(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cross-entropy per row of z (..., B, K)."""
    picked = np.take_along_axis(z, y.reshape((1,) * (z.ndim - 2) + (-1, 1)), axis=-1)[..., 0]
    return logsumexp(z, axis=-1) - picked


def target_vector(y: np.ndarray, k: int, phi: float, mode: str = ONEHOT_PHI) -> np.ndarray:
    if mode == UNIFORM_PHI:
        return np.full((len(y), k), phi)
    t = np.zeros((len(y), k))
    t[np.arange(len(y)), y] = phi
    return t


def loss_sdt(O, y) -> float:
    O, y = _batched(O, y)
    return float(_ce_rows(O.mean(axis=0), y).mean())


def per_timestep_ce(O, y) -> np.ndarray:
    O, y = _batched(O, y)
    return _ce_rows(O, y).mean(axis=1)


def loss_tet(O, y) -> float:
    return float(per_timestep_ce(O, y).mean())


def sample_losses(O, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``(L_SDT, L_TET)``, each of shape (B,), without the batch mean."""
    O, y = _batched(O, y)
    return _ce_rows(O.mean(axis=0), y), _ce_rows(O, y).mean(axis=0)


def loss_mse(O, y, phi: float = 1.0, mse_target: str = ONEHOT_PHI) -> float:
    O, y = _batched(O, y)
    target = target_vector(y, O.shape[2], phi, mse_target)
    return float(((O - target[None]) ** 2).mean())


def loss_total(O, y, spec: LossSpec) -> LossBreakdown:
    per_t = per_timestep_ce(O, y)
    ce = float(per_t.mean())
    reg = loss_mse(O, y, spec.phi, spec.mse_target)
    return LossBreakdown((1.0 - spec.lam) * ce + spec.lam * reg, ce, reg, per_t.tolist())


def breakdown(O, y, spec: LossSpec) -> LossBreakdown:
    """Value of the training objective selected by ``spec.kind`` with its parts."""
    if spec.kind == TOTAL:
        return loss_total(O, y, spec)
    per_t = per_timestep_ce(O, y)
    reg = loss_mse(O, y, spec.phi, spec.mse_target)
    ce = loss_sdt(O, y) if spec.kind == SDT else float(per_t.mean())
    return LossBreakdown(ce, ce, reg, per_t.tolist())


def analytic_grads(O, y, which: str) -> np.ndarray:
    """dL/dO(t) in closed form, shaped like ``O``.

    SDT: (1/T)(softmax(O_mean) - onehot), identical for all t.
    TET: (1/T)(softmax(O(t)) - onehot).
    For batched input the batch mean contributes a further 1/B.
    """
    single = np.asarray(O.data if isinstance(O, Tensor) else O).ndim == 2
    O, y = _batched(O, y)
    T, B, K = O.shape
    onehot = np.zeros((B, K))
    onehot[np.arange(B), y] = 1.0
    if which == SDT:
        sig = np.broadcast_to(softmax(O.mean(axis=0), axis=-1) - onehot, O.shape) / T
    elif which == TET:
        sig = (softmax(O, axis=-1) - onehot[None]) / T
    else:
        raise ValueError(f"which must be SDT or TET, got {which!r}")
    sig = sig / B
    return sig[:, 0, :].copy() if single else np.array(sig)


class Lemma1Result(NamedTuple):
    l_sdt: float
    l_tet: float
    holds: bool


def lemma1_check(O, y) -> Lemma1Result:
    """Check that the per-step loss upper-bounds the mean-output loss."""
    l_sdt, l_tet = loss_sdt(O, y), loss_tet(O, y)
    return Lemma1Result(l_sdt, l_tet, bool(l_tet >= l_sdt - LEMMA_SLACK))


# ---------------------------------------------------------------------------
# tape versions
# ---------------------------------------------------------------------------

def sdt(O: Tensor, y) -> Tensor:
    return nd.softmax_cross_entropy(nd.mean(O, axis=0), y)


def tet(O: Tensor, y) -> Tensor:
    T, B, K = O.shape
    labels = np.tile(np.asarray(y).reshape(-1), T)
    return nd.softmax_cross_entropy(nd.reshape(O, (T * B, K)), labels)


def mse(O: Tensor, y, phi: float = 1.0, mse_target: str = ONEHOT_PHI) -> Tensor:
    target = target_vector(np.asarray(y).reshape(-1), O.shape[2], phi, mse_target)
    return nd.mean(nd.square(nd.sub(O, target[None])))


def objective(O: Tensor, y, spec: LossSpec) -> Tensor:
    """Tape node for the loss selected by ``spec.kind``; O is (T, B, K)."""
    if O.ndim == 2:
        O = nd.reshape(O, (O.shape[0], 1, O.shape[1]))
    if spec.kind == SDT:
        return sdt(O, y)
    if spec.kind == TET or spec.lam == 0.0:
        return tet(O, y)
    return nd.add(nd.scale(tet(O, y), 1.0 - spec.lam),
                  nd.scale(mse(O, y, spec.phi, spec.mse_target), spec.lam))
