"""Self-check property suite run by ``tetsnn check``.

Each check returns a :class:`CheckResult`; ``run_all`` runs the whole
set, which takes about half a minute on one core.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from . import objective as obj
from .lif import SIGMOID, LifConfig
from .net import SNN_TINY, SpikingNet


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} (limit {self.threshold:g}, {self.seconds:.1f}s)"


def lemma_sweep(draws: int = 10_000, seed: int = 0, max_T: int = 8, max_classes: int = 10,
                std: float = 3.0) -> tuple[float, float]:
    """Worst ``L_TET - L_SDT`` over random draws, and worst |gap| for time-constant outputs.

    T and the class count are drawn per sample; samples sharing a shape are
    evaluated together.
    """
    rng = np.random.default_rng(seed)
    Ts = rng.integers(1, max_T + 1, size=draws)
    Ks = rng.integers(2, max_classes + 1, size=draws)
    worst, const_gap = np.inf, 0.0
    for T in range(1, max_T + 1):
        for K in range(2, max_classes + 1):
            n = int(np.sum((Ts == T) & (Ks == K)))
            if not n:
                continue
            O = rng.normal(0.0, std, size=(T, n, K))
            y = rng.integers(0, K, size=n)
            l_sdt, l_tet = obj.sample_losses(O, y)
            worst = min(worst, float(np.min(l_tet - l_sdt)))
            c_sdt, c_tet = obj.sample_losses(np.repeat(O[:1], T, axis=0), y)
            const_gap = max(const_gap, float(np.max(np.abs(c_tet - c_sdt))))
    return float(worst), float(const_gap)


def sigmoid_grad_error(k: float, T: int = 4, batch: int = 4, input_shape=(1, 8, 8), entries: int = 30,
                       eps: float = 1e-4, seed: int = 0) -> float:
    """Max relative tape-vs-central-difference error for SNN-tiny in sigmoid mode.

    The tape runs in float64. At k=20 some readout gradients are ~1e-10,
    below what float64 loss differences resolve, so the Richardson central
    differences are taken on an extended-precision copy of the network.
    """
    rng = np.random.default_rng(seed)
    lif = LifConfig(activation=SIGMOID, k=k)
    net = SpikingNet(SNN_TINY, input_shape, 3, lif=lif, seed=seed, T=T)
    ref = SpikingNet(SNN_TINY, input_shape, 3, lif=lif, seed=seed, T=T, dtype=np.longdouble)
    for p, q in zip(net.parameters(), ref.parameters()):
        q.data = p.data.astype(np.longdouble)
    x = rng.uniform(0.0, 1.0, size=(batch,) + tuple(input_shape))
    x_ref = x.astype(np.longdouble)
    y = rng.integers(0, 3, size=batch)
    spec = obj.LossSpec(obj.TOTAL, lam=0.05)

    def f():
        return obj.objective(net(x, training=True), y, spec)

    def f_ref():
        return obj.objective(ref(x_ref, training=True), y, spec)

    return nd.grad_check(f, net.parameters(), eps=eps, max_entries=entries, seed=seed, richardson=True,
                         reference=(f_ref, ref.parameters()))


def fold_gap(n_inputs: int = 100, seed: int = 0, input_shape=(1, 8, 8), T: int = 4) -> float:
    """Max |folded - unfolded| eval logit for a random SNN-tiny with non-trivial BN stats."""
    rng = np.random.default_rng(seed)
    net = SpikingNet(SNN_TINY, input_shape, 10, seed=seed, T=T)
    for bn in net.bn_layers():
        c = bn.channels
        bn.running_mean = rng.normal(0.0, 0.5, c)
        bn.running_var = rng.uniform(0.3, 3.0, c)
        bn.gamma.data = rng.uniform(0.5, 1.5, c)
        bn.beta.data = rng.normal(0.3, 0.3, c)
    x = rng.uniform(0.0, 1.0, size=(n_inputs,) + tuple(input_shape))
    return float(np.max(np.abs(net.fold()(x).data - net(x).data)))


def _timed(name, fn, ok, threshold):
    start = time.perf_counter()
    value = fn()
    return CheckResult(name, ok(value), value, threshold, time.perf_counter() - start)


def run_all(quick: bool = False) -> list[CheckResult]:
    """Lemma sweep, sigmoid-mode gradient check and BN-fold equivalence.

    ``quick`` trims the gradient check to one k and fewer sampled entries.
    """
    results = [
        _timed("lemma: L_TET >= L_SDT", lambda: lemma_sweep()[0], lambda v: v >= -obj.LEMMA_SLACK,
               -obj.LEMMA_SLACK),
        _timed("lemma: equality for constant outputs", lambda: lemma_sweep(seed=1)[1],
               lambda v: v <= 1e-12, 1e-12),
    ]
    for k in (10.0,) if quick else (1.0, 10.0, 20.0):
        results.append(_timed(f"sigmoid grad check k={k:g}",
                              lambda k=k: sigmoid_grad_error(k, entries=8 if quick else 30),
                              lambda v: v < 1e-4, 1e-4))
    results.append(_timed("BN fold equivalence", lambda: fold_gap(100), lambda v: v <= 1e-5, 1e-5))
    return results
