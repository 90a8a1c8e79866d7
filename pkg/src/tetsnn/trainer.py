"""Epoch loop, evaluation, time-step expansion, TIT and loss switching.

Metrics are emitted as one CSV row per (epoch, split) with columns
``epoch, split, loss_total, loss_tet, loss_sdt, loss_mse, acc_mean_output,
acc_per_t, wall_seconds``; ``acc_per_t`` is semicolon-joined.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import objective as obj
from .data import LabeledFrames, augment
from .errors import DivergenceError
from .lif import LifConfig
from .ndgrad import Tape
from .net import SpikingNet
from .objective import SDT, LossBreakdown, LossSpec
from .optim import SGD, Adam, cosine_lr

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "split", "loss_total", "loss_tet", "loss_sdt", "loss_mse",
                  "acc_mean_output", "acc_per_t", "wall_seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    T: int = 4
    batch_size: int = 32
    loss: LossSpec = field(default_factory=LossSpec)
    optimizer: str = "adam"
    lr: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_schedule: str = "cosine"
    seed: int = 0
    loss_switch_epoch: int | None = None
    augment: tuple = ()
    detach_reset: bool | None = None
    gamma_sg: float | None = None
    log_wall_time: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.loss_switch_epoch is not None and not 0 <= self.loss_switch_epoch < max(self.epochs, 1):
            raise ValueError("loss_switch_epoch must be in [0, epochs)")
        if self.gamma_sg is not None and not self.gamma_sg > 0:
            raise ValueError("gamma_sg must be > 0")

    def neuron(self, lif: LifConfig) -> LifConfig:
        """``lif`` with this config's surrogate width / reset overrides applied."""
        changes = {}
        if self.detach_reset is not None:
            changes["detach_reset"] = bool(self.detach_reset)
        if self.gamma_sg is not None:
            changes["gamma_sg"] = float(self.gamma_sg)
        return replace(lif, **changes) if changes else lif

    def loss_at(self, epoch: int) -> LossSpec:
        """Before the switch epoch the mean-output loss is optimized."""
        if self.loss_switch_epoch is not None and epoch < self.loss_switch_epoch:
            return replace(self.loss, kind=SDT)
        return self.loss

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return cosine_lr(self.lr, epoch, self.epochs)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    return SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


@dataclass
class EvalReport:
    mean_output_accuracy: float
    per_timestep_accuracy: list
    per_timestep_variance: float
    losses: LossBreakdown
    loss_sdt: float
    loss_tet: float
    loss_mse: float


@dataclass
class EpochMetrics:
    epoch: int
    loss: LossSpec
    lr: float
    batch_losses: list = field(default_factory=list)
    loss_total: float = 0.0
    loss_tet: float = 0.0
    loss_sdt: float = 0.0
    loss_mse: float = 0.0
    acc_mean_output: float = 0.0
    acc_per_t: list = field(default_factory=list)
    wall_seconds: float = 0.0


def accuracy_variance(acc: Sequence[float]) -> float:
    """Sample variance (n - 1 denominator) of per-step accuracies; 0 for one step."""
    acc = np.asarray(acc, dtype=float)
    return float(acc.var(ddof=1)) if acc.size > 1 else 0.0


def _accuracies(O: np.ndarray, y: np.ndarray) -> tuple[float, list]:
    mean_acc = float((O.mean(axis=0).argmax(axis=-1) == y).mean())
    per_t = (O.argmax(axis=-1) == y[None]).mean(axis=1)
    return mean_acc, [float(a) for a in per_t]


def _batch_input(data: LabeledFrames, idx, cfg: TrainConfig, epoch: int) -> np.ndarray:
    x = data.frames[idx]
    if cfg.augment:
        x = augment(x, cfg.augment, cfg.seed, epoch, idx)
    if x.ndim == 5:
        x = np.swapaxes(x, 0, 1)
        if x.shape[0] != cfg.T:
            raise ValueError(f"sequence data has {x.shape[0]} steps but T={cfg.T}")
    return x


def train_epoch(net: SpikingNet, data: LabeledFrames, cfg: TrainConfig, optimizer, epoch: int = 0,
                loss: LossSpec | None = None) -> EpochMetrics:
    """One pass over ``data``: forward over T steps, loss, backward, update.

    On a non-finite loss or gradient the epoch stops with the parameters and
    BN statistics of the last finite step and :class:`DivergenceError` is
    raised.
    """
    spec = loss or cfg.loss_at(epoch)
    params = net.parameters()
    m = EpochMetrics(epoch, spec, optimizer.lr)
    sums = np.zeros(4)
    acc_sum, acc_t_sum, n_seen = 0.0, np.zeros(cfg.T), 0
    start = time.perf_counter()
    for _, y, idx in data.batches(cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch):
        x = _batch_input(data, idx, cfg, epoch)
        bn_snapshot = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in net.bn_layers()]
        with Tape() as tape:
            O = net(x, T=cfg.T, training=True)
            L = obj.objective(O, y, spec)
        grads = tape.backward(L)
        glist = [grads[p] for p in params]
        if not np.isfinite(L.item()) or not all(np.all(np.isfinite(g)) for g in glist):
            for bn, (mu, var) in zip(net.bn_layers(), bn_snapshot):
                bn.running_mean, bn.running_var = mu, var
            raise DivergenceError(f"non-finite loss or gradient at epoch {epoch}, batch {len(m.batch_losses)}")
        optimizer.step(glist)

        o = O.data
        b = len(y)
        sums += b * np.array([L.item(), obj.loss_tet(o, y), obj.loss_sdt(o, y),
                              obj.loss_mse(o, y, spec.phi, spec.mse_target)])
        a, at = _accuracies(o, y)
        acc_sum += a * b
        acc_t_sum += np.asarray(at) * b
        n_seen += b
        m.batch_losses.append(L.item())
    m.wall_seconds = time.perf_counter() - start
    if n_seen:
        m.loss_total, m.loss_tet, m.loss_sdt, m.loss_mse = (sums / n_seen).tolist()
        m.acc_mean_output = acc_sum / n_seen
        m.acc_per_t = (acc_t_sum / n_seen).tolist()
    return m


def outputs(net: SpikingNet, data: LabeledFrames, T: int | None = None, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for the whole dataset, (T, N, K)."""
    T = net.T if T is None else T
    chunks = []
    for x, _, _ in data.batches(batch_size):
        chunks.append(net(x, T=T, training=False).data)
    return np.concatenate(chunks, axis=1)


def evaluate(net: SpikingNet, data: LabeledFrames, T: int | None = None,
             loss: LossSpec | None = None, batch_size: int = 256) -> EvalReport:
    """Accuracy of argmax(O_mean), per-step accuracy of argmax(O(t)), and losses."""
    spec = loss or LossSpec()
    O = outputs(net, data, T, batch_size)
    y = data.labels
    mean_acc, per_t = _accuracies(O, y)
    return EvalReport(mean_acc, per_t, accuracy_variance(per_t), obj.breakdown(O, y, spec),
                      obj.loss_sdt(O, y), obj.loss_tet(O, y), obj.loss_mse(O, y, spec.phi, spec.mse_target))


def expand_T(net: SpikingNet, new_T: int) -> SpikingNet:
    """Same weights and BN statistics, unrolled for ``new_T`` steps."""
    if new_T < 1:
        raise ValueError("new_T must be >= 1")
    out = net.copy()
    out.T = int(new_T)
    return out


# ---------------------------------------------------------------------------
# metrics output
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metric_row(epoch: int, split: str, losses: dict, acc_mean: float, acc_per_t: Sequence[float],
               wall: float | None) -> dict:
    return {
        "epoch": epoch,
        "split": split,
        "loss_total": losses["total"],
        "loss_tet": losses["tet"],
        "loss_sdt": losses["sdt"],
        "loss_mse": losses["mse"],
        "acc_mean_output": acc_mean,
        "acc_per_t": ";".join(repr(float(a)) for a in acc_per_t),
        "wall_seconds": "" if wall is None else wall,
    }


def write_metrics(rows: Sequence[dict], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in METRIC_COLUMNS})


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    write_metrics(rows, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    rows: list
    epochs: list
    final: EvalReport | None
    timing: list


def fit(net: SpikingNet, train: LabeledFrames, test: LabeledFrames | None, cfg: TrainConfig,
        on_epoch: Callable | None = None, eval_every: int = 1) -> FitResult:
    """Train for ``cfg.epochs`` epochs, evaluating on ``test`` after each one.

    Honors ``cfg.loss_switch_epoch``: epochs before it optimize the
    mean-output loss, later ones ``cfg.loss``. Both test losses are logged
    every epoch either way. Sets ``net.T = cfg.T`` and applies the config's
    neuron overrides to ``net.lif``.
    """
    net.T = cfg.T
    net.lif = cfg.neuron(net.lif)
    opt = make_optimizer(net.parameters(), cfg)
    rows, epochs, timing = [], [], []
    final = None
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        m = train_epoch(net, train, cfg, opt, epoch)
        epochs.append(m)
        timing.append({"epoch": epoch, "T": cfg.T, "wall_seconds": m.wall_seconds})
        wall = m.wall_seconds if cfg.log_wall_time else None
        rows.append(metric_row(epoch, "train", {"total": m.loss_total, "tet": m.loss_tet,
                                                "sdt": m.loss_sdt, "mse": m.loss_mse},
                               m.acc_mean_output, m.acc_per_t, wall))
        last = epoch == cfg.epochs - 1
        if test is not None and (last or (epoch + 1) % eval_every == 0):
            rep = evaluate(net, test, cfg.T, m.loss)
            final = rep
            rows.append(metric_row(epoch, "test", {"total": rep.losses.total, "tet": rep.loss_tet,
                                                   "sdt": rep.loss_sdt, "mse": rep.loss_mse},
                                   rep.mean_output_accuracy, rep.per_timestep_accuracy, None))
        log.debug("epoch %d loss %.4f", epoch, m.loss_total)
        if on_epoch is not None:
            on_epoch(epoch, net, m, final)
    return FitResult(rows, epochs, final, timing)


def loss_switch(net: SpikingNet, train, test, cfg: TrainConfig) -> FitResult:
    """Mean-output loss until ``cfg.loss_switch_epoch``, then ``cfg.loss``."""
    if cfg.loss_switch_epoch is None:
        raise ValueError("loss_switch needs loss_switch_epoch")
    return fit(net, train, test, cfg)


@dataclass
class TitLedger:
    entries: list = field(default_factory=list)

    def add(self, phase: str, epoch: int, T: int, seconds: float):
        self.entries.append({"phase": phase, "epoch": epoch, "T": T, "wall_seconds": seconds})

    def seconds(self, phase: str | None = None) -> float:
        return float(sum(e["wall_seconds"] for e in self.entries if phase is None or e["phase"] == phase))

    def step_epochs(self, phase: str | None = None) -> int:
        """Cost in units of one T=1 epoch: sum over epochs of T."""
        return int(sum(e["T"] for e in self.entries if phase is None or e["phase"] == phase))

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=("phase", "epoch", "T", "wall_seconds"), lineterminator="\n")
        w.writeheader()
        for e in self.entries:
            w.writerow({k: _fmt(v) for k, v in e.items()})
        return buf.getvalue()


def tit_cost_ratio(T0: int, epochs0: int, T: int, finetune_epochs: int, scratch_epochs: int) -> float:
    """Time-inheritance cost over from-scratch cost, assuming epoch time proportional to T."""
    return (T0 * epochs0 + T * finetune_epochs) / (T * scratch_epochs)


def scaled_finetune_epochs(desk_epochs: int, full_epochs: int = 300, full_finetune: int = 50) -> int:
    """Fine-tune budget keeping the 50-per-300 proportion of the full-scale recipe."""
    return max(1, round(full_finetune * desk_epochs / full_epochs))


def tit_run(net: SpikingNet, train, test, cfg_initial: TrainConfig, cfg_finetune: TrainConfig):
    """Train at a short T, expand to the target T, then briefly fine-tune.

    Returns ``(net, ledger, initial_result, finetune_result)``. A fine-tune
    budget of 0 epochs reduces to :func:`expand_T`.
    """
    if cfg_finetune.T <= cfg_initial.T:
        raise ValueError("fine-tune T must exceed the initial T")
    ledger = TitLedger()
    first = fit(net, train, test, cfg_initial)
    for t in first.timing:
        ledger.add("initial", t["epoch"], t["T"], t["wall_seconds"])
    net = expand_T(net, cfg_finetune.T)
    second = None
    if cfg_finetune.epochs > 0:
        second = fit(net, train, test, cfg_finetune)
        for t in second.timing:
            ledger.add("finetune", t["epoch"], t["T"], t["wall_seconds"])
    return net, ledger, first, second


def lambda_sweep(make_net: Callable[[], SpikingNet], train, test, cfg: TrainConfig,
                 lambdas: Sequence[float]) -> list[tuple[float, EvalReport]]:
    """Train one fresh network per regularizer weight; same seed for all."""
    results = []
    for lam in lambdas:
        run_cfg = replace(cfg, loss=replace(cfg.loss, kind=obj.TOTAL, lam=float(lam)))
        res = fit(make_net(), train, test, run_cfg)
        results.append((float(lam), res.final))
    return results
