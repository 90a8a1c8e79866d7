"""Flat ``key=value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Command-line flags ``--key=value`` override the file and the environment
variable ``TETSNN_OUTPUT_DIR`` overrides ``output_dir`` from the file (a
flag still wins). Unset ``lambda`` and ``phi`` resolve from the dataset
and the threshold; the resolved config has no unset values and parses back
to the same object.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping

from .errors import ConfigError
from .lif import HEAVISIDE, SIGMOID, LifConfig
from .net import SNN_TINY
from .objective import ONEHOT_PHI, SDT, TET, TOTAL, UNIFORM_PHI, LossSpec
from .trainer import TrainConfig

OUTPUT_ENV = "TETSNN_OUTPUT_DIR"
DATASETS = ("synthetic", "cifar10", "events")
STATIC_LAMBDA = 0.05
EVENT_LAMBDA = 0.001

# config key -> attribute name where they differ
_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str = "synthetic"
    data_dir: str = ""
    class_subset: tuple | None = None
    synthetic_classes: int = 4
    synthetic_per_class: int = 60
    synthetic_channels: int = 1
    synthetic_size: int = 8
    synthetic_noise: float = 0.8
    synthetic_shift: int = 0
    synthetic_seed: int = 0
    event_size: int = 48
    test_fraction: float = 0.25
    split_seed: int = 0
    # model
    arch: str = SNN_TINY
    activation: str = HEAVISIDE
    k: float = 10.0
    tau: float = 0.5
    v_th: float = 1.0
    gamma_sg: float = 1.0
    detach_reset: bool = False
    # objective
    loss: str = TET
    lam: float | None = None
    phi: float | None = None
    mse_target: str = ONEHOT_PHI
    # training
    epochs: int = 10
    T: int = 4
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_schedule: str = "cosine_to_zero"
    seed: int = 0
    loss_switch_epoch: int | None = None
    augment: str = ""
    log_wall_time: bool = False
    # outputs and analysis
    output_dir: str = "runs/default"
    checkpoint: str = ""
    eval_T: int | None = None
    tit_T: int = 6
    tit_epochs: int | None = None
    tit_lr: float = 1e-4
    tit_scratch: bool = False
    resolution: int = 21
    span: float = 0.5
    directions_seed: int = 0
    landscape_samples: int = 128
    energy_samples: int = 16

    # -- derived views ---------------------------------------------------------

    def lif(self) -> LifConfig:
        return LifConfig(tau=self.tau, v_th=self.v_th, gamma_sg=self.gamma_sg, activation=self.activation,
                         k=self.k, detach_reset=self.detach_reset)

    def loss_spec(self) -> LossSpec:
        lam = self.lam if self.lam is not None else default_lambda(self.dataset)
        phi = self.phi if self.phi is not None else self.v_th
        kind = SDT if self.loss == SDT else TOTAL
        return LossSpec(kind=kind, lam=lam, phi=phi, mse_target=self.mse_target)

    def augment_ops(self) -> tuple:
        ops = []
        for item in filter(None, (s.strip() for s in self.augment.split(","))):
            name, _, arg = item.partition(":")
            ops.append((name, float(arg) if arg else 1.0))
        return tuple(ops)

    def train_config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig(epochs=self.epochs, T=self.T, batch_size=self.batch_size, loss=self.loss_spec(),
                          optimizer=self.optimizer, lr=self.lr, betas=(self.beta1, self.beta2),
                          adam_eps=self.adam_eps, momentum=self.momentum, weight_decay=self.weight_decay,
                          lr_schedule="cosine" if self.lr_schedule == "cosine_to_zero" else self.lr_schedule,
                          seed=self.seed, loss_switch_epoch=self.loss_switch_epoch, augment=self.augment_ops(),
                          detach_reset=self.detach_reset, gamma_sg=self.gamma_sg,
                          log_wall_time=self.log_wall_time)
        return replace(cfg, **overrides) if overrides else cfg

    def resolved(self) -> "RunConfig":
        """Copy with every default that depends on other fields filled in."""
        spec = self.loss_spec()
        return replace(self, lam=spec.lam, phi=spec.phi)


def default_lambda(dataset: str) -> float:
    return EVENT_LAMBDA if dataset == "events" else STATIC_LAMBDA


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_FIELDS = {f.name: f for f in fields(RunConfig)}
_KEYS = {v: k for k, v in _ALIASES.items()}


def key_of(name: str) -> str:
    return _KEYS.get(name, name)


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _parse_value(name: str, raw: str):
    ftype = str(_FIELDS[name].type)
    optional = "None" in ftype
    s = raw.strip()
    if optional and s.lower() in ("", "none"):
        return None
    try:
        if ftype.startswith("tuple"):
            return tuple(int(v) for v in s.split(",") if v.strip())
        if ftype.startswith("bool"):
            return _parse_bool(s)
        if ftype.startswith("int"):
            return int(s)
        if ftype.startswith("float"):
            return float(s)
    except ValueError:
        kind = ftype.split(" ")[0].split("|")[0]
        raise ConfigError(f"{key_of(name)}: expected {kind}, got {raw!r}") from None
    return s


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_pairs(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def build(pairs: Mapping[str, str], base: RunConfig | None = None) -> RunConfig:
    values = {}
    for key, raw in pairs.items():
        name = _ALIASES.get(key, key)
        if name not in _FIELDS or key in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[name] = _parse_value(name, raw)
    cfg = replace(base or RunConfig(), **values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.T < 1:
        raise ConfigError("T must be ≥ 1")
    if cfg.epochs < 1:
        raise ConfigError("epochs must be ≥ 1")
    if cfg.dataset not in DATASETS:
        raise ConfigError(f"dataset must be one of {', '.join(DATASETS)}, got {cfg.dataset!r}")
    if cfg.dataset != "synthetic" and not cfg.data_dir:
        raise ConfigError(f"missing required key 'data_dir' for dataset {cfg.dataset}")
    if cfg.loss not in (SDT, TET, TOTAL):
        raise ConfigError(f"loss must be SDT, TET or TOTAL, got {cfg.loss!r}")
    if cfg.activation not in (HEAVISIDE, SIGMOID):
        raise ConfigError(f"activation must be {HEAVISIDE} or {SIGMOID}, got {cfg.activation!r}")
    if cfg.mse_target not in (ONEHOT_PHI, UNIFORM_PHI):
        raise ConfigError(f"mse_target must be {ONEHOT_PHI} or {UNIFORM_PHI}")
    if cfg.lr_schedule not in ("cosine", "cosine_to_zero", "constant"):
        raise ConfigError(f"lr_schedule must be cosine_to_zero or constant, got {cfg.lr_schedule!r}")
    if cfg.lam is not None and not 0.0 <= cfg.lam <= 1.0:
        raise ConfigError("lambda must lie in [0, 1]")
    if cfg.eval_T is not None and cfg.eval_T < 1:
        raise ConfigError("eval_T must be ≥ 1")
    if cfg.resolution < 1 or cfg.resolution % 2 == 0:
        raise ConfigError("resolution must be a positive odd number")
    try:
        cfg.lif()
        cfg.train_config()
        cfg.augment_ops()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path=None, overrides: Mapping[str, str] | None = None,
                 environ: Mapping[str, str] | None = None) -> RunConfig:
    """File (optional) -> environment output dir -> flag overrides."""
    environ = os.environ if environ is None else environ
    pairs = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        pairs.update(parse_pairs(p.read_text(), str(p)))
    if environ.get(OUTPUT_ENV):
        pairs["output_dir"] = environ[OUTPUT_ENV]
    pairs.update(overrides or {})
    return build(pairs)


def dumps(cfg: RunConfig) -> str:
    lines = ["# resolved tetsnn run configuration"]
    for f in fields(RunConfig):
        lines.append(f"{key_of(f.name)}={_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> RunConfig:
    return build(parse_pairs(text))
