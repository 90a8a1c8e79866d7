"""``tetsnn`` command line: train / evaluate / tit / landscape / energy / check.

Usage::

    tetsnn <command> [--config FILE] [--key=value ...]

Every config key is also a flag. Exit codes: 0 ok, 1 unexpected error,
2 configuration error, 3 data error, 4 divergence, 5 property-suite failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, checks
from . import config as cfgmod
from .config import RunConfig
from .data import LabeledFrames, load_cifar10, load_event_fixture, split, synthetic_patterns
from .errors import ConfigError, DataError, DivergenceError
from .net import SpikingNet, load_checkpoint, save_checkpoint
from .trainer import EvalReport, evaluate, expand_T, fit, metrics_csv, scaled_finetune_epochs, tit_run

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3, 4, 5
COMMANDS = ("train", "evaluate", "tit", "landscape", "energy", "check")
EVAL_COLUMNS = ("T", "acc_mean_output", "acc_per_t", "per_timestep_variance",
                "loss_total", "loss_tet", "loss_sdt", "loss_mse")

log = logging.getLogger("tetsnn")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def load_data(cfg: RunConfig) -> tuple[LabeledFrames, LabeledFrames]:
    if cfg.dataset == "cifar10":
        return load_cifar10(cfg.data_dir, cfg.class_subset)
    if cfg.dataset == "events":
        data = load_event_fixture(cfg.data_dir, cfg.T, (cfg.event_size, cfg.event_size))
    else:
        size = (cfg.synthetic_channels, cfg.synthetic_size, cfg.synthetic_size)
        data = synthetic_patterns(cfg.synthetic_classes, cfg.synthetic_per_class, size, cfg.synthetic_noise,
                                  cfg.synthetic_seed, cfg.synthetic_shift)
    if cfg.class_subset is not None:
        keep = np.isin(data.labels, cfg.class_subset)
        remap = {c: i for i, c in enumerate(cfg.class_subset)}
        data = LabeledFrames(data.frames[keep], [remap[int(l)] for l in data.labels[keep]], len(cfg.class_subset))
    return split(data, cfg.test_fraction, cfg.split_seed)


def build_net(cfg: RunConfig, data: LabeledFrames) -> SpikingNet:
    shape = data.sample_shape[-3:]
    return SpikingNet(cfg.arch, shape, data.num_classes, lif=cfg.lif(), seed=cfg.seed, T=cfg.T)


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.output_dir) / "model.ckpt"


def _load_model(cfg: RunConfig) -> SpikingNet:
    path = _checkpoint_path(cfg)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found (run 'tetsnn train' first or set checkpoint=)")
    return load_checkpoint(path)


def eval_csv(reports: list[tuple[int, EvalReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for T, r in reports:
        w.writerow([T, repr(r.mean_output_accuracy), ";".join(repr(a) for a in r.per_timestep_accuracy),
                    repr(r.per_timestep_variance), repr(r.losses.total), repr(r.loss_tet), repr(r.loss_sdt),
                    repr(r.loss_mse)])
    return buf.getvalue()


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    log.info("wrote %s", path)
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    out = _out(cfg)
    train, test = load_data(cfg)
    net = build_net(cfg, train)
    res = fit(net, train, test, cfg.train_config())
    _write(out / "metrics.csv", metrics_csv(res.rows))
    save_checkpoint(net, out / "model.ckpt")
    if res.final is not None:
        print(f"final test accuracy {res.final.mean_output_accuracy:.4f} at T={cfg.T}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    out = _out(cfg)
    _, test = load_data(cfg)
    net = _load_model(cfg)
    T = cfg.eval_T or net.T
    rep = evaluate(expand_T(net, T), test, T, cfg.loss_spec())
    _write(out / "eval.csv", eval_csv([(T, rep)]))
    print(f"accuracy {rep.mean_output_accuracy:.4f} at T={T}; per-step variance {rep.per_timestep_variance:.3g}")
    return EXIT_OK


def cmd_tit(cfg: RunConfig) -> int:
    out = _out(cfg)
    train, test = load_data(cfg)
    if cfg.tit_T <= cfg.T:
        raise ConfigError("tit_T must exceed T")
    ft_epochs = cfg.tit_epochs if cfg.tit_epochs is not None else scaled_finetune_epochs(cfg.epochs)
    first = cfg.train_config()
    second = cfg.train_config(epochs=ft_epochs, T=cfg.tit_T, lr=cfg.tit_lr, loss_switch_epoch=None)
    net, ledger, _, ft = tit_run(build_net(cfg, train), train, test, first, second)
    save_checkpoint(net, out / "model.ckpt")
    if cfg.tit_scratch:
        scratch = fit(build_net(cfg, train), train, None, cfg.train_config(T=cfg.tit_T))
        for t in scratch.timing:
            ledger.add("scratch", t["epoch"], t["T"], t["wall_seconds"])
        tit_s, scratch_s = ledger.seconds("initial") + ledger.seconds("finetune"), ledger.seconds("scratch")
        print(f"time-inheritance {tit_s:.2f}s vs from scratch {scratch_s:.2f}s (ratio {tit_s / scratch_s:.3f})")
    _write(out / "tit_ledger.csv", ledger.csv())
    final = ft.final if ft is not None else evaluate(net, test, cfg.tit_T, cfg.loss_spec())
    print(f"final test accuracy {final.mean_output_accuracy:.4f} at T={cfg.tit_T}")
    return EXIT_OK


def cmd_landscape(cfg: RunConfig) -> int:
    out = _out(cfg)
    _, test = load_data(cfg)
    net = _load_model(cfg)
    subset = test.subset(np.arange(min(cfg.landscape_samples, len(test))))
    grid = analysis.landscape_scan(net, subset, resolution=cfg.resolution, span=cfg.span,
                                   seed=cfg.directions_seed, T=cfg.eval_T)
    _write(out / "landscape.csv", grid.csv())
    r = min(5, grid.center)
    print(f"sharpness (radius {r}): SDT {analysis.sharpness_index(grid, r, 'SDT'):.4g}, "
          f"TET {analysis.sharpness_index(grid, r, 'TET'):.4g}")
    return EXIT_OK


def cmd_energy(cfg: RunConfig) -> int:
    out = _out(cfg)
    _, test = load_data(cfg)
    net = _load_model(cfg)
    x = test.frames[:cfg.energy_samples]
    if x.ndim == 5:
        x = np.swapaxes(x, 0, 1)
    rep = analysis.energy_estimate(net, x, cfg.eval_T or net.T)
    _write(out / "energy.csv", rep.csv())
    print(f"{rep.adds} adds, {rep.mults} mults, {rep.energy_pj_per_sample:.4g} pJ per sample")
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    results = checks.run_all()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


HANDLERS = {"train": cmd_train, "evaluate": cmd_evaluate, "tit": cmd_tit, "landscape": cmd_landscape,
            "energy": cmd_energy, "check": cmd_check}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _flag_pairs(extra: list[str]) -> dict:
    pairs = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r} (flags look like --key=value)")
        key, sep, value = tok[2:].partition("=")
        if not sep:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"flag --{key} needs a value")
        pairs[key.replace("-", "_")] = value
    return pairs


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tetsnn", description="Spiking network training and analysis.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args, extra = make_parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = cfgmod.parse_config(args.config, _flag_pairs(extra)).resolved()
        if args.command != "check":
            _write(_out(cfg) / "config.txt", cfgmod.dumps(cfg))
        start = time.perf_counter()
        code = HANDLERS[args.command](cfg)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
